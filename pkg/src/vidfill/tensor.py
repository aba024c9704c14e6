"""Dense float32 tensors with taped reverse-mode differentiation.

Kernels are pure functions: inputs are never mutated, every op returns a
fresh tensor. Reductions (sums, softmax denominators) accumulate in
float64 before casting back to float32. Every tensor is checked finite on
construction, so a kernel that produces NaN/Inf raises NumericError at
the op that caused it.

The tape is implicit: each op links its output to its inputs and records
a closure that propagates the output gradient. `backward` replays the
recorded closures in reverse topological order. Ops whose inputs neither
require gradients nor sit on a live tape skip recording entirely, so
inference builds no tape.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError

__all__ = [
    "Tensor",
    "softmax",
    "scaled_dot_attention",
    "conv2d",
    "upsample2x",
    "group_norm",
    "silu",
    "concat",
    "sinusoidal_encoding",
    "backward",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.astype(np.float32, copy=False)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _prev: tuple = ()):
        arr = np.asarray(data, dtype=np.float32)
        # NaN/Inf both propagate through a sum, so one reduction checks all
        if arr.size and not np.isfinite(arr.sum(dtype=np.float32)):
            raise NumericError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev = _prev
        self._backward = None
        self.name = name

    # -- plumbing ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray):
        # grads are never mutated in place, so the first write can share g
        if self.grad is None:
            self.grad = g.astype(np.float32, copy=False)
        else:
            self.grad = self.grad + g

    @staticmethod
    def _lift(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=np.float32))

    @staticmethod
    def _out(data, inputs: tuple["Tensor", ...], backward_fn) -> "Tensor":
        """Create an op output, recording the tape only when needed."""
        live = tuple(t for t in inputs if t.requires_grad or t._prev)
        if not live:
            return Tensor(data)
        out = Tensor(data, requires_grad=True, _prev=live)
        out._backward = backward_fn
        return out

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        out_data = self.data + other.data

        def bw(g):
            if self.requires_grad or self._prev:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad or other._prev:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return self._out(out_data, (self, other), bw)

    __radd__ = __add__

    def __mul__(self, other):
        other = self._lift(other)
        out_data = self.data * other.data

        def bw(g):
            if self.requires_grad or self._prev:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad or other._prev:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return self._out(out_data, (self, other), bw)

    __rmul__ = __mul__

    def __neg__(self):
        return self * np.float32(-1.0)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __truediv__(self, other):
        other = self._lift(other)
        return self * other ** -1.0

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ValueError("only scalar exponents are supported")
        out_data = self.data ** np.float32(exponent)

        def bw(g):
            self._accumulate(g * exponent * self.data ** np.float32(exponent - 1))

        return self._out(out_data, (self,), bw)

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data
        # stacked (..., n, c) @ (c, d) collapses to one GEMM
        flat = a.ndim > 2 and b.ndim == 2
        if flat:
            out_data = (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
        else:
            out_data = np.matmul(a, b)

        def bw(g):
            if flat:
                g2 = g.reshape(-1, g.shape[-1])
                if self.requires_grad or self._prev:
                    self._accumulate((g2 @ b.T).reshape(a.shape))
                if other.requires_grad or other._prev:
                    other._accumulate(a.reshape(-1, a.shape[-1]).T @ g2)
                return
            if self.requires_grad or self._prev:
                ga = np.matmul(g, np.swapaxes(b, -1, -2))
                self._accumulate(_unbroadcast(ga, a.shape))
            if other.requires_grad or other._prev:
                gb = np.matmul(np.swapaxes(a, -1, -2), g)
                other._accumulate(_unbroadcast(gb, b.shape))

        return self._out(out_data, (self, other), bw)

    # -- shape ops --------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def bw(g):
            self._accumulate(g.reshape(self.data.shape))

        return self._out(out_data, (self,), bw)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        out_data = np.ascontiguousarray(self.data.transpose(axes))
        inverse = np.argsort(axes)

        def bw(g):
            self._accumulate(g.transpose(inverse))

        return self._out(out_data, (self,), bw)

    def __getitem__(self, idx):
        out_data = np.ascontiguousarray(self.data[idx])

        def bw(g):
            buf = np.zeros_like(self.data)
            np.add.at(buf, idx, g)
            self._accumulate(buf)

        return self._out(out_data, (self,), bw)

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32)

        def bw(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.data.shape))

        return self._out(out_data, (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for a in axes:
                n *= self.data.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * np.float32(1.0 / n)

    # -- autodiff ---------------------------------------------------------

    def backward(self):
        """Seed d(self)/d(self)=1 and replay the tape in reverse order."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)


def backward(loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Run reverse-mode differentiation from a scalar `loss`.

    Returns d(loss)/d(p) for every trainable entry of `params`; frozen
    parameters (requires_grad False) are omitted. Parameters the tape
    never touched get zero gradients.
    """
    loss.backward()
    if params is None:
        return {}
    grads = {}
    for name, p in params.items():
        if not p.requires_grad:
            continue
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return grads


# -- kernels ---------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtracted, float64 sums)."""
    x = Tensor._lift(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=axis, keepdims=True, dtype=np.float64)   # 64-bit accumulation
    y = e * (1.0 / denom).astype(np.float32)

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True, dtype=np.float64).astype(np.float32)
        x._accumulate(y * (g - inner))

    return Tensor._out(y, (x,), bw)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v over the last two axes; leading axes broadcast."""
    q, k, v = Tensor._lift(q), Tensor._lift(k), Tensor._lift(v)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key rows {k.shape[-2]} != value rows {v.shape[-2]}")
    d = q.shape[-1]
    scores = (q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * np.float32(1.0 / math.sqrt(d))
    return softmax(scores, axis=-1) @ v


def _im2col(xp: np.ndarray, k: int, stride: int):
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]          # (B, C, Ho, Wo, k, k)
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution with zero padding, im2col + GEMM.

    x: (B, C_in, H, W) or (C_in, H, W); w: (C_out, C_in, k, k).
    """
    x, w = Tensor._lift(x), Tensor._lift(w)
    squeeze = x.ndim == 3
    xa = x.data[None] if squeeze else x.data
    b, cin, h, wd = xa.shape
    cout, cin_w, k, k2 = w.shape
    if k != k2 or cin != cin_w:
        raise ValueError(f"kernel {w.shape} incompatible with input {xa.shape}")
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ValueError("padded input smaller than kernel")
    if (h + 2 * pad - k) % stride or (wd + 2 * pad - k) % stride:
        raise ValueError("non-integral output extent")
    xp = np.pad(xa, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xa
    cols, ho, wo = _im2col(xp, k, stride)
    w2 = w.data.reshape(cout, cin * k * k)
    out = np.matmul(w2, cols).reshape(b, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        g2 = g4.reshape(b, cout, ho * wo)
        if bias is not None and (bias.requires_grad or bias._prev):
            bias._accumulate(g4.sum(axis=(0, 2, 3)))
        if w.requires_grad or w._prev:
            g_flat = g4.transpose(1, 0, 2, 3).reshape(cout, b * ho * wo)
            c_flat = cols.transpose(1, 0, 2).reshape(cin * k * k, b * ho * wo)
            w._accumulate((g_flat @ c_flat.T).reshape(w.shape))
        if x.requires_grad or x._prev:
            dcols = np.matmul(w2.T, g2).reshape(b, cin, k, k, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
            x._accumulate(dx[0] if squeeze else dx)

    inputs = (x, w) if bias is None else (x, w, bias)
    return Tensor._out(out, inputs, bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of (B, C, H, W)."""
    x = Tensor._lift(x)
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        b, c, h2, w2 = g.shape
        x._accumulate(g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return Tensor._out(out, (x,), bw)


def silu(x: Tensor) -> Tensor:
    x = Tensor._lift(x)
    with np.errstate(over="ignore"):
        s = np.float32(1.0) / (np.float32(1.0) + np.exp(-x.data))
    out = x.data * s

    def bw(g):
        x._accumulate(g * (s * (1.0 + x.data * (1.0 - s))))

    return Tensor._out(out, (x,), bw)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bw(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad or t._prev:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + size)
                t._accumulate(g[tuple(sl)])
            offset += size

    return Tensor._out(out, tuple(tensors), bw)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int,
               eps: float = 1e-5) -> Tensor:
    """GroupNorm over (C/groups, H, W) per sample of (B, C, H, W).

    Single fused kernel; moment reductions accumulate in float64.
    """
    x, gamma, beta = Tensor._lift(x), Tensor._lift(gamma), Tensor._lift(beta)
    b, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"channels {c} not divisible by {groups} groups")
    m = (c // groups) * h * w
    xg = x.data.reshape(b, groups, m)
    mu = xg.mean(axis=2, keepdims=True, dtype=np.float64)
    var = np.square(xg, dtype=np.float64).mean(axis=2, keepdims=True) - mu * mu
    inv = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    mu = mu.astype(np.float32)
    xhat = ((xg - mu) * inv).reshape(b, c, h, w)
    g4 = gamma.data.reshape(1, c, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        if gamma.requires_grad or gamma._prev:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32))
        if beta.requires_grad or beta._prev:
            beta._accumulate(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32))
        if x.requires_grad or x._prev:
            dxh = (g * g4).reshape(b, groups, m)
            xh = xhat.reshape(b, groups, m)
            s1 = dxh.sum(axis=2, keepdims=True, dtype=np.float64).astype(np.float32)
            s2 = (dxh * xh).sum(axis=2, keepdims=True, dtype=np.float64).astype(np.float32)
            dx = (dxh - s1 / m - xh * (s2 / m)) * inv
            x._accumulate(dx.reshape(b, c, h, w))

    return Tensor._out(out, (x, gamma, beta), bw)


def sinusoidal_encoding(position: int, dim: int, max_len: int = 24) -> np.ndarray:
    """Interleaved sin/cos position features: entry 2k = sin(p / 10000^(2k/dim)),
    entry 2k+1 = cos of the same angle.

    `max_len` is the table bound the encoding was trained with; positions at
    or beyond it raise (callers must window longer sequences instead).
    """
    if dim % 2:
        raise ValueError("encoding dim must be even")
    if not 0 <= position < max_len:
        raise ValueError(f"position {position} outside encoding range [0, {max_len})")
    k = np.arange(dim // 2, dtype=np.float64)
    angles = position / np.power(10000.0, 2.0 * k / dim)
    enc = np.empty(dim, dtype=np.float32)
    enc[0::2] = np.sin(angles)
    enc[1::2] = np.cos(angles)
    return enc


def encoding_table(length: int, dim: int, max_len: int = 24) -> np.ndarray:
    """Stacked sinusoidal encodings for positions 0..length-1."""
    return np.stack([sinusoidal_encoding(i, dim, max_len) for i in range(length)])
