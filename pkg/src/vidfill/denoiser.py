"""Pseudo-3D denoising UNet.

A 2D residual/attention backbone applied per frame, inflated with temporal
self-attention modules ("motion modules") after every block so frames can
interact. Spatial self-attention layers support reference-frame guidance:
each frame's attention output can be blended with attention onto a cached
reference frame's keys/values, or extended with sparse-causal key/value
concatenation.

The encoder emits exactly 12 skip tensors (4 levels x 3 blocks) plus one
middle tensor: 13 additive injection slots at 4 resolutions for the
structure branch.

Parameters live in a flat name -> Tensor dict. The first path component is
the ownership group: "backbone." (2D blocks, cross-attention, in/out convs),
"motion." (temporal modules), "control." (structure branch). Training
stages freeze and unfreeze whole groups only.

Zero-initialized surfaces: motion-module output projections and the final
output convolution, so a freshly inflated model is exactly the per-frame 2D
backbone and a fresh model predicts exactly zero noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .conditioning import ConditionSet
from .errors import StateError
from .tensor import (Tensor, concat, conv2d, encoding_table, group_norm,
                     scaled_dot_attention, silu, softmax, upsample2x)

GUIDED_STRATEGIES = ("mf", "ff", "msc")      # need a reference K/V cache
ALL_STRATEGIES = ("none", "mf", "ff", "sc", "msc")


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 7                     # x_t (3) + masked video (3) + mask (1)
    level_widths: tuple[int, ...] = (32, 64, 96, 128)
    blocks_per_level: int = 3
    spatial_attention_resolutions: tuple[int, ...] = (16, 8, 4)
    temporal_max_len: int = 24
    text_dim: int = 32
    time_embed_dim: int = 64
    image_size: int = 32
    norm_groups: int = 8

    def __post_init__(self):
        if len(self.level_widths) != 4 or self.blocks_per_level != 3:
            raise ValueError("the skip contract requires 4 levels of 3 blocks "
                             "(12 skips + middle = 13 injection slots)")
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8 (3 downsamples)")
        for w in self.level_widths:
            if w % self.norm_groups:
                raise ValueError(f"width {w} not divisible by norm_groups={self.norm_groups}")
            if w % 2:
                raise ValueError(f"width {w} must be even for the temporal encoding")

    @property
    def base_width(self) -> int:
        return self.level_widths[0]

    @property
    def levels(self) -> int:
        return len(self.level_widths)

    @property
    def injection_slots(self) -> int:
        return self.levels * self.blocks_per_level + 1

    def resolution(self, level: int) -> int:
        return self.image_size // (2 ** level)

    def skip_channels(self) -> list[int]:
        """Channel count of each of the 12 skip slots, encoder order."""
        return [w for w in self.level_widths for _ in range(self.blocks_per_level)]


@dataclass
class AttentionGuidanceState:
    """Per-run guidance selector plus the per-layer reference K/V cache.

    cache maps spatial-attention layer id -> (K_ref, V_ref), both (px, d),
    computed from the reference frame of the current denoising step. It must
    be populated for every guided layer before a guided segment pass; "none"
    and "sc" run without it.
    """
    strategy: str = "none"
    omega: float = 0.0
    cache: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in ALL_STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega {self.omega} outside [0, 1]")

    def reference(self, layer_id: str) -> tuple[np.ndarray, np.ndarray]:
        if layer_id not in self.cache:
            raise StateError(f"guidance cache has no entry for layer {layer_id!r}")
        return self.cache[layer_id]


@dataclass
class CaptureState:
    """Records the reference frame's projected K/V at every spatial layer."""
    local_index: int
    cache: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


# -- parameter construction -------------------------------------------------


def _conv_init(rng, cout, cin, k):
    return (rng.standard_normal((cout, cin, k, k)) / math.sqrt(cin * k * k)).astype(np.float32)


def _linear_init(rng, fin, fout):
    return (rng.standard_normal((fin, fout)) / math.sqrt(fin)).astype(np.float32)


def _add_res_block(p, rng, prefix, cin, cout, tdim):
    p[f"{prefix}.norm1.g"] = np.ones(cin, np.float32)
    p[f"{prefix}.norm1.b"] = np.zeros(cin, np.float32)
    p[f"{prefix}.conv1.w"] = _conv_init(rng, cout, cin, 3)
    p[f"{prefix}.conv1.b"] = np.zeros(cout, np.float32)
    p[f"{prefix}.temb.w"] = _linear_init(rng, tdim, cout)
    p[f"{prefix}.temb.b"] = np.zeros(cout, np.float32)
    p[f"{prefix}.norm2.g"] = np.ones(cout, np.float32)
    p[f"{prefix}.norm2.b"] = np.zeros(cout, np.float32)
    p[f"{prefix}.conv2.w"] = _conv_init(rng, cout, cout, 3)
    p[f"{prefix}.conv2.b"] = np.zeros(cout, np.float32)
    if cin != cout:
        p[f"{prefix}.skip.w"] = _conv_init(rng, cout, cin, 1)
        p[f"{prefix}.skip.b"] = np.zeros(cout, np.float32)


def _add_spatial_attention(p, rng, prefix, c, text_dim):
    p[f"{prefix}.sattn.norm.g"] = np.ones(c, np.float32)
    p[f"{prefix}.sattn.norm.b"] = np.zeros(c, np.float32)
    p[f"{prefix}.sattn.wq"] = _linear_init(rng, c, c)
    p[f"{prefix}.sattn.wk"] = _linear_init(rng, c, c)
    p[f"{prefix}.sattn.wv"] = _linear_init(rng, c, c)
    p[f"{prefix}.sattn.wo.w"] = _linear_init(rng, c, c)
    p[f"{prefix}.sattn.wo.b"] = np.zeros(c, np.float32)
    p[f"{prefix}.xattn.norm.g"] = np.ones(c, np.float32)
    p[f"{prefix}.xattn.norm.b"] = np.zeros(c, np.float32)
    p[f"{prefix}.xattn.wq"] = _linear_init(rng, c, c)
    p[f"{prefix}.xattn.wk"] = _linear_init(rng, text_dim, c)
    p[f"{prefix}.xattn.wv"] = _linear_init(rng, text_dim, c)
    p[f"{prefix}.xattn.wo.w"] = _linear_init(rng, c, c)
    p[f"{prefix}.xattn.wo.b"] = np.zeros(c, np.float32)


def _add_temporal_attention(p, rng, prefix, c):
    p[f"{prefix}.tattn.norm.g"] = np.ones(c, np.float32)
    p[f"{prefix}.tattn.norm.b"] = np.zeros(c, np.float32)
    p[f"{prefix}.tattn.wq"] = _linear_init(rng, c, c)
    p[f"{prefix}.tattn.wk"] = _linear_init(rng, c, c)
    p[f"{prefix}.tattn.wv"] = _linear_init(rng, c, c)
    # zero output projection: a fresh motion module is the identity map
    p[f"{prefix}.tattn.wo.w"] = np.zeros((c, c), np.float32)
    p[f"{prefix}.tattn.wo.b"] = np.zeros(c, np.float32)


def init_denoiser_weights(config: DenoiserConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh backbone + motion parameters. Returns name -> Tensor."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    tdim = config.time_embed_dim

    p["backbone.time.fc1.w"] = _linear_init(rng, tdim, tdim)
    p["backbone.time.fc1.b"] = np.zeros(tdim, np.float32)
    p["backbone.time.fc2.w"] = _linear_init(rng, tdim, tdim)
    p["backbone.time.fc2.b"] = np.zeros(tdim, np.float32)
    p["backbone.conv_in.w"] = _conv_init(rng, config.base_width, config.in_channels, 3)
    p["backbone.conv_in.b"] = np.zeros(config.base_width, np.float32)

    cin = config.base_width
    for l, width in enumerate(config.level_widths):
        for b in range(config.blocks_per_level):
            _add_res_block(p, rng, f"backbone.enc.{l}.{b}", cin, width, tdim)
            if config.resolution(l) in config.spatial_attention_resolutions:
                _add_spatial_attention(p, rng, f"backbone.enc.{l}.{b}", width, config.text_dim)
            _add_temporal_attention(p, rng, f"motion.enc.{l}.{b}", width)
            cin = width
        if l < config.levels - 1:
            # kernel-4/stride-2/pad-1 gives an exact halving of even extents
            p[f"backbone.enc.down{l}.w"] = _conv_init(rng, width, width, 4)
            p[f"backbone.enc.down{l}.b"] = np.zeros(width, np.float32)

    w_mid = config.level_widths[-1]
    _add_res_block(p, rng, "backbone.mid.res0", w_mid, w_mid, tdim)
    _add_spatial_attention(p, rng, "backbone.mid", w_mid, config.text_dim)
    _add_temporal_attention(p, rng, "motion.mid", w_mid)
    _add_res_block(p, rng, "backbone.mid.res1", w_mid, w_mid, tdim)

    cin = w_mid
    for l in reversed(range(config.levels)):
        width = config.level_widths[l]
        for b in range(config.blocks_per_level):
            _add_res_block(p, rng, f"backbone.dec.{l}.{b}", cin + width, width, tdim)
            if config.resolution(l) in config.spatial_attention_resolutions:
                _add_spatial_attention(p, rng, f"backbone.dec.{l}.{b}", width, config.text_dim)
            _add_temporal_attention(p, rng, f"motion.dec.{l}.{b}", width)
            cin = width
        if l > 0:
            p[f"backbone.dec.up{l}.w"] = _conv_init(rng, width, width, 3)
            p[f"backbone.dec.up{l}.b"] = np.zeros(width, np.float32)

    p["backbone.out.norm.g"] = np.ones(config.base_width, np.float32)
    p["backbone.out.norm.b"] = np.zeros(config.base_width, np.float32)
    # zero output convolution: an untrained model predicts exactly zero noise.
    # It lives in the motion group: the backbone stays frozen through both
    # training stages, and a readout frozen at zero would block every
    # gradient, so the noise head has to learn alongside the motion modules.
    p["motion.out.conv.w"] = np.zeros((3, config.base_width, 3, 3), np.float32)
    p["motion.out.conv.b"] = np.zeros(3, np.float32)

    return {name: Tensor(arr, name=name) for name, arr in p.items()}


def weight_groups(params: dict[str, Tensor]) -> dict[str, list[str]]:
    """Partition parameter names by ownership group (total and disjoint)."""
    groups: dict[str, list[str]] = {"backbone": [], "motion": [], "control": []}
    for name in params:
        head = name.split(".", 1)[0]
        if head not in groups:
            raise ValueError(f"parameter {name!r} outside the group partition")
        groups[head].append(name)
    return groups


def set_trainable(params: dict[str, Tensor], group: str | None) -> None:
    """Flag exactly one group's tensors trainable (None freezes everything)."""
    for name, t in params.items():
        t.requires_grad = group is not None and name.startswith(group + ".")


def eval_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """A no-tape view sharing the same arrays (for sampling/benchmarks)."""
    return {name: Tensor(t.data, name=name) for name, t in params.items()}


# -- forward blocks ----------------------------------------------------------


def _time_embedding(p, config: DenoiserConfig, t: int) -> Tensor:
    from .tensor import sinusoidal_encoding
    base = Tensor(sinusoidal_encoding(t, config.time_embed_dim, max_len=100_000))
    h = silu(base.reshape(1, -1) @ p["backbone.time.fc1.w"] + p["backbone.time.fc1.b"])
    return (h @ p["backbone.time.fc2.w"] + p["backbone.time.fc2.b"]).reshape(-1)


def _res_block(p, prefix, x, temb, groups):
    cout = p[f"{prefix}.conv1.b"].shape[0]
    h = group_norm(x, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"], groups)
    h = conv2d(silu(h), p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], stride=1, pad=1)
    emb = silu(temb).reshape(1, -1) @ p[f"{prefix}.temb.w"] + p[f"{prefix}.temb.b"]
    h = h + emb.reshape(1, cout, 1, 1)
    h = group_norm(h, p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"], groups)
    h = conv2d(silu(h), p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"], stride=1, pad=1)
    if f"{prefix}.skip.w" in p:
        x = conv2d(x, p[f"{prefix}.skip.w"], p[f"{prefix}.skip.b"], stride=1, pad=0)
    return h + x


def guided_spatial_attention(q: Tensor, k: Tensor, v: Tensor,
                             guidance: AttentionGuidanceState | None,
                             layer_id: str) -> Tensor:
    """Per-frame spatial self-attention with optional reference guidance.

    q, k, v: (N, px, d) projections of the segment's per-frame features.
    Strategies:
      none      plain per-frame self-attention
      mf / ff   (1-w) * self-attention + w * attention onto the cached
                reference frame's K/V (middle or first frame of the video)
      sc        keys/values are [first-of-segment, previous frame]
      msc       sc with the anchor replaced by the cached global reference
    """
    if guidance is None or guidance.strategy == "none":
        return scaled_dot_attention(q, k, v)
    strategy, omega = guidance.strategy, guidance.omega
    n = q.shape[0]
    if strategy in ("mf", "ff"):
        plain = scaled_dot_attention(q, k, v)
        if omega == 0.0:
            return plain
        k_ref, v_ref = guidance.reference(layer_id)
        ref = scaled_dot_attention(q, Tensor(k_ref), Tensor(v_ref))
        if omega == 1.0:
            return ref
        return plain * np.float32(1.0 - omega) + ref * np.float32(omega)
    prev_rows = [0] + list(range(n - 1))     # frame 0 falls back to itself
    k_prev, v_prev = k[prev_rows], v[prev_rows]
    if strategy == "sc":
        anchor_rows = [0] * n
        k_anchor, v_anchor = k[anchor_rows], v[anchor_rows]
    else:                                    # msc: global reference anchor
        k_ref, v_ref = guidance.reference(layer_id)
        k_anchor = Tensor(np.broadcast_to(k_ref, (n,) + k_ref.shape).copy())
        v_anchor = Tensor(np.broadcast_to(v_ref, (n,) + v_ref.shape).copy())
    return scaled_dot_attention(q, concat([k_anchor, k_prev], axis=1),
                                concat([v_anchor, v_prev], axis=1))


def _spatial_attention(p, prefix, layer_id, x, guidance, capture, groups):
    n, c, h, w = x.shape
    hn = group_norm(x, p[f"{prefix}.sattn.norm.g"], p[f"{prefix}.sattn.norm.b"], groups)
    tokens = hn.reshape(n, c, h * w).transpose(0, 2, 1)
    q = tokens @ p[f"{prefix}.sattn.wq"]
    k = tokens @ p[f"{prefix}.sattn.wk"]
    v = tokens @ p[f"{prefix}.sattn.wv"]
    if capture is not None:
        capture.cache[layer_id] = (k.data[capture.local_index].copy(),
                                   v.data[capture.local_index].copy())
    attn = guided_spatial_attention(q, k, v, guidance, layer_id)
    out = attn @ p[f"{prefix}.sattn.wo.w"] + p[f"{prefix}.sattn.wo.b"]
    return x + out.transpose(0, 2, 1).reshape(n, c, h, w)


def _cross_attention(p, prefix, x, text, groups):
    n, c, h, w = x.shape
    hn = group_norm(x, p[f"{prefix}.xattn.norm.g"], p[f"{prefix}.xattn.norm.b"], groups)
    tokens = hn.reshape(n, c, h * w).transpose(0, 2, 1)
    q = tokens @ p[f"{prefix}.xattn.wq"]
    ctx = Tensor(text)
    k = ctx @ p[f"{prefix}.xattn.wk"]
    v = ctx @ p[f"{prefix}.xattn.wv"]
    attn = scaled_dot_attention(q, k, v)
    out = attn @ p[f"{prefix}.xattn.wo.w"] + p[f"{prefix}.xattn.wo.b"]
    return x + out.transpose(0, 2, 1).reshape(n, c, h, w)


def temporal_attention(p, prefix, x, max_len: int, groups: int | None = None):
    """Motion module: per-pixel self-attention across the frame axis with
    sinusoidal frame positions, residual around the module."""
    n, c, h, w = x.shape
    if n > max_len:
        raise ValueError(f"{n} frames exceed the positional table ({max_len})")
    if groups is None:
        groups = _norm_groups_for(p, prefix)
    hn = group_norm(x, p[f"{prefix}.tattn.norm.g"], p[f"{prefix}.tattn.norm.b"], groups)
    tokens = hn.reshape(n, c, h * w).transpose(2, 0, 1)          # (px, N, C)
    tokens = tokens + Tensor(encoding_table(n, c, max_len)[None])
    q = tokens @ p[f"{prefix}.tattn.wq"]
    k = tokens @ p[f"{prefix}.tattn.wk"]
    v = tokens @ p[f"{prefix}.tattn.wv"]
    attn = scaled_dot_attention(q, k, v)
    out = attn @ p[f"{prefix}.tattn.wo.w"] + p[f"{prefix}.tattn.wo.b"]
    return x + out.transpose(1, 2, 0).reshape(n, c, h, w)


def _norm_groups_for(p, prefix) -> int:
    c = p[f"{prefix}.tattn.norm.g"].shape[0]
    g = min(8, c)
    while c % g:
        g -= 1
    return g


def inject_structure(skips: list[Tensor], middle: Tensor, features) -> tuple[list[Tensor], Tensor]:
    """Add the 13 structure maps to the 12 skip slots and the middle slot."""
    maps = features.maps if hasattr(features, "maps") else list(features)
    if len(maps) != len(skips) + 1:
        raise ValueError(f"expected {len(skips) + 1} feature maps, got {len(maps)}")
    out_skips = []
    for i, (s, m) in enumerate(zip(skips, maps[:-1])):
        m_t = m if isinstance(m, Tensor) else Tensor(m)
        if m_t.shape != s.shape:
            raise ValueError(f"slot {i}: feature shape {m_t.shape} != skip shape {s.shape}")
        out_skips.append(s + m_t)
    m_t = maps[-1] if isinstance(maps[-1], Tensor) else Tensor(maps[-1])
    if m_t.shape != middle.shape:
        raise ValueError(f"middle slot: feature shape {m_t.shape} != {middle.shape}")
    return out_skips, middle + m_t


def _encode(p, config, x, temb, text, guidance, capture, prefix=""):
    """Shared encoder walk; returns (skips, middle). `prefix` retargets the
    same layout at the control branch's parameter copy."""
    groups = config.norm_groups
    h = x
    skips = []
    for l in range(config.levels):
        for b in range(config.blocks_per_level):
            site = f"{prefix}enc.{l}.{b}"
            h = _res_block(p, f"backbone.{site}" if not prefix else site, h, temb, groups)
            if h.shape[2] in config.spatial_attention_resolutions:
                ap = f"backbone.{site}" if not prefix else site
                h = _spatial_attention(p, ap, site, h, guidance, capture, groups)
                h = _cross_attention(p, ap, h, text, groups)
            tp = f"motion.{site}" if not prefix else site
            h = temporal_attention(p, tp, h, config.temporal_max_len)
            skips.append(h)
        if l < config.levels - 1:
            dp = f"backbone.{prefix}enc.down{l}" if not prefix else f"{prefix}enc.down{l}"
            h = conv2d(h, p[f"{dp}.w"], p[f"{dp}.b"], stride=2, pad=1)
    mid = f"{prefix}mid" if prefix else "mid"
    bp = f"backbone.{mid}" if not prefix else mid
    h = _res_block(p, f"{bp}.res0", h, temb, groups)
    if h.shape[2] in config.spatial_attention_resolutions:
        h = _spatial_attention(p, bp, mid, h, guidance, capture, groups)
        h = _cross_attention(p, bp, h, text, groups)
    tp = f"motion.{mid}" if not prefix else mid
    h = temporal_attention(p, tp, h, config.temporal_max_len, groups)
    h = _res_block(p, f"{bp}.res1", h, temb, groups)
    return skips, h


def forward(params: dict[str, Tensor], config: DenoiserConfig, vt, t: int,
            cond: ConditionSet, structure=None,
            guidance: AttentionGuidanceState | None = None,
            capture: CaptureState | None = None) -> Tensor:
    """Predict noise for an (N, 3, H, W) latent clip.

    Input channels are concatenated in the fixed order (x_t, masked video,
    mask). `structure`, when present, is a 13-slot feature set added to the
    skip and middle slots before decoding.
    """
    vt_arr = vt.data if isinstance(vt, Tensor) else np.asarray(vt, np.float32)
    n = vt_arr.shape[0]
    if n > config.temporal_max_len:
        raise ValueError(f"{n} frames exceed temporal_max_len={config.temporal_max_len}")
    if cond.masked_video.shape[0] != n:
        raise ValueError(f"condition has {cond.masked_video.shape[0]} frames, latent has {n}")
    if guidance is not None and guidance.strategy in GUIDED_STRATEGIES and not guidance.cache:
        raise StateError(f"strategy {guidance.strategy!r} requires a populated K/V cache")

    x = Tensor(np.concatenate([vt_arr, cond.masked_video, cond.masks], axis=1))
    temb = _time_embedding(params, config, t)
    text = cond.text_embedding
    groups = config.norm_groups

    h = conv2d(x, params["backbone.conv_in.w"], params["backbone.conv_in.b"], stride=1, pad=1)
    skips, middle = _encode(params, config, h, temb, text, guidance, capture)

    if structure is not None:
        skips, middle = inject_structure(skips, middle, structure)

    h = middle
    for l in reversed(range(config.levels)):
        for b in range(config.blocks_per_level):
            site = f"dec.{l}.{b}"
            h = _res_block(params, f"backbone.{site}", concat([h, skips.pop()], axis=1),
                           temb, groups)
            if h.shape[2] in config.spatial_attention_resolutions:
                h = _spatial_attention(params, f"backbone.{site}", site, h, guidance,
                                       capture, groups)
                h = _cross_attention(params, f"backbone.{site}", h, text, groups)
            h = temporal_attention(params, f"motion.{site}", h, config.temporal_max_len, groups)
        if l > 0:
            h = upsample2x(h)
            h = conv2d(h, params[f"backbone.dec.up{l}.w"], params[f"backbone.dec.up{l}.b"],
                       stride=1, pad=1)

    h = group_norm(h, params["backbone.out.norm.g"], params["backbone.out.norm.b"], groups)
    return conv2d(silu(h), params["motion.out.conv.w"], params["motion.out.conv.b"],
                  stride=1, pad=1)
