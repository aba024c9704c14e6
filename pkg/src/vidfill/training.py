"""Synthetic training data, mask synthesis, objectives and the staged
optimization loop.

Stage "motion" trains only the temporal modules against the masked-video
denoising objective; stage "control" freezes everything else and trains the
structure branch against the same objective with structure features
injected. Freezing is exact: tensors outside the active group are never
touched by the optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .conditioning import MaskSequence, VideoTensor, make_condition
from .denoiser import DenoiserConfig, forward, set_trainable
from .diffusion import NoiseSchedule, q_sample
from .structure import control_forward, extract_structure
from .tensor import Tensor, backward

SHAPES = ("square", "circle", "triangle")
COLORS = {
    "red": (0.9, -0.7, -0.7),
    "green": (-0.7, 0.9, -0.7),
    "blue": (-0.7, -0.7, 0.9),
    "yellow": (0.9, 0.9, -0.7),
    "purple": (0.6, -0.7, 0.9),
    "orange": (0.9, 0.2, -0.7),
}
DIRECTIONS = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1)}


@dataclass
class SyntheticSample:
    video: VideoTensor
    caption: str
    masks: MaskSequence


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "motion"            # "motion" | "control"
    steps: int = 500
    batch_size: int = 2
    learning_rate: float = 1e-3
    cfg_dropout_prob: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.stage not in ("motion", "control"):
            raise ValueError(f"unknown training stage {self.stage!r}")
        if not 0.0 <= self.cfg_dropout_prob <= 1.0:
            raise ValueError("cfg_dropout_prob must lie in [0, 1]")


def _value_noise(rng, h, w, cells=4, amp=0.5):
    """Smooth per-channel background: a coarse random grid upsampled bilinearly."""
    grid = rng.uniform(-amp, amp, size=(3, cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.clip(ys.astype(int), 0, cells - 1)
    x0 = np.clip(xs.astype(int), 0, cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    out = np.empty((3, h, w))
    for c in range(3):
        g = grid[c]
        top = g[y0][:, x0] * (1 - fx) + g[y0][:, x0 + 1] * fx
        bot = g[y0 + 1][:, x0] * (1 - fx) + g[y0 + 1][:, x0 + 1] * fx
        out[c] = top * (1 - fy[:, 0])[:, None] + bot * fy
    return out.astype(np.float32)


def _shape_mask(shape, cx, cy, r, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = xx - cx, yy - cy
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    # upward triangle: apex at (cx, cy - r), base at cy + r
    return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)


def gen_synthetic_dataset(count: int, seed: int, frames: int = 16,
                          size: int = 32) -> list[SyntheticSample]:
    """Clips of 1-2 solid shapes moving linearly over a smooth textured
    background, captioned "a <color> <shape> moving <direction>", with the
    captioned object's mask per frame."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        bg = _value_noise(rng, size, size)
        color_name = str(rng.choice(list(COLORS)))
        shape = str(rng.choice(SHAPES))
        direction = str(rng.choice(list(DIRECTIONS)))
        dx, dy = DIRECTIONS[direction]
        r_lo = max(2, size // 8)
        r_hi = min(max(r_lo, size // 5), (size - 3) // 2)
        r = int(rng.integers(r_lo, r_hi + 1))
        # largest speed (sub-pixel allowed) whose full travel keeps the
        # object strictly inside the frame (1px border margin) for every
        # step; degenerates to static when the frame leaves no room
        max_travel = max(0, size - 2 * r - 3)
        speed = next(s for s in (2.0, 1.0, 0.5, 0.25, 0.0)
                     if s * (frames - 1) <= max_travel)
        travel = int(np.ceil(speed * (frames - 1)))
        lo_x = r + 1 + (travel if dx < 0 else 0)
        hi_x = size - 2 - r - (travel if dx > 0 else 0)
        lo_y = r + 1 + (travel if dy < 0 else 0)
        hi_y = size - 2 - r - (travel if dy > 0 else 0)
        cx = int(rng.integers(lo_x, hi_x + 1))
        cy = int(rng.integers(lo_y, hi_y + 1))

        extra = None
        if rng.random() < 0.5:
            er = max(2, min(5, size // 8))
            extra = (str(rng.choice(SHAPES)), str(rng.choice(list(COLORS))), er,
                     int(rng.integers(er, size - er)), int(rng.integers(er, size - er)))

        vid = np.empty((frames, 3, size, size), np.float32)
        msk = np.empty((frames, 1, size, size), np.float32)
        for f in range(frames):
            frame = bg.copy()
            if extra is not None:
                es, ec, er, ex, ey = extra
                em = _shape_mask(es, ex, ey, er, size, size)
                for c in range(3):
                    frame[c][em] = COLORS[ec][c]
            px = cx + int(round(dx * speed * f))
            py = cy + int(round(dy * speed * f))
            m = _shape_mask(shape, px, py, r, size, size)
            for c in range(3):
                frame[c][m] = COLORS[color_name][c]
            vid[f] = np.clip(frame, -1.0, 1.0)
            msk[f, 0] = m.astype(np.float32)
        caption = f"a {color_name} {shape} moving {direction}"
        samples.append(SyntheticSample(VideoTensor(vid), caption, MaskSequence(msk)))
    return samples


def _stroke_mask(h, w, x0, y0, x1, y1, thickness):
    yy, xx = np.mgrid[0:h, 0:w]
    vx, vy = x1 - x0, y1 - y0
    seg2 = vx * vx + vy * vy
    if seg2 == 0:
        d2 = (xx - x0) ** 2 + (yy - y0) ** 2
    else:
        t = np.clip(((xx - x0) * vx + (yy - y0) * vy) / seg2, 0.0, 1.0)
        d2 = (xx - (x0 + t * vx)) ** 2 + (yy - (y0 + t * vy)) ** 2
    return d2 <= thickness * thickness


def gen_random_mask(height: int, width: int, frames: int, seed: int) -> MaskSequence:
    """Union of 1-3 random rectangles plus up to 2 thick strokes, either static
    or drifting linearly; per-frame coverage kept within [5%, 60%]."""
    if height < 1 or width < 1 or frames < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    for _ in range(24):
        rects = []
        for _ in range(int(rng.integers(1, 4))):
            rw = int(rng.integers(max(2, width // 8), max(3, width // 2)))
            rh = int(rng.integers(max(2, height // 8), max(3, height // 2)))
            rects.append((int(rng.integers(0, width - rw + 1)),
                          int(rng.integers(0, height - rh + 1)), rw, rh))
        strokes = []
        for _ in range(int(rng.integers(0, 3))):
            strokes.append((int(rng.integers(0, width)), int(rng.integers(0, height)),
                            int(rng.integers(0, width)), int(rng.integers(0, height)),
                            int(rng.integers(2, 5))))
        if rng.random() < 0.5:
            vx = vy = 0
        else:
            vx, vy = int(rng.integers(-2, 3)), int(rng.integers(-2, 3))

        out = np.zeros((frames, 1, height, width), np.float32)
        for f in range(frames):
            ox, oy = vx * f, vy * f
            acc = np.zeros((height, width), bool)
            for (x, y, rw, rh) in rects:
                xs = int(np.clip(x + ox, 0, width - rw))
                ys = int(np.clip(y + oy, 0, height - rh))
                acc[ys:ys + rh, xs:xs + rw] = True
            for (x0, y0, x1, y1, th) in strokes:
                acc |= _stroke_mask(height, width,
                                    np.clip(x0 + ox, 0, width - 1),
                                    np.clip(y0 + oy, 0, height - 1),
                                    np.clip(x1 + ox, 0, width - 1),
                                    np.clip(y1 + oy, 0, height - 1), th)
            out[f, 0] = acc
        cov = out.mean(axis=(1, 2, 3))
        if cov.min() >= 0.05 and cov.max() <= 0.60:
            return MaskSequence(out)
    # fallback: a centered static rectangle at ~30% coverage
    rh, rw = int(height * 0.55), int(width * 0.55)
    y0, x0 = (height - rh) // 2, (width - rw) // 2
    out = np.zeros((frames, 1, height, width), np.float32)
    out[:, 0, y0:y0 + rh, x0:x0 + rw] = 1.0
    return MaskSequence(out)


def inpaint_loss(params, config: DenoiserConfig, sched: NoiseSchedule,
                 sample: SyntheticSample, t: int, eps: np.ndarray,
                 masks: MaskSequence, null_text: bool = False) -> Tensor:
    """Mean squared error between drawn noise and the prediction at
    v_t = q_sample(v_0, t, eps), conditioned on the masked video."""
    cond = make_condition(sample.video, masks, sample.caption, null_condition=null_text)
    vt = q_sample(sample.video.data, t, eps, sched)
    pred = forward(params, config, vt, t, cond)
    diff = pred - Tensor(eps)
    return (diff * diff).mean()


def structure_loss(params, config: DenoiserConfig, sched: NoiseSchedule,
                   sample: SyntheticSample, t: int, eps: np.ndarray,
                   masks: MaskSequence, null_text: bool = False) -> Tensor:
    """Same objective with the control branch's features injected (full
    structural scale during training)."""
    cond = make_condition(sample.video, masks, sample.caption, null_condition=null_text)
    vt = q_sample(sample.video.data, t, eps, sched)
    smap = extract_structure(sample.video, masks)
    feats = control_forward(params, config, vt, t, cond, smap)
    pred = forward(params, config, vt, t, cond, structure=feats)
    diff = pred - Tensor(eps)
    return (diff * diff).mean()


class Adam:
    """Adam over a named parameter subset; state keyed by name."""

    def __init__(self, names, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.names = list(names)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name in self.names:
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            params[name].data = params[name].data - np.float32(self.lr) * update.astype(np.float32)


def train_stage(config: TrainConfig, dataset: list[SyntheticSample],
                params: dict[str, Tensor], model: DenoiserConfig,
                sched: NoiseSchedule, start_step: int = 0,
                on_step=None) -> list[dict]:
    """Optimize one weight group; returns the per-step loss trace."""
    if not dataset:
        raise ValueError("empty dataset")
    group = "motion" if config.stage == "motion" else "control"
    if config.stage == "control" and not any(n.startswith("control.") for n in params):
        raise ValueError("control stage requires control-branch weights")
    set_trainable(params, group)
    opt = Adam([n for n in params if n.startswith(group + ".")], lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    loss_fn = inpaint_loss if config.stage == "motion" else structure_loss

    trace = []
    try:
        for step in range(start_step, start_step + config.steps):
            total = None
            for _ in range(config.batch_size):
                sample = dataset[int(rng.integers(len(dataset)))]
                t = int(rng.integers(sched.T))
                eps = rng.standard_normal(sample.video.data.shape).astype(np.float32)
                masks = gen_random_mask(sample.video.height, sample.video.width,
                                        sample.video.frames, int(rng.integers(2 ** 31)))
                null_text = bool(rng.random() < config.cfg_dropout_prob)
                loss = loss_fn(params, model, sched, sample, t, eps, masks, null_text)
                total = loss if total is None else total + loss
            total = total * np.float32(1.0 / config.batch_size)
            grads = backward(total, params)
            opt.step(params, grads)
            entry = {"step": step, "stage": config.stage, "loss": float(total.data)}
            trace.append(entry)
            if on_step is not None:
                on_step(entry)
    finally:
        set_trainable(params, None)
    return trace
