"""Any-length sampling: segment planning, coverage-weighted aggregation and
the full windowed denoising loop.

Per denoising step: (1) the segment containing the reference frame runs once
to populate the per-layer K/V cache, (2) every segment runs with the cache
read-only (parallelizable across workers), each segment applying its own
reverse step, (3) the one-step-denoised clips are averaged per frame,
weighted by how many clips cover that frame. After the loop the result is
composited with the source so out-of-mask pixels stay bit-exact.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .conditioning import ConditionSet, MaskSequence, VideoTensor, make_condition
from .denoiser import (ALL_STRATEGIES, GUIDED_STRATEGIES, AttentionGuidanceState,
                       CaptureState, DenoiserConfig, eval_params, forward)
from .diffusion import (NoiseSchedule, SamplerConfig, cfg_combine, composite_final,
                        ddim_step, ddpm_step)
from .errors import StateError
from .structure import (StructureMap, control_forward, extract_structure,
                        has_control_branch, scale_features)
from .tensor import Tensor


@dataclass(frozen=True)
class SegmentPlan:
    """Sliding-window decomposition of an N'-frame video into n clips."""
    total_frames: int
    window: int
    stride: int
    starts: tuple[int, ...]
    coverage: tuple[tuple[tuple[int, int], ...], ...]   # frame k -> ((clip, offset), ...)

    @property
    def n(self) -> int:
        return len(self.starts)

    def segment_of(self, frame: int) -> int:
        """Lowest-start clip containing `frame`."""
        for i, s in enumerate(self.starts):
            if s <= frame < s + self.window:
                return i
        raise ValueError(f"frame {frame} not covered by any clip")


def plan_segments(n_prime: int, n_window: int, stride: int) -> SegmentPlan:
    """Clip starts are i*stride, the final start clamped to n_prime - window so
    every window has exactly `window` frames and frame n_prime - 1 is covered."""
    if n_prime < 1 or n_window < 1 or stride < 1:
        raise ValueError("n_prime, window and stride must all be >= 1")
    window = min(n_window, n_prime)
    if n_prime <= n_window:
        starts: tuple[int, ...] = (0,)
    else:
        n = -(-(n_prime - n_window) // stride) + 1
        starts = tuple(min(i * stride, n_prime - n_window) for i in range(n))
    coverage = []
    for k in range(n_prime):
        cover = tuple((i, k - s) for i, s in enumerate(starts) if s <= k < s + window)
        coverage.append(cover)
    return SegmentPlan(total_frames=n_prime, window=window, stride=stride,
                       starts=starts, coverage=tuple(coverage))


def aggregate(clip_outputs: list[np.ndarray], plan: SegmentPlan) -> np.ndarray:
    """Eq-style coverage mean: frame k is the average of every covering clip's
    corresponding frame. Summation runs in clip-index order in float64."""
    if len(clip_outputs) != plan.n:
        raise ValueError(f"expected {plan.n} clips, got {len(clip_outputs)}")
    tail = clip_outputs[0].shape[1:]
    for i, c in enumerate(clip_outputs):
        if c.shape != (plan.window,) + tail:
            raise ValueError(f"clip {i} has shape {c.shape}, expected {(plan.window,) + tail}")
    acc = np.zeros((plan.total_frames,) + tail, dtype=np.float64)
    counts = np.zeros(plan.total_frames, dtype=np.float64)
    for i, s in enumerate(plan.starts):
        acc[s:s + plan.window] += clip_outputs[i]
        counts[s:s + plan.window] += 1.0
    acc /= counts.reshape((-1,) + (1,) * len(tail))
    return acc.astype(np.float32)


@dataclass(frozen=True)
class GuidanceConfig:
    """Inference-time guidance knobs."""
    strategy: str = "mf"
    omega: float = 0.3
    omega_s: float = 0.0
    cfg_scale: float = 7.5

    def __post_init__(self):
        if self.strategy not in ALL_STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError("omega must lie in [0, 1]")
        if self.omega_s < 0:
            raise ValueError("omega_s must be >= 0")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")


@dataclass
class SamplingRequest:
    video: VideoTensor
    masks: MaskSequence
    prompt: str
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    window: int = 16
    stride: int = 4

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ValueError("window and stride must be >= 1")


def reference_frame_index(n_prime: int, strategy: str) -> int:
    """Global reference frame: the video middle (0-based floor) for middle-frame
    strategies, frame 0 for first-frame guidance."""
    return 0 if strategy == "ff" else n_prime // 2


class _StepRunner:
    """Shared machinery between the windowed and the single-clip samplers."""

    def __init__(self, request: SamplingRequest, params, config: DenoiserConfig,
                 sched: NoiseSchedule):
        g = request.guidance
        if request.window > config.temporal_max_len:
            raise ValueError(f"window {request.window} exceeds "
                             f"temporal_max_len={config.temporal_max_len}")
        if g.omega_s > 0 and not has_control_branch(params):
            raise StateError("omega_s > 0 requires control-branch weights")
        self.request = request
        self.config = config
        self.sched = sched
        self.params = eval_params(params)
        self.cond = make_condition(request.video, request.masks, request.prompt)
        self.null = make_condition(request.video, request.masks, "", null_condition=True)
        self.branches = [self.cond] if g.cfg_scale == 1.0 else [self.null, self.cond]
        self.structure = (extract_structure(request.video, request.masks)
                          if g.omega_s > 0 else None)

    def features_for(self, v_seg, t, cond_seg, start):
        if self.structure is None:
            return None
        seg_map = StructureMap(self.structure.data[start:start + v_seg.shape[0]])
        feats = control_forward(self.params, self.config, v_seg, t, cond_seg, seg_map)
        return scale_features(feats, self.request.guidance.omega_s)

    def build_caches(self, v, t, ref_start, ref_local, window):
        """Stage 1: run the reference segment per branch, capturing K/V."""
        caches = []
        sl = slice(ref_start, ref_start + window)
        for branch in self.branches:
            cond_seg = branch.slice_frames(sl.start, sl.stop)
            cap = CaptureState(local_index=ref_local)
            feats = self.features_for(v[sl], t, cond_seg, sl.start)
            forward(self.params, self.config, v[sl], t, cond_seg,
                    structure=feats, capture=cap)
            caches.append(cap.cache)
        return caches

    def denoise_segment(self, v, t, t_prev, start, caches, noise, window):
        g = self.request.guidance
        sl = slice(start, start + window)
        preds = []
        for bi, branch in enumerate(self.branches):
            cond_seg = branch.slice_frames(sl.start, sl.stop)
            if g.strategy == "none":
                state = None
            else:
                cache = caches[bi] if caches else {}
                state = AttentionGuidanceState(g.strategy, g.omega, cache)
            feats = self.features_for(v[sl], t, cond_seg, sl.start)
            preds.append(forward(self.params, self.config, v[sl], t, cond_seg,
                                 structure=feats, guidance=state).data)
        eps = preds[0] if len(preds) == 1 else cfg_combine(preds[0], preds[1], g.cfg_scale)
        noise_seg = None if noise is None else noise[sl]
        if self.request.sampler.kind == "ddim":
            return ddim_step(v[sl], eps, t, t_prev, self.sched,
                             self.request.sampler.eta, noise_seg)
        return ddpm_step(v[sl], eps, t, self.sched, noise_seg)

    def step_noise(self, rng, shape, t, t_prev):
        s = self.request.sampler
        if s.kind == "ddpm" and t > 0:
            return rng.standard_normal(shape).astype(np.float32)
        if s.kind == "ddim" and s.eta > 0 and t_prev >= 0:
            return rng.standard_normal(shape).astype(np.float32)
        return None


def sample_video(request: SamplingRequest, params, config: DenoiserConfig,
                 sched: NoiseSchedule, workers: int = 1) -> VideoTensor:
    """Windowed any-length sampling over the full request."""
    runner = _StepRunner(request, params, config, sched)
    n_prime = request.video.frames
    plan = plan_segments(n_prime, request.window, request.stride)
    strategy = request.guidance.strategy
    ref = reference_frame_index(n_prime, strategy)
    ref_seg = plan.segment_of(ref)
    ref_start = plan.starts[ref_seg]

    rng = np.random.default_rng(request.sampler.seed)
    shape = (n_prime, 3, request.video.height, request.video.width)
    v = rng.standard_normal(shape).astype(np.float32)

    ts = request.sampler.timesteps(sched.T)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        noise = runner.step_noise(rng, shape, t, t_prev)
        caches = (runner.build_caches(v, t, ref_start, ref - ref_start, plan.window)
                  if strategy in GUIDED_STRATEGIES else None)

        def run_one(idx, _v=v, _t=t, _tp=t_prev, _caches=caches, _noise=noise):
            return runner.denoise_segment(_v, _t, _tp, plan.starts[idx], _caches,
                                          _noise, plan.window)

        if workers > 1 and plan.n > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                clips = list(pool.map(run_one, range(plan.n)))
        else:
            clips = [run_one(idx) for idx in range(plan.n)]
        v = aggregate(clips, plan)

    generated = np.clip(v, -1.0, 1.0)
    return VideoTensor(composite_final(generated, request.video.data, request.masks.data))


def sample_direct(request: SamplingRequest, params, config: DenoiserConfig,
                  sched: NoiseSchedule) -> VideoTensor:
    """Single-clip inference over all frames at once (no windowing).

    The clip must fit the temporal positional table; this is the reference
    path the windowed sampler degenerates to when N' = N.
    """
    n_prime = request.video.frames
    if n_prime > config.temporal_max_len:
        raise ValueError(f"{n_prime} frames exceed temporal_max_len="
                         f"{config.temporal_max_len}; use sample_video")
    runner = _StepRunner(request, params, config, sched)
    strategy = request.guidance.strategy
    ref = reference_frame_index(n_prime, strategy)

    rng = np.random.default_rng(request.sampler.seed)
    shape = (n_prime, 3, request.video.height, request.video.width)
    v = rng.standard_normal(shape).astype(np.float32)

    ts = request.sampler.timesteps(sched.T)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        noise = runner.step_noise(rng, shape, t, t_prev)
        caches = (runner.build_caches(v, t, 0, ref, n_prime)
                  if strategy in GUIDED_STRATEGIES else None)
        clip = runner.denoise_segment(v, t, t_prev, 0, caches, noise, n_prime)
        v = aggregate([clip], plan_segments(n_prime, n_prime, request.stride))

    generated = np.clip(v, -1.0, 1.0)
    return VideoTensor(composite_final(generated, request.video.data, request.masks.data))
