"""Automatic metrics and the runtime-scaling benchmark.

Background preservation (BP): mean L1 distance over out-of-mask pixels,
reported in 1e-3 units (lower is better). Temporal consistency (TC): mean
cosine similarity of consecutive frames' pooled grayscale features, times
100 (higher is better).

The scaling benchmark times the frame-interaction workload of a denoising
step: the temporal self-attention module, whose cost is quadratic in the
frames it jointly attends over. Direct mode runs it once over all N' frames
(its positional table widened to N' for timing only); windowed mode runs
the reference-segment cache pass plus one pass per planned segment, then
aggregates, which is the windowed pipeline's per-step schedule. Per-frame
2D work is identical across modes and excluded from the timed region, so
the fitted exponents isolate the scaling behaviour the two modes differ in.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from statistics import median

import numpy as np

from .conditioning import MaskSequence, VideoTensor
from .denoiser import GUIDED_STRATEGIES, temporal_attention
from .errors import UndefinedMetricError
from .sampler import aggregate, plan_segments
from .tensor import Tensor


@dataclass
class MetricReport:
    bp: float | None
    tc: float | None
    runtime_ms: float
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def background_preservation(edited, source, masks) -> float:
    """Mean |edited - source| over out-of-mask pixels, scaled by 1e3."""
    e = edited.data if isinstance(edited, VideoTensor) else np.asarray(edited)
    s = source.data if isinstance(source, VideoTensor) else np.asarray(source)
    m = masks.data if isinstance(masks, MaskSequence) else np.asarray(masks)
    if e.shape != s.shape:
        raise ValueError(f"shape mismatch {e.shape} vs {s.shape}")
    keep = np.broadcast_to(m <= 0.5, e.shape)
    count = int(keep.sum())
    if count == 0:
        raise UndefinedMetricError("no out-of-mask pixels: BP is undefined")
    total = np.abs(e[keep].astype(np.float64) - s[keep].astype(np.float64)).sum()
    return float(total / count * 1e3)


def frame_features(video, buckets: int = 8) -> np.ndarray:
    """Per-frame feature vectors: grayscale averaged over a buckets x buckets
    grid (block sizes adapt to non-divisible extents)."""
    v = video.data if isinstance(video, VideoTensor) else np.asarray(video)
    gray = v.mean(axis=1)
    rows = [np.stack([c.mean(axis=(1, 2)) for c in np.array_split(r, buckets, axis=2)], axis=1)
            for r in np.array_split(gray, buckets, axis=1)]
    # rows: buckets entries of (N, buckets) -> (N, buckets*buckets)
    return np.stack(rows, axis=1).reshape(gray.shape[0], buckets * buckets)


def temporal_consistency(video) -> float:
    """Mean consecutive-frame cosine similarity of pooled features, x100."""
    feats = frame_features(video).astype(np.float64)
    n = feats.shape[0]
    if n < 2:
        raise ValueError("temporal consistency needs at least 2 frames")
    norms = np.linalg.norm(feats, axis=1)
    if (norms == 0).any():
        raise UndefinedMetricError("zero-norm frame feature vector")
    cos = (feats[:-1] * feats[1:]).sum(axis=1) / (norms[:-1] * norms[1:])
    return float(cos.mean() * 100.0)


# -- scaling benchmark -------------------------------------------------------


@dataclass(frozen=True)
class BenchProbe:
    """Shape of the timed temporal-attention site."""
    channels: int = 8
    height: int = 64
    width: int = 32
    seed: int = 0


@dataclass
class ScalingReport:
    n_primes: list[int]
    window: int
    stride: int
    strategy: str
    workers: int
    reps: int
    probe: dict
    direct_ms: list[float]
    windowed_ms: list[float]
    direct_exponent: float
    windowed_exponent: float
    model_direct: list[int]      # N'^2 relative cost units
    model_windowed: list[int]    # n * N^2 relative cost units
    plan_n: list[int]

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_rows(self) -> list[str]:
        rows = ["n_prime,mode,median_ms,workers"]
        for np_, ms in zip(self.n_primes, self.direct_ms):
            rows.append(f"{np_},direct,{ms:.3f},{self.workers}")
        for np_, ms in zip(self.n_primes, self.windowed_ms):
            rows.append(f"{np_},windowed,{ms:.3f},{self.workers}")
        return rows


def _probe_params(probe: BenchProbe) -> dict[str, Tensor]:
    rng = np.random.default_rng(probe.seed)
    c = probe.channels
    scale = 1.0 / np.sqrt(c)
    p = {
        "probe.tattn.norm.g": np.ones(c, np.float32),
        "probe.tattn.norm.b": np.zeros(c, np.float32),
        "probe.tattn.wq": (rng.standard_normal((c, c)) * scale).astype(np.float32),
        "probe.tattn.wk": (rng.standard_normal((c, c)) * scale).astype(np.float32),
        "probe.tattn.wv": (rng.standard_normal((c, c)) * scale).astype(np.float32),
        "probe.tattn.wo.w": (rng.standard_normal((c, c)) * scale).astype(np.float32),
        "probe.tattn.wo.b": np.zeros(c, np.float32),
    }
    return {k: Tensor(v) for k, v in p.items()}


def _fit_exponent(n_primes, timings) -> float:
    return float(np.polyfit(np.log(np.asarray(n_primes, float)),
                            np.log(np.asarray(timings, float)), 1)[0])


def complexity_benchmark(n_prime_list: list[int], window: int = 16, stride: int = 4,
                         probe: BenchProbe = BenchProbe(), reps: int = 5,
                         workers: int = 1, strategy: str = "mf") -> ScalingReport:
    """Median per-step wall clock of direct vs windowed frame attention.

    Direct: one temporal-attention pass over all N' frames. Windowed: the
    cache pass (for guided strategies) plus one pass per segment, then the
    coverage-weighted aggregation.
    """
    if len(n_prime_list) < 3:
        raise ValueError("need at least 3 N' points to fit exponents")
    for n_prime in n_prime_list:
        if n_prime < window:
            raise ValueError(f"N'={n_prime} smaller than window={window}")
    params = _probe_params(probe)
    rng = np.random.default_rng(probe.seed + 1)
    c, h, w = probe.channels, probe.height, probe.width
    max_np = max(n_prime_list)
    direct_ms, windowed_ms, model_windowed, plan_ns = [], [], [], []

    for n_prime in n_prime_list:
        x_full = rng.standard_normal((n_prime, c, h, w)).astype(np.float32)
        x_seg = np.ascontiguousarray(x_full[:window])
        plan = plan_segments(n_prime, window, stride)
        plan_ns.append(plan.n)
        model_windowed.append(plan.n * window * window)
        passes = plan.n + (1 if strategy in GUIDED_STRATEGIES else 0)

        def run_direct():
            # positional table widened to the full clip, for timing only
            temporal_attention(params, "probe", Tensor(x_full), max_len=max_np)

        def one_segment(_i):
            return temporal_attention(params, "probe", Tensor(x_seg), max_len=window).data

        def run_windowed():
            if strategy in GUIDED_STRATEGIES:
                one_segment(-1)                      # reference-segment cache pass
            if workers > 1 and plan.n > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    clips = list(pool.map(one_segment, range(plan.n)))
            else:
                clips = [one_segment(i) for i in range(plan.n)]
            aggregate(clips, plan)

        run_direct()                                 # warm up allocations/caches
        run_windowed()
        d_times, w_times = [], []
        for _ in range(reps):
            t0 = time.perf_counter()
            run_direct()
            d_times.append((time.perf_counter() - t0) * 1e3)
            t0 = time.perf_counter()
            run_windowed()
            w_times.append((time.perf_counter() - t0) * 1e3)
        direct_ms.append(median(d_times))
        windowed_ms.append(median(w_times))

    return ScalingReport(
        n_primes=list(n_prime_list), window=window, stride=stride, strategy=strategy,
        workers=workers, reps=reps,
        probe={"channels": c, "height": h, "width": w, "seed": probe.seed},
        direct_ms=direct_ms, windowed_ms=windowed_ms,
        direct_exponent=_fit_exponent(n_prime_list, direct_ms),
        windowed_exponent=_fit_exponent(n_prime_list, windowed_ms),
        model_direct=[n * n for n in n_prime_list],
        model_windowed=model_windowed, plan_n=plan_ns)
