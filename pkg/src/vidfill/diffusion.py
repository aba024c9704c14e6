"""Noise schedule, forward diffusion, reverse steps and compositing.

All operations here are pure numpy over float32 video arrays; stochastic
steps take their noise tensor explicitly so randomness stays with the
caller. Schedule tables are kept in float64 so cumulative products hold
their defining identities to ~1e-16.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance rates of the forward process and their products."""
    T: int
    beta: np.ndarray        # (T,) float64, noise rate per step
    alpha: np.ndarray       # 1 - beta
    alpha_bar: np.ndarray   # cumulative product of alpha

    def sqrt_alpha_bar(self, t: int) -> float:
        return float(np.sqrt(self.alpha_bar[t]))

    def sqrt_one_minus_alpha_bar(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar[t]))


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-process settings: sampler family, step count, stochasticity.

    The classifier-free guidance scale lives with the other guidance knobs
    in the sampler module's GuidanceConfig.
    """
    kind: str = "ddim"              # "ddim" | "ddpm"
    inference_steps: int = 10
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")

    def timesteps(self, T: int) -> list[int]:
        """Uniformly spaced timestep subsequence, descending."""
        if self.inference_steps < 1 or self.inference_steps > T:
            raise ValueError(f"inference_steps {self.inference_steps} outside [1, {T}]")
        if T % self.inference_steps:
            raise ValueError(f"inference_steps {self.inference_steps} must divide T={T} evenly")
        stride = T // self.inference_steps
        return list(range(T - stride, -1, -stride))


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from beta_start to beta_end over T steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _check_t(t: int, sched: NoiseSchedule):
    if not 0 <= t < sched.T:
        raise ValueError(f"timestep {t} outside [0, {sched.T})")


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward-diffuse x0 to step t: sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    _check_t(t, sched)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {eps.shape}")
    a = np.float32(sched.sqrt_alpha_bar(t))
    b = np.float32(sched.sqrt_one_minus_alpha_bar(t))
    return a * x0 + b * eps


def ddpm_step(xt: np.ndarray, eps_pred: np.ndarray, t: int, sched: NoiseSchedule,
              noise: np.ndarray | None = None) -> np.ndarray:
    """One ancestral reverse step.

    Mean term: (xt - (1-alpha_t)/sqrt(1-abar_t) * eps) / sqrt(alpha_t);
    sigma_t = sqrt(beta_t) scales the added noise, suppressed at t = 0.
    """
    _check_t(t, sched)
    if xt.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch {xt.shape} vs {eps_pred.shape}")
    alpha_t = sched.alpha[t]
    one_minus_abar = 1.0 - sched.alpha_bar[t]
    # alpha_t = 1 means no noise was added at t; the step is the identity
    coef = np.float32(0.0 if one_minus_abar == 0.0
                      else (1.0 - alpha_t) / np.sqrt(one_minus_abar))
    mean = np.float32(1.0 / np.sqrt(alpha_t)) * (xt - coef * eps_pred)
    if t == 0 or noise is None:
        return mean
    return mean + np.float32(np.sqrt(sched.beta[t])) * noise


def ddim_step(xt: np.ndarray, eps_pred: np.ndarray, t: int, t_prev: int,
              sched: NoiseSchedule, eta: float = 0.0,
              noise: np.ndarray | None = None) -> np.ndarray:
    """One DDIM step from t to t_prev (t_prev = -1 denotes the clean sample)."""
    _check_t(t, sched)
    if t_prev >= t:
        raise ValueError(f"t_prev {t_prev} must be < t {t}")
    abar_t = sched.alpha_bar[t]
    abar_prev = 1.0 if t_prev < 0 else sched.alpha_bar[t_prev]
    x0_hat = (xt - np.float32(np.sqrt(1.0 - abar_t)) * eps_pred) * np.float32(1.0 / np.sqrt(abar_t))
    sigma = eta * np.sqrt((1.0 - abar_prev) / (1.0 - abar_t)) * np.sqrt(1.0 - abar_t / abar_prev)
    out = np.float32(np.sqrt(abar_prev)) * x0_hat \
        + np.float32(np.sqrt(max(1.0 - abar_prev - sigma ** 2, 0.0))) * eps_pred
    if sigma > 0.0 and noise is not None:
        out = out + np.float32(sigma) * noise
    return out


def predicted_x0(xt: np.ndarray, eps_pred: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Invert q_sample given the noise estimate."""
    _check_t(t, sched)
    abar_t = sched.alpha_bar[t]
    return (xt - np.float32(np.sqrt(1.0 - abar_t)) * eps_pred) * np.float32(1.0 / np.sqrt(abar_t))


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance: uncond + scale * (cond - uncond)."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"shape mismatch {eps_uncond.shape} vs {eps_cond.shape}")
    return eps_uncond + np.float32(scale) * (eps_cond - eps_uncond)


def composite_final(generated: np.ndarray, source: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Keep source pixels bit-exact outside the mask, generated inside.

    generated/source: (N, 3, H, W); masks: (N, 1, H, W) binary.
    """
    if generated.shape != source.shape:
        raise ValueError(f"shape mismatch {generated.shape} vs {source.shape}")
    if masks.shape[0] != source.shape[0]:
        raise ValueError(f"frame count mismatch {masks.shape[0]} vs {source.shape[0]}")
    if masks.shape[2:] != source.shape[2:]:
        raise ValueError(f"spatial mismatch {masks.shape[2:]} vs {source.shape[2:]}")
    return np.where(masks > 0.5, generated, source)
