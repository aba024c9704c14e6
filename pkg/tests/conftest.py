import numpy as np
import pytest

from vidfill.conditioning import MaskSequence, VideoTensor
from vidfill.denoiser import DenoiserConfig, init_denoiser_weights


def finite_difference(f, x, h=1e-3):
    """Central-difference gradient of scalar f at x, the independent oracle
    every reverse-mode check is compared against."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g.astype(np.float32)


def rel_err(got, want):
    scale = max(np.max(np.abs(want)), 1e-6)
    return float(np.max(np.abs(got - want)) / scale)


@pytest.fixture(scope="session")
def micro_config():
    """Smallest legal architecture: 8x8 frames, width-4 levels."""
    return DenoiserConfig(level_widths=(4, 8, 12, 16), norm_groups=4, image_size=8,
                          spatial_attention_resolutions=(4, 2, 1))


@pytest.fixture(scope="session")
def micro_params(micro_config):
    return init_denoiser_weights(micro_config, seed=1)


@pytest.fixture(scope="session")
def tiny_config():
    """Desk-scale config used by sampling/training tests: 32x32, narrow."""
    return DenoiserConfig(level_widths=(8, 12, 16, 20), norm_groups=4)


@pytest.fixture(scope="session")
def tiny_params(tiny_config):
    return init_denoiser_weights(tiny_config, seed=3)


def small_video(rng, frames=4, size=8):
    return VideoTensor(rng.uniform(-1, 1, (frames, 3, size, size)).astype(np.float32))


def box_masks(frames, size, lo, hi):
    m = np.zeros((frames, 1, size, size), np.float32)
    m[:, :, lo:hi, lo:hi] = 1.0
    return MaskSequence(m)
