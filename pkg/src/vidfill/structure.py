"""Structure extraction and the control branch.

The structure signal is a per-frame edge map: Sobel gradient magnitude on
grayscale, normalized by the frame's own maximum, restricted to the mask.
The control branch is a parameter copy of the denoiser encoder (motion
modules included) that consumes the same conditioned input plus the edge
map through a zero-initialized hint projection, and emits 13 feature maps
through zero-initialized 1x1 projections, one per injection slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditioning import ConditionSet, MaskSequence, VideoTensor
from .denoiser import DenoiserConfig, _encode, _time_embedding
from .tensor import Tensor, conv2d


@dataclass
class StructureMap:
    """(N, 1, H, W) float32 edge strengths in [0, 1]."""
    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.ndim != 4 or d.shape[1] != 1:
            raise ValueError(f"structure map must be (N, 1, H, W), got {d.shape}")
        if float(d.min()) < 0.0 or float(d.max()) > 1.0:
            raise ValueError("structure map values outside [0, 1]")


@dataclass
class StructureFeatures:
    """Ordered 13-slot additive features: 12 skip slots then the middle slot."""
    maps: list

    def __post_init__(self):
        if len(self.maps) != 13:
            raise ValueError(f"expected 13 feature maps, got {len(self.maps)}")
        spatial = {tuple(np.shape(m)[-2:]) for m in self.maps}
        if len(spatial) != 4:
            raise ValueError(f"feature maps span {len(spatial)} resolutions, expected 4")


def _sobel(gray: np.ndarray) -> np.ndarray:
    """Gradient magnitude of (N, H, W) with edge-replicated borders."""
    p = np.pad(gray, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = (p[:, :-2, 2:] + 2.0 * p[:, 1:-1, 2:] + p[:, 2:, 2:]
          - p[:, :-2, :-2] - 2.0 * p[:, 1:-1, :-2] - p[:, 2:, :-2])
    gy = (p[:, 2:, :-2] + 2.0 * p[:, 2:, 1:-1] + p[:, 2:, 2:]
          - p[:, :-2, :-2] - 2.0 * p[:, :-2, 1:-1] - p[:, :-2, 2:])
    return np.sqrt(gx * gx + gy * gy)


def extract_structure(video: VideoTensor, masks: MaskSequence) -> StructureMap:
    """Per-frame Sobel magnitude on grayscale, max-normalized, masked."""
    if masks.data.shape[0] != video.data.shape[0]:
        raise ValueError(f"frame count mismatch: {masks.data.shape[0]} vs {video.data.shape[0]}")
    if masks.data.shape[2:] != video.data.shape[2:]:
        raise ValueError(f"spatial mismatch: {masks.data.shape[2:]} vs {video.data.shape[2:]}")
    gray = video.data.mean(axis=1)
    mag = _sobel(gray)
    peak = mag.max(axis=(1, 2), keepdims=True)
    normed = np.divide(mag, peak, out=np.zeros_like(mag), where=peak > 0)
    return StructureMap((normed[:, None] * masks.data).astype(np.float32))


def scale_features(features: StructureFeatures, omega_s: float) -> StructureFeatures:
    """Multiply every slot by the structural-fidelity scale."""
    if omega_s < 0:
        raise ValueError(f"omega_s must be >= 0, got {omega_s}")
    return StructureFeatures([m * np.float32(omega_s) for m in features.maps])


def init_control_weights(config: DenoiserConfig, params: dict[str, Tensor],
                         seed: int = 0) -> None:
    """Add the control branch to `params` in place.

    Encoder-layout tensors are value copies of the current backbone/motion
    encoder; the hint projection and the 13 output projections start at zero
    so a fresh branch contributes nothing.
    """
    copies = {}
    for name, t in params.items():
        for src_prefix in ("backbone.time.", "backbone.conv_in.",
                           "backbone.enc.", "backbone.mid.",
                           "motion.enc.", "motion.mid."):
            if name.startswith(src_prefix):
                short = name.split(".", 1)[1]
                copies[f"control.{short}"] = Tensor(t.data.copy(), name=f"control.{short}")
    params.update(copies)
    w0 = config.base_width
    params["control.hint.w"] = Tensor(np.zeros((w0, 1, 3, 3), np.float32), name="control.hint.w")
    params["control.hint.b"] = Tensor(np.zeros(w0, np.float32), name="control.hint.b")
    for i, c in enumerate(config.skip_channels() + [config.level_widths[-1]]):
        params[f"control.proj.{i}.w"] = Tensor(np.zeros((c, c, 1, 1), np.float32),
                                               name=f"control.proj.{i}.w")
        params[f"control.proj.{i}.b"] = Tensor(np.zeros(c, np.float32),
                                               name=f"control.proj.{i}.b")


def has_control_branch(params: dict[str, Tensor]) -> bool:
    return "control.hint.w" in params


def control_forward(params: dict[str, Tensor], config: DenoiserConfig, vt, t: int,
                    cond: ConditionSet, structure: StructureMap) -> StructureFeatures:
    """Run the control branch and return its 13 additive feature maps."""
    vt_arr = vt.data if isinstance(vt, Tensor) else np.asarray(vt, np.float32)
    n = vt_arr.shape[0]
    if n > config.temporal_max_len:
        raise ValueError(f"{n} frames exceed temporal_max_len={config.temporal_max_len}")
    if structure.data.shape[0] != n:
        raise ValueError(f"structure has {structure.data.shape[0]} frames, latent has {n}")

    x = Tensor(np.concatenate([vt_arr, cond.masked_video, cond.masks], axis=1))
    h = conv2d(x, params["control.conv_in.w"], params["control.conv_in.b"], stride=1, pad=1)
    hint = conv2d(Tensor(structure.data), params["control.hint.w"],
                  params["control.hint.b"], stride=1, pad=1)
    h = h + hint

    # control-branch time MLP mirrors the backbone's
    from .tensor import silu, sinusoidal_encoding
    base = Tensor(sinusoidal_encoding(t, config.time_embed_dim, max_len=100_000))
    temb = silu(base.reshape(1, -1) @ params["control.time.fc1.w"] + params["control.time.fc1.b"])
    temb = (temb @ params["control.time.fc2.w"] + params["control.time.fc2.b"]).reshape(-1)

    skips, middle = _encode(params, config, h, temb, cond.text_embedding,
                            None, None, prefix="control.")
    slots = skips + [middle]
    maps = [conv2d(s, params[f"control.proj.{i}.w"], params[f"control.proj.{i}.b"],
                   stride=1, pad=0) for i, s in enumerate(slots)]
    return StructureFeatures(maps)
