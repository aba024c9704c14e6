"""Conditional inputs for the denoiser: masked video, mask sequence and a
deterministic hash-based text embedding.

The text embedder maps each whitespace token to a fixed pseudo-random
unit-variance Gaussian vector seeded from a stable digest of the token, so
the same prompt produces the same embedding across runs and platforms.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

TEXT_DIM = 32
TEXT_LEN = 8
_EMBED_SALT = 0x5EED_CAFE


@dataclass
class VideoTensor:
    """An (N, 3, H, W) float32 clip with values in [-1, 1]."""
    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.ndim != 4 or d.shape[1] != 3:
            raise ValueError(f"video must be (N, 3, H, W), got {d.shape}")
        if d.shape[0] < 1:
            raise ValueError("video needs at least one frame")
        if d.dtype != np.float32:
            raise ValueError("video data must be float32")
        lo, hi = float(d.min()), float(d.max())
        if lo < -1.0 - 1e-6 or hi > 1.0 + 1e-6:
            raise ValueError(f"video values outside [-1, 1]: [{lo}, {hi}]")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]


@dataclass
class MaskSequence:
    """An (N, 1, H, W) float32 binary mask sequence; 1 marks the editable region."""
    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.ndim != 4 or d.shape[1] != 1:
            raise ValueError(f"masks must be (N, 1, H, W), got {d.shape}")
        if d.dtype != np.float32:
            raise ValueError("mask data must be float32")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    def is_binary(self) -> bool:
        return bool(np.isin(self.data, (0.0, 1.0)).all())

    def inverted(self) -> "MaskSequence":
        return MaskSequence(np.float32(1.0) - self.data)


@dataclass
class ConditionSet:
    """c = (masked video, masks, text embedding) plus the null-branch flag."""
    masked_video: np.ndarray      # (N, 3, H, W), source zeroed inside the mask
    masks: np.ndarray             # (N, 1, H, W)
    text_embedding: np.ndarray    # (TEXT_LEN, TEXT_DIM)
    is_null: bool = False

    def slice_frames(self, start: int, stop: int) -> "ConditionSet":
        return ConditionSet(self.masked_video[start:stop], self.masks[start:stop],
                            self.text_embedding, self.is_null)

    @property
    def frames(self) -> int:
        return self.masked_video.shape[0]


def _token_vector(token: str) -> np.ndarray:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little") ^ _EMBED_SALT
    rng = np.random.default_rng(seed)
    return rng.standard_normal(TEXT_DIM).astype(np.float32)


def embed_text(prompt: str) -> np.ndarray:
    """Deterministic (TEXT_LEN, TEXT_DIM) embedding: lowercase, whitespace
    tokens, one hash-seeded Gaussian row per token, zero rows past the end."""
    out = np.zeros((TEXT_LEN, TEXT_DIM), dtype=np.float32)
    for row, token in enumerate(prompt.lower().split()[:TEXT_LEN]):
        out[row] = _token_vector(token)
    return out


def make_condition(video: VideoTensor, masks: MaskSequence, prompt: str = "",
                   null_condition: bool = False) -> ConditionSet:
    """Build c = (v ⊙ (1 - m), m, embedding); the null branch zeroes the text."""
    if masks.data.shape[0] != video.data.shape[0]:
        raise ValueError(f"frame count mismatch: {masks.data.shape[0]} masks vs "
                         f"{video.data.shape[0]} frames")
    if masks.data.shape[2:] != video.data.shape[2:]:
        raise ValueError(f"spatial mismatch: {masks.data.shape[2:]} vs {video.data.shape[2:]}")
    if not masks.is_binary():
        raise ValueError("mask sequence is not binary")
    masked = video.data * (np.float32(1.0) - masks.data)
    text = np.zeros((TEXT_LEN, TEXT_DIM), dtype=np.float32) if null_condition else embed_text(prompt)
    return ConditionSet(masked_video=masked, masks=masks.data.copy(),
                        text_embedding=text, is_null=null_condition)


@dataclass
class MaskViolation:
    kind: str                 # "frame_count" | "shape" | "non_binary"
    message: str
    frame: int | None = None
    coords: tuple | None = None


@dataclass
class MaskReport:
    violations: list[MaskViolation] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_mask_sequence(masks: MaskSequence, video: VideoTensor) -> MaskReport:
    """Check an ingested mask sequence against its video.

    All-zero frames are legal (reported as a warning only): the model is
    expected to tolerate masks that over- or under-shoot the target region.
    """
    report = MaskReport()
    if masks.frames != video.frames:
        report.violations.append(MaskViolation(
            "frame_count", f"{masks.frames} mask frames vs {video.frames} video frames"))
    if masks.data.shape[2:] != video.data.shape[2:]:
        report.violations.append(MaskViolation(
            "shape", f"mask spatial size {masks.data.shape[2:]} vs video {video.data.shape[2:]}"))
    bad = ~np.isin(masks.data, (0.0, 1.0))
    if bad.any():
        first = tuple(int(i) for i in np.argwhere(bad)[0])
        report.violations.append(MaskViolation(
            "non_binary", f"non-binary value {masks.data[first]} at {first}",
            frame=first[0], coords=first))
    for i in range(masks.frames):
        if not masks.data[i].any():
            report.warnings.append(f"mask frame {i} is empty (all zeros)")
    return report
