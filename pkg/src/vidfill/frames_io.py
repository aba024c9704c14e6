"""Frame-directory I/O.

Videos are directories of frame_00000.png ... frame_{N-1:05d}.png (8-bit
RGB; PPM accepted as a fallback), masks are the same layout in
single-channel 0/255. Pixel values map to [-1, 1] via v = 2*(u/255) - 1
and back with round-half-up, so a read/write round trip is byte-exact.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

from .conditioning import MaskSequence, VideoTensor
from .errors import InputError

_FRAME_RE = re.compile(r"^frame_(\d{5})\.(png|ppm)$")


def _list_frames(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"{d}: not a directory")
    found = {}
    ext = None
    for f in sorted(d.iterdir()):
        m = _FRAME_RE.match(f.name)
        if not m:
            continue
        ext = ext or m.group(2)
        found[int(m.group(1))] = f
    if not found:
        raise InputError(f"{d}: no frame_XXXXX.png/.ppm files")
    count = max(found) + 1
    for i in range(count):
        if i not in found:
            raise InputError(f"{d}: missing frame_{i:05d}.{ext}")
    return [found[i] for i in range(count)]


def to_unit_float(u8: np.ndarray) -> np.ndarray:
    return (np.float32(2.0) * (u8.astype(np.float32) / np.float32(255.0))
            - np.float32(1.0))


def to_uint8(v: np.ndarray) -> np.ndarray:
    # round half up, matching the documented write convention
    scaled = (v + np.float32(1.0)) / np.float32(2.0) * np.float32(255.0)
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def read_video_dir(directory) -> VideoTensor:
    files = _list_frames(directory)
    frames = []
    shape = None
    for f in files:
        img = Image.open(f).convert("RGB")
        arr = np.asarray(img, dtype=np.uint8)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise InputError(f"{f}: size {arr.shape[:2]} differs from {shape[:2]}")
        frames.append(to_unit_float(arr).transpose(2, 0, 1))
    return VideoTensor(np.stack(frames))


def read_mask_dir(directory) -> MaskSequence:
    files = _list_frames(directory)
    frames = []
    shape = None
    for f in files:
        img = Image.open(f).convert("L")
        arr = np.asarray(img, dtype=np.uint8)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise InputError(f"{f}: size {arr.shape} differs from {shape}")
        bad = ~np.isin(arr, (0, 255))
        if bad.any():
            y, x = np.argwhere(bad)[0]
            raise InputError(f"{f}: non-binary mask value {arr[y, x]} at ({y}, {x})")
        frames.append((arr == 255).astype(np.float32)[None])
    return MaskSequence(np.stack(frames))


def write_video_frames(directory, video) -> None:
    v = video.data if isinstance(video, VideoTensor) else np.asarray(video)
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i in range(v.shape[0]):
        u8 = to_uint8(v[i]).transpose(1, 2, 0)
        Image.fromarray(u8, "RGB").save(d / f"frame_{i:05d}.png")


def write_mask_frames(directory, masks) -> None:
    m = masks.data if isinstance(masks, MaskSequence) else np.asarray(masks)
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i in range(m.shape[0]):
        u8 = (m[i, 0] > 0.5).astype(np.uint8) * 255
        Image.fromarray(u8, "L").save(d / f"frame_{i:05d}.png")


def write_gray_frames(directory, maps) -> None:
    """Export [0, 1] single-channel maps (e.g. structure maps) as grayscale."""
    arr = np.asarray(maps.data if hasattr(maps, "data") else maps)
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i in range(arr.shape[0]):
        u8 = np.clip(np.floor(arr[i, 0] * 255.0 + 0.5), 0, 255).astype(np.uint8)
        Image.fromarray(u8, "L").save(d / f"frame_{i:05d}.png")
