"""Silhouette/depth frame preparation: masking, disparity normalization, crop and alignment.

Frames are numpy arrays. Silhouettes are uint8 with values {0, 255}; raw depth
is any non-negative array. Aligned outputs are 64 x ``final_width``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, EmptyForeground, EmptySequence

log = logging.getLogger(__name__)

TARGET_HEIGHT = 64
WINDOW_WIDTH = 64
FINAL_WIDTH = 44
DEPTH_FLOOR = 1e-6


@dataclass
class AlignedPair:
    silhouette: np.ndarray  # uint8 {0, 255}, 64 x final_width
    depth: np.ndarray  # float64 in [0, 1], same shape
    center_axis: int


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ConfigError(f"frame size mismatch: {a.shape} vs {b.shape}")


def mask_depth(depth: np.ndarray, silhouette: np.ndarray) -> np.ndarray:
    _check_same_shape(depth, silhouette)
    return np.where(silhouette > 0, depth, 0).astype(depth.dtype, copy=False)


def normalize_disparity(depth: np.ndarray, mask: np.ndarray,
                        q_range: tuple[float, float] | None = None) -> np.ndarray:
    """Min-max normalized disparity (1/d) over the foreground of ``mask``.

    ``q_range`` overrides the per-frame (q_min, q_max), which is how
    sequence-scope normalization is done. A flat disparity range maps the whole
    foreground to 0.
    """
    _check_same_shape(depth, mask)
    fg = mask > 0
    if not fg.any():
        raise EmptyForeground("no foreground pixels to normalize")
    q = 1.0 / np.maximum(depth[fg].astype(np.float64), DEPTH_FLOOR)
    q_min, q_max = (q.min(), q.max()) if q_range is None else q_range
    out = np.zeros(depth.shape, dtype=np.float64)
    if q_max > q_min:
        out[fg] = np.clip((q - q_min) / (q_max - q_min), 0.0, 1.0)
    return out


def disparity_range(depth: np.ndarray, mask: np.ndarray) -> tuple[float, float] | None:
    fg = mask > 0
    if not fg.any():
        return None
    q = 1.0 / np.maximum(depth[fg].astype(np.float64), DEPTH_FLOOR)
    return float(q.min()), float(q.max())


def vertical_center_axis(silhouette: np.ndarray) -> int:
    """Smallest column where the left-to-right white-pixel count exceeds half the total."""
    counts = (silhouette > 0).sum(axis=0)
    total = int(counts.sum())
    if total == 0:
        raise EmptyForeground("silhouette has no white pixels")
    cumulative = np.cumsum(counts)
    return int(np.argmax(cumulative * 2 > total))


def _nearest_index(out_size: int, in_size: int) -> np.ndarray:
    centers = (np.arange(out_size) + 0.5) * (in_size / out_size)
    return np.minimum(np.floor(centers).astype(np.int64), in_size - 1)


def _bilinear_taps(out_size: int, in_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, src - lo


def resize_nearest(img: np.ndarray, height: int, width: int) -> np.ndarray:
    rows = _nearest_index(height, img.shape[0])
    cols = _nearest_index(width, img.shape[1])
    return img[rows[:, None], cols[None, :]]


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    r0, r1, rt = _bilinear_taps(height, img.shape[0])
    c0, c1, ct = _bilinear_taps(width, img.shape[1])
    img = img.astype(np.float64)
    top = img[r0][:, c0] * (1 - ct) + img[r0][:, c1] * ct
    bottom = img[r1][:, c0] * (1 - ct) + img[r1][:, c1] * ct
    return top * (1 - rt)[:, None] + bottom * rt[:, None]


def scaled_width(height: int, width: int, target_height: int = TARGET_HEIGHT) -> int:
    return max(1, int(np.floor(width * target_height / height + 0.5)))


def crop_align(silhouette: np.ndarray, depth: np.ndarray,
               final_width: int = FINAL_WIDTH) -> AlignedPair:
    """Crop to the figure's vertical extent, scale to height 64, center and trim.

    The depth frame is resampled with the geometry of the silhouette. Its
    bilinear interpolation only averages foreground samples and is re-masked by
    the resampled silhouette, so background never bleeds into the figure.
    """
    _check_same_shape(silhouette, depth)
    if final_width > WINDOW_WIDTH or (WINDOW_WIDTH - final_width) % 2:
        raise ConfigError(f"final_width must be even-trimmable from {WINDOW_WIDTH}")
    fg = silhouette > 0
    rows = np.flatnonzero(fg.any(axis=1))
    if rows.size == 0:
        raise EmptyForeground("silhouette has no white pixels")
    top, bottom = rows[0], rows[-1] + 1
    sil = fg[top:bottom].astype(np.float64)
    dep = np.where(fg, depth, 0.0)[top:bottom].astype(np.float64)

    new_w = scaled_width(sil.shape[0], sil.shape[1])
    sil_s = resize_nearest(sil, TARGET_HEIGHT, new_w) >= 0.5
    num = resize_bilinear(dep * sil, TARGET_HEIGHT, new_w)
    den = resize_bilinear(sil, TARGET_HEIGHT, new_w)
    dep_s = np.zeros_like(num)
    dep_s[sil_s] = num[sil_s] / den[sil_s]

    axis = vertical_center_axis(sil_s)
    left = axis - WINDOW_WIDTH // 2
    sil_w = np.zeros((TARGET_HEIGHT, WINDOW_WIDTH), dtype=bool)
    dep_w = np.zeros((TARGET_HEIGHT, WINDOW_WIDTH), dtype=np.float64)
    src_lo, src_hi = max(left, 0), min(left + WINDOW_WIDTH, new_w)
    if src_hi > src_lo:
        sil_w[:, src_lo - left:src_hi - left] = sil_s[:, src_lo:src_hi]
        dep_w[:, src_lo - left:src_hi - left] = dep_s[:, src_lo:src_hi]

    trim = (WINDOW_WIDTH - final_width) // 2
    sil_out = sil_w[:, trim:WINDOW_WIDTH - trim]
    dep_out = dep_w[:, trim:WINDOW_WIDTH - trim]
    return AlignedPair(silhouette=sil_out.astype(np.uint8) * 255, depth=dep_out, center_axis=axis)


def preprocess_frame(silhouette: np.ndarray, depth: np.ndarray, final_width: int = FINAL_WIDTH,
                     q_range: tuple[float, float] | None = None) -> AlignedPair:
    masked = mask_depth(depth, silhouette)
    disparity = normalize_disparity(masked, silhouette, q_range)
    return crop_align(silhouette, disparity, final_width)


def preprocess_sequence(frames: Sequence[tuple[np.ndarray, np.ndarray]],
                        final_width: int = FINAL_WIDTH,
                        normalization_scope: str = "frame") -> tuple[list[AlignedPair], int]:
    """Align every frame; empty-foreground frames are dropped and counted.

    Returns ``(pairs, dropped)``.
    """
    if normalization_scope not in ("frame", "sequence"):
        raise ConfigError(f"normalization_scope must be 'frame' or 'sequence'")
    q_range = None
    if normalization_scope == "sequence":
        ranges = [r for r in (disparity_range(mask_depth(d, s), s) for s, d in frames) if r]
        if ranges:
            q_range = (min(r[0] for r in ranges), max(r[1] for r in ranges))
    pairs, dropped = [], 0
    for sil, dep in frames:
        try:
            pairs.append(preprocess_frame(sil, dep, final_width, q_range))
        except EmptyForeground:
            dropped += 1
    if dropped:
        log.warning("dropped %d empty-foreground frame(s) of %d", dropped, len(frames))
    if not pairs:
        raise EmptySequence(f"all {len(frames)} frames were dropped")
    return pairs, dropped


# -- PNG I/O ---------------------------------------------------------------

def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def read_silhouette(path: Path) -> np.ndarray:
    arr = read_png(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return np.where(arr > 127, 255, 0).astype(np.uint8)


def write_silhouette(path: Path, sil: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(sil > 0, 255, 0).astype(np.uint8)).save(path)


def write_depth(path: Path, depth: np.ndarray) -> None:
    """Write a [0, 1] depth frame as a 16-bit PNG scaled by 65535."""
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = np.round(np.clip(depth, 0.0, 1.0) * 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def read_depth(path: Path) -> np.ndarray:
    """Read a 16-bit aligned depth PNG back into [0, 1]."""
    arr = read_png(path)
    scale = 255.0 if arr.dtype == np.uint8 else 65535.0
    return arr.astype(np.float64) / scale


def preprocess_tree(src: Path, dst: Path, final_width: int = FINAL_WIDTH,
                    normalization_scope: str = "frame") -> dict[str, int]:
    """Preprocess every sequence of a ``sils/`` + ``depth/`` dataset tree into ``dst``."""
    from .data import DEPTH_DIR, SIL_DIR, frame_names, scan_dataset

    index = scan_dataset(src)
    stats = {"sequences": 0, "frames": 0, "dropped": 0, "empty_sequences": 0}
    for entry in index.entries:
        names = frame_names(src / SIL_DIR / entry.relpath)
        frames = [(read_silhouette(src / SIL_DIR / entry.relpath / n),
                   read_png(src / DEPTH_DIR / entry.relpath / n).astype(np.float64))
                  for n in names]
        kept = []
        for n, (sil, dep) in zip(names, frames):
            if sil.shape != dep.shape:
                log.warning("size mismatch in %s/%s; frame dropped", entry.relpath, n)
            elif (sil > 0).any():
                kept.append((n, (sil, dep)))
                continue
            stats["dropped"] += 1
        if not kept:
            stats["empty_sequences"] += 1
            log.warning("sequence %s has no usable frames; skipped", entry.relpath)
            continue
        pairs, dropped = preprocess_sequence([fr for _, fr in kept], final_width,
                                             normalization_scope)
        stats["dropped"] += dropped
        for (n, _), pair in zip(kept, pairs):
            write_silhouette(dst / SIL_DIR / entry.relpath / n, pair.silhouette)
            write_depth(dst / DEPTH_DIR / entry.relpath / n, pair.depth)
        stats["sequences"] += 1
        stats["frames"] += len(pairs)
    return stats
