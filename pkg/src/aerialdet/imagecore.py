"""Pixel-grid primitives: grayscale frames, binary masks, boxes, blobs.

Frames are plain 2-D ``float64`` numpy arrays with values in [0, 1]
(row-major, ``frame[y, x]``); masks are 2-D ``bool`` arrays. Every
function here is pure and returns new arrays.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DimensionError, FormatError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
FRAME_SUFFIXES = (".png", ".pgm")


class BoundingBox(NamedTuple):
    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    def clamp(self, width: int, height: int) -> "BoundingBox | None":
        """Intersection with a ``width`` x ``height`` frame, or None if empty."""
        x0, y0 = max(self.x, 0), max(self.y, 0)
        x1, y1 = min(self.x + self.w, width), min(self.y + self.h, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class Blob:
    pixel_count: int
    box: BoundingBox
    label_id: int


def as_frame(img, name: str = "frame") -> np.ndarray:
    """Validate and return ``img`` as a float64 grayscale frame."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def to_grayscale(rgb) -> np.ndarray:
    """Luma conversion (0.299 R + 0.587 G + 0.114 B), clamped to [0, 1]."""
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"expected an H x W x 3 image, got shape {arr.shape}")
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    gray = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
    # weights sum to 1 only up to rounding; keep neutral pixels exact
    gray = np.where((r == g) & (g == b), r, gray)
    return np.clip(gray, 0.0, 1.0)


def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize with half-pixel-center alignment; aspect ratio is not kept."""
    frame = as_frame(img)
    if out_w < 1 or out_h < 1:
        raise DimensionError(f"target size must be at least 1x1, got {out_w}x{out_h}")
    in_h, in_w = frame.shape
    if (in_w, in_h) == (out_w, out_h):
        return frame.copy()
    y0, y1, fy = _axis_weights(in_h, out_h)
    x0, x1, fx = _axis_weights(in_w, out_w)
    top = frame[y0][:, x0] * (1 - fx) + frame[y0][:, x1] * fx
    bottom = frame[y1][:, x0] * (1 - fx) + frame[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bottom * fy[:, None]
    # convex combination; clip only absorbs rounding
    return np.clip(out, frame.min(), frame.max())


def square_element(radius: int) -> np.ndarray:
    if radius < 0:
        raise ValueError("structuring element radius must be >= 0")
    return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)


def morphological_close(mask, radius: int = 2) -> np.ndarray:
    """Dilation then erosion with a square element; outside the frame is background."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got shape {m.shape}")
    se = square_element(radius)
    if radius == 0 or not m.any():
        return m.copy()
    dilated = ndimage.binary_dilation(m, structure=se, border_value=0)
    return ndimage.binary_erosion(dilated, structure=se, border_value=0)


def connected_components(mask, min_area: int = 1) -> list[Blob]:
    """8-connected blobs with at least ``min_area`` pixels, ordered by (y, x)."""
    if min_area < 1:
        raise ValueError("min_area must be >= 1")
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got shape {m.shape}")
    labels, n = ndimage.label(m, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return []
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    found = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if counts[idx] < min_area:
            continue
        ys, xs = sl
        box = BoundingBox(xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start)
        found.append((box, int(counts[idx])))
    found.sort(key=lambda item: (item[0].y, item[0].x))
    return [Blob(pixel_count=c, box=b, label_id=i) for i, (b, c) in enumerate(found, start=1)]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    if union <= 0:
        return 0.0
    return inter / union


def crop(frame: np.ndarray, box: BoundingBox) -> np.ndarray:
    return frame[box.y:box.y + box.h, box.x:box.x + box.w]


# -- frame files -------------------------------------------------------------

def load_frame(path) -> np.ndarray:
    """Read a PNG or binary PGM file as a grayscale frame in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except OSError as exc:
        raise FormatError(f"cannot read frame {path}: {exc}") from exc
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        scale = 65535.0
    else:
        scale = 255.0
    arr = arr.astype(np.float64) / scale
    if arr.ndim == 3:
        if arr.shape[2] == 4:
            arr = arr[..., :3]
        if arr.shape[2] != 3:
            raise FormatError(f"unsupported channel count in {path}: {arr.shape[2]}")
        return to_grayscale(arr)
    return np.clip(arr, 0.0, 1.0)


def save_frame(frame: np.ndarray, path) -> None:
    """Write a grayscale frame (or H x W x 3 RGB image) as 8-bit PNG/PGM."""
    arr = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(arr).save(tmp, format="PPM" if path.suffix == ".pgm" else "PNG")
    os.replace(tmp, path)


def list_frames(directory) -> list[Path]:
    """Frame files in a directory, ordered lexicographically by name."""
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"not a frame directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def load_frames(directory) -> list[np.ndarray]:
    return [load_frame(p) for p in list_frames(directory)]


def frame_name(index: int, suffix: str = ".png") -> str:
    return f"frame_{index:06d}{suffix}"


def boxes_from_blobs(blobs: Sequence[Blob]) -> list[BoundingBox]:
    return [b.box for b in blobs]
