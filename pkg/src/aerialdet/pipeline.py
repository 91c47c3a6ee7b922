"""Frame pairs -> motion blobs ("green" candidates) -> classified humans ("red")."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .imagecore import BoundingBox, as_frame, connected_components, crop, morphological_close, resize_bilinear
from .opticalflow import HsConfig, MotionMaskConfig, horn_schunck, motion_mask, spatiotemporal_derivatives

CLASSIFIER_KINDS = ("scnn_softmax", "scnn_svm", "helm", "external_svm")


@dataclass(frozen=True)
class DetectorConfig:
    hs: HsConfig = HsConfig()
    mask: MotionMaskConfig = MotionMaskConfig()
    se_radius: int = 2
    min_area: int = 20
    patch_size: int = 100
    classifier_kind: str = "helm"

    def __post_init__(self):
        if self.patch_size < 8:
            raise ConfigError(f"patch_size must be >= 8, got {self.patch_size}")
        if self.se_radius < 0:
            raise ConfigError("se_radius must be >= 0")
        if self.min_area < 1:
            raise ConfigError("min_area must be >= 1")
        if self.classifier_kind not in CLASSIFIER_KINDS:
            raise ConfigError(f"classifier_kind must be one of {CLASSIFIER_KINDS}")


@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray
    box: BoundingBox


@dataclass
class DetectionResult:
    frame_index: int
    candidates: list = field(default_factory=list)
    humans: list = field(default_factory=list)  # (BoundingBox, score)


def motion_blobs(prev, curr, cfg: DetectorConfig):
    d = spatiotemporal_derivatives(prev, curr)
    flow = horn_schunck(d, cfg.hs)
    mask = morphological_close(motion_mask(flow, cfg.mask), cfg.se_radius)
    return connected_components(mask, cfg.min_area)


def detect_moving_objects(prev, curr, cfg: DetectorConfig = DetectorConfig()) -> list:
    """Candidate boxes around coherent moving regions of ``curr``."""
    return [b.box for b in motion_blobs(prev, curr, cfg)]


def extract_patches(frame, boxes, patch_size: int, skipped: list | None = None) -> list:
    """Crop each (clamped) box and resize it to ``patch_size`` square.

    Boxes that vanish after clamping are left out and, if ``skipped`` is
    given, appended to it.
    """
    frame = as_frame(frame)
    height, width = frame.shape
    patches = []
    for box in boxes:
        c = BoundingBox(*box).clamp(width, height)
        if c is None:
            if skipped is not None:
                skipped.append(box)
            continue
        patches.append(Patch(resize_bilinear(crop(frame, c), patch_size, patch_size), c))
    return patches


def classify_patches(patches, classifier) -> list:
    """(label, score) per patch; label 1 = human, 0 = nonhuman."""
    if len(patches) == 0:
        return []
    pixels = np.stack([p.pixels if isinstance(p, Patch) else np.asarray(p) for p in patches])
    side = getattr(classifier, "patch_size", None)
    if side is not None and pixels.shape[1:] != (side, side):
        raise DimensionError(f"classifier expects {side}x{side} patches, got {pixels.shape[1:]}")
    labels, scores = classifier.classify(pixels)
    return [(int(lab), float(s)) for lab, s in zip(labels, scores)]


def process_pair(prev, curr, index: int, cfg: DetectorConfig, classifier=None) -> DetectionResult:
    boxes = detect_moving_objects(prev, curr, cfg)
    result = DetectionResult(index, list(boxes))
    if classifier is not None and boxes:
        patches = extract_patches(curr, boxes, cfg.patch_size)
        for patch, (label, score) in zip(patches, classify_patches(patches, classifier)):
            if label == 1:
                # the clamped crop equals the candidate: blob boxes lie inside the frame
                result.humans.append((patch.box, score))
    return result


def process_video(frames, cfg: DetectorConfig = DetectorConfig(), classifier=None, jobs: int = 1) -> list:
    """One DetectionResult per frame after the first, in frame order."""
    frames = list(frames)
    if len(frames) < 2:
        raise ConfigError("process_video needs at least two frames")
    pairs = range(1, len(frames))
    if jobs <= 1:
        return [process_pair(frames[i - 1], frames[i], i, cfg, classifier) for i in pairs]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda i: process_pair(frames[i - 1], frames[i], i, cfg, classifier), pairs))
