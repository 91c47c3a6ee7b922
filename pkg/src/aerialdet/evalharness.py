"""Patch datasets, leave-four-person-out cross-validation, metrics, timing."""
from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, StateError
from .imagecore import iou
from .pipeline import DetectorConfig, detect_moving_objects, extract_patches

METRICS_HEADER = ("split", "method", "accuracy", "tp", "fp", "tn", "fn", "train_s", "test_s_per_sample")
TIMING_HEADER = ("method", "train_s", "test_s_per_sample")

SPLIT_TABLE = (
    (1, 2, 3, 4), (5, 6, 7, 8), (9, 10, 11, 12), (1, 3, 5, 7), (2, 4, 6, 8),
    (1, 4, 7, 10), (2, 5, 8, 11), (3, 6, 9, 12), (1, 5, 9, 12), (1, 6, 11, 12),
)
PERSONS = tuple(range(1, 13))


@dataclass(frozen=True)
class LabeledSample:
    patch: np.ndarray
    label: int
    person_id: int = 0
    activity: str | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ConfigError(f"label must be 0 or 1, got {self.label}")
        if self.person_id < 0:
            raise ConfigError("person_id must be >= 0")


@dataclass
class LabeledVideo:
    """Frames plus ground truth (GroundTruth records) for one person's clip."""
    frames: list
    truth: list
    person_id: int
    activity: str | None = None

    def human_boxes(self, frame: int) -> list:
        return [g.box for g in self.truth if g.frame == frame and g.kind == "human"]


def stack_samples(samples):
    """(patches (N, s, s), labels (N,), person_ids (N,))"""
    samples = list(samples)
    if not samples:
        return np.zeros((0, 0, 0)), np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    return (np.stack([s.patch for s in samples]),
            np.array([s.label for s in samples], dtype=np.intp),
            np.array([s.person_id for s in samples], dtype=np.intp))


def build_patch_dataset(videos, detector_cfg: DetectorConfig = DetectorConfig(),
                        frame_stride: int = 10) -> list:
    """Label every candidate box on every ``frame_stride``-th frame pair.

    A candidate is human when its IoU with some ground-truth human box is
    at least 0.5. Every sample carries the person id of its source clip.
    """
    if frame_stride < 1:
        raise ConfigError(f"frame_stride must be >= 1, got {frame_stride}")
    samples = []
    for video in videos:
        frames = video.frames
        for i in range(frame_stride, len(frames), frame_stride):
            boxes = detect_moving_objects(frames[i - 1], frames[i], detector_cfg)
            humans = video.human_boxes(i)
            for patch in extract_patches(frames[i], boxes, detector_cfg.patch_size):
                best = max((iou(patch.box, h) for h in humans), default=0.0)
                samples.append(LabeledSample(patch.pixels, int(best >= 0.5), video.person_id,
                                             video.activity))
    return samples


def save_dataset(samples_or_arrays, path) -> None:
    """Store patches / labels / person ids as an .npz archive (atomically)."""
    if isinstance(samples_or_arrays, tuple):
        X, y, pids = samples_or_arrays
    else:
        X, y, pids = stack_samples(samples_or_arrays)
    path = Path(path)
    buf = io.BytesIO()
    np.savez(buf, patches=np.asarray(X, dtype=np.float32), labels=np.asarray(y, dtype=np.int64),
             person_ids=np.asarray(pids, dtype=np.int64))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_dataset(path):
    with np.load(path) as z:
        X = z["patches"].astype(np.float64)
        y = z["labels"].astype(np.intp)
        pids = z["person_ids"].astype(np.intp)
    if not (X.ndim == 3 and X.shape[0] == y.shape[0] == pids.shape[0]):
        raise DimensionError("dataset arrays disagree in length or patch shape")
    return X, y, pids


# -- splits ------------------------------------------------------------------

@dataclass(frozen=True)
class CvSplit:
    test_persons: frozenset
    train_persons: frozenset

    def __post_init__(self):
        if len(self.test_persons) != 4 or len(self.train_persons) != 8:
            raise ConfigError("a split needs 4 test and 8 training persons")
        if self.test_persons & self.train_persons:
            raise ConfigError("test and training persons overlap")


def leave_four_out_splits() -> tuple:
    everyone = frozenset(PERSONS)
    return tuple(CvSplit(frozenset(t), everyone - frozenset(t)) for t in SPLIT_TABLE)


def format_split(split: CvSplit) -> str:
    return "{" + ",".join(str(p) for p in sorted(split.test_persons)) + "}"


# -- metrics -----------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be >= 0")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        """Percent correct."""
        return 100.0 * (self.tp + self.tn) / self.total if self.total else float("nan")

    @classmethod
    def from_labels(cls, truth, predicted) -> "ConfusionMatrix":
        t = np.asarray(truth).astype(bool)
        p = np.asarray(predicted).astype(bool)
        return cls(int(np.sum(t & p)), int(np.sum(~t & p)), int(np.sum(~t & ~p)), int(np.sum(t & ~p)))


def format_accuracy(acc: float) -> str:
    return f"{acc:.4f}"


def evaluate(classifier, test) -> tuple:
    """(percent accuracy, ConfusionMatrix) of ``classifier.predict`` on ``test``.

    ``test`` is a sequence of LabeledSample or a (patches, labels) pair.
    """
    if isinstance(test, tuple):
        X, y = np.asarray(test[0]), np.asarray(test[1])
    else:
        X, y, _ = stack_samples(test)
    if y.shape[0] == 0:
        raise ConfigError("cannot evaluate on an empty test set")
    cm = ConfusionMatrix.from_labels(y, classifier.predict(X))
    return cm.accuracy, cm


# -- cross-validation --------------------------------------------------------

@dataclass
class SplitResult:
    split: int                 # 1-based
    test_persons: frozenset
    accuracy: float
    matrix: ConfusionMatrix
    n_train: int
    n_test: int
    train_s: float
    test_s_per_sample: float
    train_persons_seen: frozenset = frozenset()


@dataclass
class CvReport:
    method: str
    results: list = field(default_factory=list)

    @property
    def accuracies(self) -> list:
        return [r.accuracy for r in self.results]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies)) if self.results else float("nan")


# trainer(patches, labels, seed) -> object with .predict(patches)
Trainer = Callable


def _check_coverage(pids, splits):
    present = set(np.unique(pids).tolist())
    needed = set().union(*(s.test_persons | s.train_persons for s in splits))
    missing = sorted(needed - present)
    if missing:
        raise ConfigError(f"dataset has no samples for persons {missing}")


def _run_split(k, split, X, y, pids, trainer, seed):
    test_mask = np.isin(pids, list(split.test_persons))
    train_mask = ~test_mask
    seen = frozenset(np.unique(pids[train_mask]).tolist())
    # instrumentation: a test person must never reach the trainer
    if seen & split.test_persons:
        raise StateError(f"split {k}: test persons {sorted(seen & split.test_persons)} leaked into training")
    t0 = time.perf_counter()
    model = trainer(X[train_mask], y[train_mask], seed)
    train_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    acc, cm = evaluate(model, (X[test_mask], y[test_mask]))
    test_s = (time.perf_counter() - t0) / max(1, int(test_mask.sum()))
    return SplitResult(k, split.test_persons, acc, cm, int(train_mask.sum()), int(test_mask.sum()),
                       train_s, test_s, seen)


def cross_validate(X, y, pids, trainer: Trainer, splits=None, method: str = "model",
                   seed: int = 0, jobs: int = 1, seed_for: Callable | None = None) -> CvReport:
    """Train on each split's training persons, test on its four test persons.

    Samples with person id 0 (not tied to any person) only ever train.
    ``seed_for(seed, k)`` gives the per-split seed; default ``seed + k``.
    """
    X, y, pids = np.asarray(X), np.asarray(y), np.asarray(pids)
    if not (X.shape[0] == y.shape[0] == pids.shape[0]):
        raise DimensionError("patches, labels and person ids disagree in length")
    splits = leave_four_out_splits() if splits is None else tuple(splits)
    _check_coverage(pids, splits)
    seed_for = seed_for or (lambda s, k: s + k)
    jobs_list = [(k, sp, seed_for(seed, k)) for k, sp in enumerate(splits, start=1)]
    run = lambda job: _run_split(job[0], job[1], X, y, pids, trainer, job[2])  # noqa: E731
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, jobs_list))
    else:
        results = [run(j) for j in jobs_list]
    return CvReport(method, results)


# -- CSV output --------------------------------------------------------------

def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)


def metrics_rows(report: CvReport, include_timing: bool = False) -> list:
    rows = []
    for r in report.results:
        timing = [f"{r.train_s:.6f}", f"{r.test_s_per_sample:.9f}"] if include_timing else ["", ""]
        m = r.matrix
        rows.append([r.split, report.method, format_accuracy(r.accuracy), m.tp, m.fp, m.tn, m.fn] + timing)
    return rows


def write_metrics_csv(reports, path, include_timing: bool = False) -> None:
    """One row per (split, method). Timing columns stay empty unless asked
    for, so repeated runs produce byte-identical files."""
    if isinstance(reports, CvReport):
        reports = [reports]
    rows = [row for rep in reports for row in metrics_rows(rep, include_timing)]
    _write_csv(path, METRICS_HEADER, rows)


# -- timing ------------------------------------------------------------------

@dataclass(frozen=True)
class TimingRow:
    method: str
    train_s: float
    test_s_per_sample: float
    n_predictions: int


def _warmup_subset(y, per_class: int = 4) -> np.ndarray:
    idx = [np.flatnonzero(y == c)[:per_class] for c in np.unique(y)]
    return np.sort(np.concatenate(idx))


def benchmark_timing(trainers: dict, X, y, test_X=None, n_predictions: int = 1000,
                     seed: int = 0, warmup: bool = True) -> list:
    """Wall-clock training time and single-sample prediction time per method.

    A small warm-up fit and one warm-up prediction run first and are not
    counted. Prediction time is averaged over ``n_predictions`` calls, each
    on one patch, cycling through ``test_X``.
    """
    if not trainers:
        raise ConfigError("benchmark_timing needs at least one trainer")
    if n_predictions < 1:
        raise ConfigError("n_predictions must be >= 1")
    X, y = np.asarray(X), np.asarray(y)
    test_X = X if test_X is None else np.asarray(test_X)
    rows = []
    for name, trainer in trainers.items():
        if warmup:
            sub = _warmup_subset(y)
            trainer(X[sub], y[sub], seed)
        t0 = time.perf_counter()
        model = trainer(X, y, seed)
        train_s = time.perf_counter() - t0
        if warmup:
            model.predict(test_X[:1])
        t0 = time.perf_counter()
        for i in range(n_predictions):
            model.predict(test_X[i % len(test_X)][None])
        per = (time.perf_counter() - t0) / n_predictions
        rows.append(TimingRow(name, train_s, per, n_predictions))
    return rows


def write_timing_csv(rows, path) -> None:
    _write_csv(path, TIMING_HEADER,
               [[r.method, f"{r.train_s:.6f}", f"{r.test_s_per_sample:.9f}"] for r in rows])
