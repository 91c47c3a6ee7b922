"""Classifier heads over patches or feature vectors.

Four interchangeable heads share one small interface (``patch_size``,
``classify(pixels) -> (labels, scores)``, ``predict``):

* ``SoftmaxHead``      - the CNN's own soft-max output
* ``ScnnSvmHead``      - linear SVM on the CNN's fully connected features
* ``HelmHead``         - hierarchical ELM
* ``ExternalSvmHead``  - linear SVM on features produced outside this package

Labels are 1 for human and 0 for nonhuman.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import elm, scnn
from .errors import ConfigError, DimensionError, FormatError, StateError

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1
_FEAT_HEADER = struct.Struct("<4sIQQ")


# -- linear SVM --------------------------------------------------------------

@dataclass(frozen=True)
class SvmModel:
    w: np.ndarray
    b: float
    c: float

    def __post_init__(self):
        if not self.c > 0:
            raise ConfigError("svm c must be > 0")
        if not (np.all(np.isfinite(self.w)) and np.isfinite(self.b)):
            raise ValueError("svm parameters must be finite")

    @property
    def dim(self) -> int:
        return self.w.shape[0]


def hinge_objective(w, b, X, y, c) -> float:
    """0.5 ||w||^2 + c * sum max(0, 1 - y (w.x + b))"""
    margins = y * (X @ w + b)
    return float(0.5 * w @ w + c * np.maximum(0.0, 1.0 - margins).sum())


def train_linear_svm(feats, labels, c: float = 1.0, epochs: int = 20, seed: int = 0) -> SvmModel:
    """Primal linear SVM by stochastic subgradient descent (Pegasos schedule).

    The objective 0.5||w||^2 + c*sum(hinge) is rescaled to
    lam/2 ||w||^2 + mean(hinge) with lam = 1/(c n), stepped with
    eta_t = 1/(lam t). The bias rides along as a constant feature. The
    iterates of the second half of training are averaged; if that average
    scores worse than the all-zero start on the training objective, the
    start is returned instead.
    """
    X = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64).ravel()
    if X.shape[0] != y.shape[0]:
        raise DimensionError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
    if not c > 0:
        raise ConfigError(f"svm c must be > 0, got {c}")
    if epochs < 1:
        raise ConfigError("svm epochs must be >= 1")
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise ConfigError("svm labels must be -1 or +1")
    if np.unique(y).size < 2:
        raise ConfigError("svm training needs both labels present")
    if np.all(X == X[0]):
        warnings.warn("all feature rows are identical; the SVM cannot separate them",
                      RuntimeWarning, stacklevel=2)
    n, dim = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    lam = 1.0 / (c * n)
    radius = 1.0 / np.sqrt(lam)
    rng = np.random.default_rng([seed, 5])
    w = np.zeros(dim + 1)
    avg = np.zeros(dim + 1)
    n_avg = 0
    total = epochs * n
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            if y[i] * (Xa[i] @ w) < 1.0:
                w = (1.0 - eta * lam) * w + eta * y[i] * Xa[i]
            else:
                w = (1.0 - eta * lam) * w
            norm = np.linalg.norm(w)
            if norm > radius:
                w *= radius / norm
            if t > total // 2:
                avg += w
                n_avg += 1
    avg /= max(n_avg, 1)
    w_avg, b_avg = avg[:dim].copy(), float(avg[dim])
    # the start point (w = 0, b = 0) is kept if noisy steps ended above it
    if hinge_objective(w_avg, b_avg, X, y, c) > hinge_objective(np.zeros(dim), 0.0, X, y, c):
        w_avg, b_avg = np.zeros(dim), 0.0
    return SvmModel(w_avg, b_avg, float(c))


def svm_predict(model: SvmModel, feats):
    """Labels in {-1, +1} (a zero margin counts as +1) and raw margins."""
    X = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    if X.shape[1] != model.dim:
        raise DimensionError(f"features have {X.shape[1]} dims, model expects {model.dim}")
    margins = X @ model.w + model.b
    return np.where(margins >= 0, 1, -1), margins


# -- feature files -----------------------------------------------------------

@dataclass(frozen=True)
class FeatureMatrix:
    data: np.ndarray
    source_tag: str = "external"

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def save_features(fm: FeatureMatrix | np.ndarray, path) -> None:
    """Write the binary feature format: FEAT, u32 version, u64 rows, u64 dim, f32 LE data."""
    data = fm.data if isinstance(fm, FeatureMatrix) else np.asarray(fm)
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 2 or data.shape[1] < 1:
        raise DimensionError("feature matrix must be 2-D with dim >= 1")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, data.shape[0], data.shape[1]))
        fh.write(data.tobytes())
    tmp.replace(path)


def _read_feature_csv(text: str) -> np.ndarray:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("dim="):
        raise FormatError("feature CSV must start with a 'dim=<d>' header")
    try:
        dim = int(lines[0][4:])
        rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    except ValueError as exc:
        raise FormatError(f"malformed feature CSV: {exc}") from exc
    if dim < 1:
        raise FormatError("feature dim must be >= 1")
    if any(len(r) != dim for r in rows):
        raise FormatError(f"feature CSV rows must have {dim} values")
    return np.array(rows, dtype=np.float64).reshape(len(rows), dim)


def load_external_features(path, expected_rows: int | None = None) -> FeatureMatrix:
    """Read a FEAT binary or ``dim=<d>`` CSV feature file."""
    raw = Path(path).read_bytes()
    if not raw:
        raise FormatError(f"empty feature file: {path}")
    if raw[:4] == FEAT_MAGIC:
        if len(raw) < _FEAT_HEADER.size:
            raise FormatError("truncated feature header")
        _, version, rows, dim = _FEAT_HEADER.unpack_from(raw)
        if version != FEAT_VERSION:
            raise FormatError(f"unsupported feature file version {version}")
        if dim < 1:
            raise FormatError("feature dim must be >= 1")
        payload = raw[_FEAT_HEADER.size:]
        if len(payload) != rows * dim * 4:
            raise FormatError(f"feature payload is {len(payload)} bytes, header implies {rows * dim * 4}")
        data = np.frombuffer(payload, dtype="<f4").reshape(rows, dim).astype(np.float32)
    else:
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("feature file is neither FEAT binary nor CSV") from exc
        data = _read_feature_csv(text)
    if not np.all(np.isfinite(data)):
        raise FormatError("feature file contains non-finite values")
    if expected_rows is not None and data.shape[0] != expected_rows:
        raise FormatError(f"feature file has {data.shape[0]} rows, expected {expected_rows}")
    return FeatureMatrix(data, "external")


# -- heads -------------------------------------------------------------------

class SoftmaxHead:
    kind = "scnn_softmax"

    def __init__(self, net: scnn.CnnNetwork):
        self.net = net

    @property
    def patch_size(self) -> int:
        return self.net.arch.input_size

    def classify(self, pixels):
        """Human probability; human when it exceeds 0.5."""
        scores = scnn.predict_proba(self.net, pixels)[:, 1]
        return (scores > 0.5).astype(np.intp), scores

    def predict(self, pixels) -> np.ndarray:
        return self.classify(pixels)[0]


class ScnnSvmHead:
    kind = "scnn_svm"

    def __init__(self, net: scnn.CnnNetwork, svm: SvmModel):
        self.net = net
        self.svm = svm

    @property
    def patch_size(self) -> int:
        return self.net.arch.input_size

    def classify(self, pixels):
        feats = scnn.extract_fc_features(self.net, np.asarray(pixels))
        signs, margins = svm_predict(self.svm, np.atleast_2d(feats))
        return (signs > 0).astype(np.intp), margins

    def predict(self, pixels) -> np.ndarray:
        return self.classify(pixels)[0]


class HelmHead:
    kind = "helm"

    def __init__(self, model: elm.HelmModel):
        self.model = model

    @property
    def patch_size(self) -> int:
        return int(round(np.sqrt(self.model.input_dim)))

    def classify(self, pixels):
        """Human-class ELM score; label is the argmax over both class scores."""
        scores, labels = elm.helm_predict(self.model, pixels)
        return labels.astype(np.intp), scores[:, 1]

    def predict(self, pixels) -> np.ndarray:
        return self.classify(pixels)[0]


class ExternalSvmHead:
    """SVM over externally extracted features.

    ``extractor`` maps a patch batch to feature rows; without it the head
    only accepts feature matrices through ``classify_features``.
    """
    kind = "external_svm"

    def __init__(self, svm: SvmModel, extractor: Callable | None = None, patch_size: int | None = None):
        self.svm = svm
        self.extractor = extractor
        self.patch_size = patch_size

    def classify_features(self, feats):
        signs, margins = svm_predict(self.svm, feats)
        return (signs > 0).astype(np.intp), margins

    def classify(self, pixels):
        if self.extractor is None:
            raise StateError("external_svm head has no feature extractor for raw patches")
        return self.classify_features(self.extractor(np.asarray(pixels)))

    def predict(self, pixels) -> np.ndarray:
        return self.classify(pixels)[0]


def to_signed(labels) -> np.ndarray:
    return np.where(np.asarray(labels) == 1, 1, -1)


def train_scnn_svm(net: scnn.CnnNetwork, patches, labels, c: float = 1.0, epochs: int = 20,
                   seed: int = 0) -> ScnnSvmHead:
    feats = scnn.extract_fc_features(net, np.asarray(patches))
    return ScnnSvmHead(net, train_linear_svm(np.atleast_2d(feats), to_signed(labels), c, epochs, seed))
