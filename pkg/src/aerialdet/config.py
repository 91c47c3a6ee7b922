"""Run configuration: namespaced ``key=value`` settings with defaults.

Precedence is command line > config file > default. Unknown keys are
rejected. A single master seed expands into per-component seeds by
hashing a fixed label.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

from .elm import HelmConfig
from .errors import ConfigError
from .opticalflow import HsConfig, MotionMaskConfig
from .pipeline import DetectorConfig
from .scnn import SgdConfig, scaled_architecture

# key -> (type, default, help)
SCHEMA = {
    "seed": (int, 0, "master seed; all component seeds derive from it"),
    "scene.persons": (int, 12, "number of synthetic person clips"),
    "scene.frames": (int, 60, "frames per clip"),
    "scene.width": (int, 240, "frame width in pixels"),
    "scene.height": (int, 150, "frame height in pixels"),
    "scene.noise": (float, 0.01, "Gaussian pixel noise sigma"),
    "hs.alpha": (float, 1.0, "flow smoothness weight"),
    "hs.iters": (int, 50, "Horn-Schunck iteration cap"),
    "hs.tol": (float, 1e-4, "Horn-Schunck early-stop tolerance"),
    "mask.k_sigma": (float, 3.0, "motion threshold in standard deviations above the mean"),
    "mask.compensate": (bool, True, "subtract the median (camera) flow first"),
    "detector.se_radius": (int, 2, "closing structuring-element radius"),
    "detector.min_area": (int, 20, "smallest blob kept, in pixels"),
    "detector.patch_size": (int, 32, "classifier input side in pixels"),
    "dataset.stride": (int, 10, "use every n-th frame pair"),
    "scnn.maps": (int, 8, "feature maps per convolution"),
    "scnn.kernel": (int, 3, "convolution kernel side"),
    "scnn.fc": (int, 64, "fully connected width"),
    "scnn.lr": (float, 0.01, "learning rate"),
    "scnn.momentum": (float, 0.9, "momentum"),
    "scnn.l2": (float, 1e-4, "weight decay"),
    "scnn.batch_size": (int, 20, "mini-batch size"),
    "scnn.epochs": (int, 30, "training epochs"),
    "scnn.init_sigma": (float, 0.1, "initial weight standard deviation"),
    "helm.ae1": (int, 200, "first autoencoder width"),
    "helm.ae2": (int, 200, "second autoencoder width"),
    "helm.clf_hidden": (int, 2000, "ELM classifier hidden width"),
    "helm.lambda_reg": (float, 1e3, "ridge trade-off"),
    "helm.l1_weight": (float, 1e-3, "autoencoder sparsity weight"),
    "helm.fista_iters": (int, 50, "FISTA iterations per autoencoder"),
    "svm.c": (float, 1.0, "hinge-loss weight"),
    "svm.epochs": (int, 20, "SVM passes over the data"),
    "bench.predictions": (int, 1000, "single-sample predictions timed per method"),
}


def _coerce(key: str, raw):
    kind = SCHEMA[key][0]
    if not isinstance(raw, str):
        if kind is bool and isinstance(raw, bool):
            return raw
        if kind is float and isinstance(raw, (int, float)) and not isinstance(raw, bool):
            return float(raw)
        if kind is int and isinstance(raw, int) and not isinstance(raw, bool):
            return raw
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}")
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from exc


def parse_config_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"config line {n}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def derive_seed(master: int, label: str) -> int:
    """A 63-bit seed from sha256("<master>:<label>")."""
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


class RunConfig:
    """Resolved settings; ``source(key)`` tells where a value came from."""

    def __init__(self, file_values: dict | None = None, overrides: dict | None = None):
        self._values = {k: spec[1] for k, spec in SCHEMA.items()}
        self._source = {k: "default" for k in SCHEMA}
        for layer, name in ((file_values or {}, "file"), (overrides or {}, "cli")):
            for key, value in layer.items():
                if key not in SCHEMA:
                    raise ConfigError(f"unknown config key {key!r}")
                self._values[key] = _coerce(key, value)
                self._source[key] = name

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        file_values = {}
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config file {path}: {exc}") from exc
            file_values = parse_config_text(text)
        return cls(file_values, overrides)

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise KeyError(key)
        return self._values[key]

    def source(self, key: str) -> str:
        return self._source[key]

    def as_dict(self) -> dict:
        return dict(self._values)

    def seed_for(self, label: str) -> int:
        return derive_seed(self["seed"], label)

    # -- typed views ---------------------------------------------------------

    def detector(self, classifier_kind: str = "helm") -> DetectorConfig:
        return DetectorConfig(HsConfig(self["hs.alpha"], self["hs.iters"], self["hs.tol"]),
                              MotionMaskConfig(self["mask.k_sigma"], self["mask.compensate"]),
                              self["detector.se_radius"], self["detector.min_area"],
                              self["detector.patch_size"], classifier_kind)

    def architecture(self):
        return scaled_architecture(self["detector.patch_size"], self["scnn.maps"], self["scnn.kernel"],
                                   self["scnn.fc"])

    def sgd(self, seed: int) -> SgdConfig:
        return SgdConfig(self["scnn.lr"], self["scnn.momentum"], self["scnn.l2"], self["scnn.batch_size"],
                         self["scnn.epochs"], self["scnn.init_sigma"], seed)

    def helm(self, seed: int) -> HelmConfig:
        return HelmConfig(self["detector.patch_size"], (self["helm.ae1"], self["helm.ae2"]),
                          self["helm.clf_hidden"], self["helm.lambda_reg"], self["helm.l1_weight"],
                          self["helm.fista_iters"], seed)


def describe_keys() -> str:
    width = max(len(k) for k in SCHEMA)
    return "\n".join(f"{k:<{width}}  {spec[1]!r:<8}  {spec[2]}" for k, spec in SCHEMA.items())
