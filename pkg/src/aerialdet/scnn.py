"""Supervised CNN trained with mini-batch SGD, momentum and L2 weight decay.

The network is a plain stack of layers: valid convolutions, ReLU,
2x2/stride-2 max pooling, fully connected layers, soft-max and a
classification (cross-entropy) layer. ``full_architecture()`` gives the
17-layer 100x100 detector network; ``scaled_architecture()`` keeps the
same layer sequence at desk-scale sizes.

Inputs are batches shaped ``(N, H, W)`` (single grey channel) or
``(N, 1, H, W)``. The reported loss is the batch mean of the
cross-entropy, and gradients are taken of that mean.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, StateError

LAYER_KINDS = ("input", "conv", "relu", "maxpool", "fc", "softmax", "classification")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class Layer:
    kind: str
    units: int = 0   # input side, conv feature maps or fc nodes
    kernel: int = 0  # conv filter side / pooling window

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")


@dataclass(frozen=True)
class CnnArchitecture:
    layers: tuple

    def __post_init__(self):
        layers = self.layers
        if not layers or layers[0].kind != "input":
            raise ConfigError("architecture must start with an input layer")
        if layers[-1].kind != "classification" or layers[-2].kind != "softmax":
            raise ConfigError("architecture must end with softmax + classification")
        self.shapes()  # validates sizes

    def __len__(self):
        return len(self.layers)

    @property
    def input_size(self) -> int:
        return self.layers[0].units

    @property
    def n_classes(self) -> int:
        return self.shapes()[-1][0]

    def shapes(self) -> list:
        """Output shape of every layer: (C, H, W) for maps, (n,) for vectors."""
        side = self.layers[0].units
        shape = (1, side, side)
        out = [shape]
        for layer in self.layers[1:]:
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ConfigError("conv layer after a fully connected layer")
                c, h, w = shape
                h, w = h - layer.kernel + 1, w - layer.kernel + 1
                if h < 1 or w < 1:
                    raise ConfigError(f"conv {layer.kernel}x{layer.kernel} does not fit a {shape[1]}x{shape[2]} map")
                shape = (layer.units, h, w)
            elif layer.kind == "maxpool":
                c, h, w = shape
                if h < 2 or w < 2:
                    raise ConfigError(f"cannot pool a {h}x{w} map")
                shape = (c, h // 2, w // 2)
            elif layer.kind == "fc":
                shape = (layer.units,)
            out.append(shape)
        if len(shape) != 1:
            raise ConfigError("architecture must end in a fully connected layer before softmax")
        return out

    def map_sides(self) -> list:
        """Spatial side of every conv and pool output, in order."""
        return [s[1] for layer, s in zip(self.layers, self.shapes())
                if layer.kind in ("conv", "maxpool")]

    def param_shapes(self) -> dict:
        shapes = self.shapes()
        params = {}
        n_conv = n_fc = 0
        for i, layer in enumerate(self.layers):
            prev = shapes[i - 1] if i else None
            if layer.kind == "conv":
                n_conv += 1
                params[f"conv{n_conv}.W"] = (layer.units, prev[0], layer.kernel, layer.kernel)
                params[f"conv{n_conv}.b"] = (layer.units,)
            elif layer.kind == "fc":
                n_fc += 1
                params[f"fc{n_fc}.W"] = (layer.units, int(np.prod(prev)))
                params[f"fc{n_fc}.b"] = (layer.units,)
        return params

    def param_names(self) -> list:
        """Parameter names in layer order, one (W, b) pair per conv/fc layer."""
        return list(self.param_shapes())

    def feature_layer(self) -> int:
        """Index of the ReLU following the first fully connected layer."""
        for i, layer in enumerate(self.layers):
            if layer.kind == "fc":
                if i + 1 < len(self.layers) and self.layers[i + 1].kind == "relu":
                    return i + 1
                return i
        raise ConfigError("architecture has no fully connected layer")

    def describe(self) -> str:
        parts = []
        for layer in self.layers:
            if layer.kind in ("input", "fc"):
                parts.append(f"{layer.kind}:{layer.units}")
            elif layer.kind == "conv":
                parts.append(f"conv:{layer.units}x{layer.kernel}")
            else:
                parts.append(layer.kind)
        return ",".join(parts)

    @classmethod
    def parse(cls, text: str) -> "CnnArchitecture":
        layers = []
        for part in text.split(","):
            kind, _, arg = part.partition(":")
            if kind == "conv":
                units, kernel = arg.split("x")
                layers.append(Layer("conv", int(units), int(kernel)))
            elif kind in ("input", "fc"):
                layers.append(Layer(kind, int(arg)))
            elif kind == "maxpool":
                layers.append(Layer("maxpool", kernel=2))
            else:
                layers.append(Layer(kind))
        return cls(tuple(layers))


def build_architecture(input_size: int, blocks, fc_units: int, n_classes: int = 2) -> CnnArchitecture:
    """conv-relu-pool blocks joined by ReLU, then fc-relu-fc-softmax-classification."""
    layers = [Layer("input", input_size)]
    for i, (maps, kernel) in enumerate(blocks):
        layers += [Layer("conv", maps, kernel), Layer("relu"), Layer("maxpool", kernel=2)]
        if i < len(blocks) - 1:
            layers.append(Layer("relu"))
    layers += [Layer("fc", fc_units), Layer("relu"), Layer("fc", n_classes),
               Layer("softmax"), Layer("classification")]
    return CnnArchitecture(tuple(layers))


def full_architecture() -> CnnArchitecture:
    return build_architecture(100, [(20, 5)] * 3, 1000, 2)


def scaled_architecture(input_size: int = 32, maps: int = 8, kernel: int = 3,
                        fc_units: int = 64, n_classes: int = 2) -> CnnArchitecture:
    return build_architecture(input_size, [(maps, kernel)] * 3, fc_units, n_classes)


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.01
    momentum: float = 0.9
    l2: float = 0.0001
    batch_size: int = 300
    epochs: int = 30
    init_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.l2 < 0:
            raise ConfigError(f"l2 must be >= 0, got {self.l2}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.init_sigma < 0:
            raise ConfigError(f"init_sigma must be >= 0, got {self.init_sigma}")


@dataclass
class CnnNetwork:
    arch: CnnArchitecture
    params: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)

    @property
    def initialized(self) -> bool:
        return bool(self.params)

    def copy(self) -> "CnnNetwork":
        return CnnNetwork(self.arch,
                          {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.velocity.items()},
                          list(self.loss_history))


def init_network(arch: CnnArchitecture, cfg: SgdConfig = SgdConfig()) -> CnnNetwork:
    """Gaussian N(0, init_sigma^2) weights, zero biases, zero velocity."""
    rng = np.random.default_rng([cfg.seed, 0])
    params, velocity = {}, {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".W"):
            params[name] = rng.normal(0.0, 1.0, size=shape) * cfg.init_sigma
        else:
            params[name] = np.zeros(shape)
        velocity[name] = np.zeros(shape)
    return CnnNetwork(arch, params, velocity)


def softmax(logits) -> np.ndarray:
    a = np.asarray(logits, dtype=np.float64)
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(probs, targets) -> float:
    """Summed cross-entropy -sum_i sum_j t_ij ln y_ij."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if p.shape != t.shape:
        raise DimensionError(f"probs {p.shape} and targets {t.shape} differ")
    return float(-np.sum(t * np.log(np.maximum(p, PROB_FLOOR))))


def one_hot(labels, n_classes: int = 2) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


# -- layer kernels -----------------------------------------------------------

def conv_forward(x, w, b):
    """Valid cross-correlation. x: (N,C,H,W), w: (F,C,k,k) -> (N,F,H-k+1,W-k+1)."""
    height, width = x.shape[2], x.shape[3]
    k = w.shape[2]
    ho, wo = height - k + 1, width - k + 1
    # shift-and-accumulate keeps memory at one output tensor (no im2col)
    out = np.zeros((x.shape[0], ho, wo, w.shape[0]))
    for i in range(k):
        for j in range(k):
            out += np.tensordot(x[:, :, i:i + ho, j:j + wo], w[:, :, i, j], axes=([1], [1]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None]


def conv_backward(dout, x, w):
    k = w.shape[2]
    ho, wo = dout.shape[2], dout.shape[3]
    dw = np.empty_like(w)
    dx_t = np.zeros((x.shape[0], x.shape[2], x.shape[3], x.shape[1]))
    for i in range(k):
        for j in range(k):
            xs = x[:, :, i:i + ho, j:j + wo]
            dw[:, :, i, j] = np.tensordot(dout, xs, axes=([0, 2, 3], [0, 2, 3]))
            dx_t[:, i:i + ho, j:j + wo, :] += np.tensordot(dout, w[:, :, i, j], axes=([1], [0]))
    db = dout.sum(axis=(0, 2, 3))
    return dx_t.transpose(0, 3, 1, 2), dw, db


def maxpool_forward(x):
    """2x2 stride-2 max pool; odd trailing rows/cols are dropped.

    Returns the pooled maps and the argmax index (0..3, row-major within
    the window; ties go to the first maximum).
    """
    n, c, height, width = x.shape
    ho, wo = height // 2, width // 2
    windows = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
    windows = windows.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(dout, idx, in_shape):
    n, c, height, width = in_shape
    ho, wo = dout.shape[2], dout.shape[3]
    grad = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(grad, idx[..., None], dout[..., None], axis=-1)
    grad = grad.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    dx = np.zeros(in_shape)
    dx[:, :, :2 * ho, :2 * wo] = grad
    return dx


# -- network passes ----------------------------------------------------------

def _as_batch(net: CnnNetwork, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    side = net.arch.input_size
    if x.ndim != 4 or x.shape[1:] != (1, side, side):
        raise DimensionError(f"expected inputs of shape (N, {side}, {side}), got {np.shape(inputs)}")
    return x


def _require_params(net: CnnNetwork):
    if not net.initialized:
        raise StateError("network has no parameters; call init_network or load a trained model")


def _run(net: CnnNetwork, x: np.ndarray, stop: int | None = None):
    """Run layers 1..stop (inclusive); returns output and per-layer cache."""
    layers = net.arch.layers
    stop = len(layers) - 1 if stop is None else stop
    cache = []
    n_conv = n_fc = 0
    out = x
    for i in range(1, stop + 1):
        layer = layers[i]
        inp = out
        aux = None
        if layer.kind == "conv":
            n_conv += 1
            name = f"conv{n_conv}"
            out = conv_forward(inp, net.params[name + ".W"], net.params[name + ".b"])
            aux = name
        elif layer.kind == "relu":
            out = np.maximum(inp, 0.0)
        elif layer.kind == "maxpool":
            out, aux = maxpool_forward(inp)
        elif layer.kind == "fc":
            n_fc += 1
            name = f"fc{n_fc}"
            flat = inp.reshape(inp.shape[0], -1)
            out = flat @ net.params[name + ".W"].T + net.params[name + ".b"]
            aux = name
        elif layer.kind == "softmax":
            out = softmax(inp)
        # classification layer is the loss; it passes probabilities through
        cache.append((layer, inp, aux))
    return out, cache


def forward(net: CnnNetwork, inputs):
    """Class probabilities (N, k) and the activation cache for ``backward``."""
    _require_params(net)
    x = _as_batch(net, inputs)
    return _run(net, x)


def backward(net: CnnNetwork, cache, targets) -> dict:
    """Gradients of the mean cross-entropy with respect to every parameter."""
    probs = None
    for layer, inp, aux in reversed(cache):
        if layer.kind == "softmax":
            probs = softmax(inp)
            break
    t = np.asarray(targets, dtype=np.float64)
    if probs is None or probs.shape != t.shape:
        raise DimensionError("targets do not match the cached forward pass")
    n = t.shape[0]
    grads = {}
    grad = None
    for layer, inp, aux in reversed(cache):
        if layer.kind == "classification":
            continue
        if layer.kind == "softmax":
            # softmax + cross-entropy combined: d(mean loss)/d(logits)
            grad = (probs - t) / n
        elif layer.kind == "fc":
            flat = inp.reshape(n, -1)
            grads[aux + ".W"] = grad.T @ flat
            grads[aux + ".b"] = grad.sum(axis=0)
            grad = (grad @ net.params[aux + ".W"]).reshape(inp.shape)
        elif layer.kind == "relu":
            grad = grad * (inp > 0)
        elif layer.kind == "maxpool":
            grad = maxpool_backward(grad, aux, inp.shape)
        elif layer.kind == "conv":
            grad, grads[aux + ".W"], grads[aux + ".b"] = conv_backward(grad, inp, net.params[aux + ".W"])
    return grads


def mean_loss(net: CnnNetwork, inputs, targets) -> float:
    probs, _ = forward(net, inputs)
    return cross_entropy_loss(probs, targets) / probs.shape[0]


def sgd_momentum_step(net: CnnNetwork, grads: dict, cfg: SgdConfig) -> CnnNetwork:
    """theta <- theta - lr*(g + l2*w) + momentum*(previous step), in place.

    Weight decay applies to weights only, never to biases.
    """
    for name, theta in net.params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        if cfg.l2 and name.endswith(".W"):
            g = g + cfg.l2 * theta
        step = cfg.momentum * net.velocity[name] - cfg.lr * g
        net.velocity[name] = step
        theta += step
    return net


def train_scnn(inputs, labels, cfg: SgdConfig = SgdConfig(),
               arch: CnnArchitecture | None = None, net: CnnNetwork | None = None) -> CnnNetwork:
    """Mini-batch SGD with momentum; the batch order is reshuffled every epoch.

    The per-epoch mean training loss is appended to ``net.loss_history``.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
    if x.shape[0] < 2:
        raise ConfigError("training needs at least 2 samples")
    if arch is None:
        arch = net.arch if net is not None else full_architecture()
    if net is None:
        net = init_network(arch, cfg)
    x = _as_batch(net, x)
    if np.unique(y).size < 2:
        warnings.warn("training data contains a single class", RuntimeWarning, stacklevel=2)
    targets = one_hot(y, arch.n_classes)
    rng = np.random.default_rng([cfg.seed, 1])
    n = x.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            probs, cache = _run(net, x[idx])
            total += cross_entropy_loss(probs, targets[idx])
            sgd_momentum_step(net, backward(net, cache, targets[idx]), cfg)
        net.loss_history.append(total / n)
    return net


def predict_proba(net: CnnNetwork, inputs, batch_size: int = 256) -> np.ndarray:
    _require_params(net)
    x = _as_batch(net, inputs)
    chunks = [_run(net, x[s:s + batch_size])[0] for s in range(0, x.shape[0], batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, net.arch.n_classes))


def predict(net: CnnNetwork, inputs) -> np.ndarray:
    return predict_proba(net, inputs).argmax(axis=1)


def extract_fc_features(net: CnnNetwork, inputs, batch_size: int = 256) -> np.ndarray:
    """Post-ReLU activations of the first fully connected layer.

    A single patch gives a 1-D vector; a batch gives (N, fc_units).
    """
    _require_params(net)
    single = np.ndim(inputs) == 2
    x = _as_batch(net, inputs)
    stop = net.arch.feature_layer()
    chunks = [_run(net, x[s:s + batch_size], stop)[0] for s in range(0, x.shape[0], batch_size)]
    feats = np.concatenate(chunks)
    return feats[0] if single else feats
