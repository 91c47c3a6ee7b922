"""Extreme learning machines and the hierarchical (H-ELM) stack.

An ELM has a random sigmoid hidden layer and ridge-solved output
weights. The H-ELM stacks two sparse ELM autoencoders, whose weights
come from an l1-regularised least-squares fit solved with FISTA, in
front of a wide ELM classifier.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import expit

from .errors import ConfigError, DimensionError, NumericError


@dataclass(frozen=True)
class RandomLayer:
    W: np.ndarray  # (L, d)
    b: np.ndarray  # (L,)
    seed: int = 0

    @property
    def n_hidden(self) -> int:
        return self.W.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.W.shape[1]


def make_random_layer(n_inputs: int, n_hidden: int, seed: int) -> RandomLayer:
    if n_hidden < 1 or n_inputs < 1:
        raise ConfigError("random layer needs at least one input and one hidden node")
    rng = np.random.default_rng(seed)
    W = rng.uniform(-1.0, 1.0, size=(n_hidden, n_inputs))
    b = rng.uniform(-1.0, 1.0, size=n_hidden)
    return RandomLayer(W, b, seed)


def random_hidden_output(layer: RandomLayer, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != layer.n_inputs:
        raise DimensionError(f"input has {X.shape[1]} columns, layer expects {layer.n_inputs}")
    return expit(X @ layer.W.T + layer.b)


def elm_train(U, T, lambda_reg: float) -> np.ndarray:
    """Ridge output weights, inverting whichever Gram matrix is smaller.

    N <= L:  beta = U^T (I/lambda + U U^T)^-1 T
    N >  L:  beta = (I/lambda + U^T U)^-1 U^T T
    """
    if not lambda_reg > 0:
        raise ConfigError(f"lambda_reg must be > 0, got {lambda_reg}")
    U = np.asarray(U, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if T.ndim == 1:
        T = T[:, None]
    if U.shape[0] != T.shape[0]:
        raise DimensionError(f"U has {U.shape[0]} rows but T has {T.shape[0]}")
    if not (np.all(np.isfinite(U)) and np.all(np.isfinite(T))):
        raise NumericError("non-finite values in ELM training data")
    n, n_hidden = U.shape
    ridge = 1.0 / lambda_reg
    try:
        if n <= n_hidden:
            gram = U @ U.T
            gram[np.diag_indices_from(gram)] += ridge
            beta = U.T @ scipy.linalg.solve(gram, T, assume_a="pos")
        else:
            gram = U.T @ U
            gram[np.diag_indices_from(gram)] += ridge
            beta = scipy.linalg.solve(gram, U.T @ T, assume_a="pos")
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"ridge solve failed: {exc}") from exc
    if not np.all(np.isfinite(beta)):
        raise NumericError("ridge solve produced non-finite output weights")
    # row-major so a reloaded model takes the same BLAS path
    return np.ascontiguousarray(beta)


@dataclass(frozen=True)
class ElmModel:
    layer: RandomLayer
    beta: np.ndarray  # (L, k)
    lambda_reg: float

    def __post_init__(self):
        if not self.lambda_reg > 0:
            raise ConfigError("lambda_reg must be > 0")


def elm_fit(X, labels, n_hidden: int, lambda_reg: float, seed: int, n_classes: int = 2) -> ElmModel:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    layer = make_random_layer(X.shape[1], n_hidden, seed)
    T = np.zeros((X.shape[0], n_classes))
    T[np.arange(X.shape[0]), np.asarray(labels, dtype=np.intp)] = 1.0
    return ElmModel(layer, elm_train(random_hidden_output(layer, X), T, lambda_reg), lambda_reg)


def elm_predict(model: ElmModel, X):
    """Scores (N, k) and argmax labels; ties resolve to the lower class."""
    scores = random_hidden_output(model.layer, X) @ model.beta
    return scores, scores.argmax(axis=1)


# -- FISTA ------------------------------------------------------------------

def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def largest_eigenvalue(gram: np.ndarray, n_iter: int = 100) -> float:
    """Power iteration on a symmetric PSD matrix from a fixed start vector."""
    vec = np.random.default_rng(0).standard_normal(gram.shape[0])
    vec /= np.linalg.norm(vec)
    value = 0.0
    for _ in range(n_iter):
        nxt = gram @ vec
        norm = np.linalg.norm(nxt)
        if norm == 0.0:
            return 0.0
        vec = nxt / norm
        value = float(vec @ gram @ vec)
    return value


def lasso_objective(H, X, B, l1_weight: float) -> float:
    """||H B - X||_F^2 + l1_weight * ||B||_1"""
    return float(np.sum((H @ B - X) ** 2) + l1_weight * np.sum(np.abs(B)))


def fista_solve(H, X, l1_weight: float, iters: int) -> np.ndarray:
    """Approximate argmin_B ||H B - X||_F^2 + l1_weight ||B||_1.

    Works on the halved objective so the gradient H^T(HB - X) has
    Lipschitz constant lambda_max(H^T H) and the shrinkage is l1_weight/2
    per unit step.
    """
    if iters < 1:
        raise ConfigError("fista iters must be >= 1")
    if l1_weight < 0:
        raise ConfigError("l1_weight must be >= 0")
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if H.shape[0] != X.shape[0]:
        raise DimensionError(f"H has {H.shape[0]} rows but X has {X.shape[0]}")
    n, n_atoms = H.shape
    gram = H.T @ H
    lip = largest_eigenvalue(gram)
    B = np.zeros((n_atoms, X.shape[1]))
    if lip <= 0.0:
        return B
    HtX = H.T @ X
    shrink = 0.5 * l1_weight / lip
    # pick the cheaper gradient route for this shape
    use_gram = n_atoms <= n

    def gradient(Y):
        if use_gram:
            return gram @ Y - HtX
        return H.T @ (H @ Y - X)

    Y = B
    t = 1.0
    for _ in range(iters):
        B_next = soft_threshold(Y - gradient(Y) / lip, shrink)
        t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        Y = B_next + ((t - 1.0) / t_next) * (B_next - B)
        B, t = B_next, t_next
    return B


# -- sparse autoencoder and H-ELM -------------------------------------------

@dataclass(frozen=True)
class SparseAutoencoder:
    beta: np.ndarray  # (n_hidden, d); encoding is X @ beta.T
    l1_weight: float
    fista_iters: int

    @property
    def n_hidden(self) -> int:
        return self.beta.shape[0]

    def encode(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.beta.shape[1]:
            raise DimensionError(f"input has {X.shape[1]} columns, encoder expects {self.beta.shape[1]}")
        return X @ self.beta.T


def train_sparse_autoencoder(X, n_hidden: int, l1_weight: float = 1e-3, iters: int = 50,
                             seed: int = 0) -> SparseAutoencoder:
    """Fit U @ B ~= X with FISTA, U being a random sigmoid projection of X."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] < 1:
        raise ConfigError("autoencoder needs at least one sample")
    layer = make_random_layer(X.shape[1], n_hidden, seed)
    U = random_hidden_output(layer, X)
    B = fista_solve(U, X, l1_weight, iters)
    return SparseAutoencoder(B, l1_weight, iters)


def fit_minmax(F: np.ndarray) -> np.ndarray:
    """Per-column (min, max) stacked as a (2, n) array."""
    return np.stack([F.min(axis=0), F.max(axis=0)])


def apply_minmax(F: np.ndarray, scale: np.ndarray) -> np.ndarray:
    lo, hi = scale
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = 2.0 * (F - lo) / safe - 1.0
    return np.where(span > 0, out, 0.0)


@dataclass(frozen=True)
class HelmConfig:
    patch_size: int = 100
    ae_hidden: tuple = (1000, 1000)
    clf_hidden: int = 12000
    lambda_reg: float = 1e3
    l1_weight: float = 1e-3
    fista_iters: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigError("helm patch_size must be >= 1")
        if len(self.ae_hidden) != 2 or min(self.ae_hidden) < 1:
            raise ConfigError("helm needs exactly two autoencoder widths >= 1")
        if self.clf_hidden < 1:
            raise ConfigError("helm clf_hidden must be >= 1")
        if not self.lambda_reg > 0:
            raise ConfigError("helm lambda_reg must be > 0")
        if self.l1_weight < 0 or self.fista_iters < 1:
            raise ConfigError("helm l1_weight must be >= 0 and fista_iters >= 1")


@dataclass
class HelmModel:
    ae1: SparseAutoencoder
    scale1: np.ndarray
    ae2: SparseAutoencoder
    scale2: np.ndarray
    classifier: ElmModel
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.ae1.beta.shape[1]

    def layer_sizes(self) -> tuple:
        return (self.input_dim, self.ae1.n_hidden, self.ae2.n_hidden,
                self.classifier.layer.n_hidden, self.classifier.beta.shape[1])

    def features(self, X) -> np.ndarray:
        f1 = apply_minmax(self.ae1.encode(X), self.scale1)
        return apply_minmax(self.ae2.encode(f1), self.scale2)


def _flatten_patches(patches, patch_size: int) -> np.ndarray:
    P = np.asarray(patches, dtype=np.float64)
    if P.ndim == 2 and P.shape == (patch_size, patch_size):
        P = P[None]
    if P.ndim == 3:
        if P.shape[1:] != (patch_size, patch_size):
            raise DimensionError(f"patches must be {patch_size}x{patch_size}, got {P.shape[1:]}")
        return P.reshape(P.shape[0], -1)
    if P.ndim == 2 and P.shape[1] == patch_size * patch_size:
        return P
    raise DimensionError(f"cannot interpret array of shape {P.shape} as {patch_size}x{patch_size} patches")


def helm_train(patches, labels, cfg: HelmConfig = HelmConfig()) -> HelmModel:
    """Layer-wise H-ELM training: two sparse autoencoders then a ridge ELM."""
    X = _flatten_patches(patches, cfg.patch_size)
    y = np.asarray(labels, dtype=np.intp)
    if y.shape[0] != X.shape[0]:
        raise DimensionError(f"{X.shape[0]} patches but {y.shape[0]} labels")
    if np.unique(y).size < 2:
        raise ConfigError("helm training needs both classes present")
    seeds = np.random.SeedSequence(cfg.seed).generate_state(3)
    ae1 = train_sparse_autoencoder(X, cfg.ae_hidden[0], cfg.l1_weight, cfg.fista_iters, int(seeds[0]))
    f1 = ae1.encode(X)
    scale1 = fit_minmax(f1)
    f1 = apply_minmax(f1, scale1)
    ae2 = train_sparse_autoencoder(f1, cfg.ae_hidden[1], cfg.l1_weight, cfg.fista_iters, int(seeds[1]))
    f2 = ae2.encode(f1)
    scale2 = fit_minmax(f2)
    f2 = apply_minmax(f2, scale2)
    clf = elm_fit(f2, y, cfg.clf_hidden, cfg.lambda_reg, int(seeds[2]))
    return HelmModel(ae1, scale1, ae2, scale2, clf, cfg.seed,
                     {"patch_size": cfg.patch_size, "l1_weight": cfg.l1_weight,
                      "fista_iters": cfg.fista_iters})


def helm_predict(model: HelmModel, patches):
    """Class scores (N, 2) and labels through both encoders and the ELM."""
    side = int(round(np.sqrt(model.input_dim)))
    X = _flatten_patches(patches, side)
    return elm_predict(model.classifier, model.features(X))
