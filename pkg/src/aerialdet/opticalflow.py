"""Dense Horn-Schunck optical flow and motion-mask extraction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DimensionError
from .imagecore import as_frame

# classic Horn-Schunck neighbourhood average: edges 1/6, corners 1/12
AVERAGE_KERNEL = np.array([[1 / 12, 1 / 6, 1 / 12],
                           [1 / 6, 0.0, 1 / 6],
                           [1 / 12, 1 / 6, 1 / 12]])


@dataclass(frozen=True)
class DerivativeField:
    ix: np.ndarray
    iy: np.ndarray
    it: np.ndarray

    @property
    def shape(self):
        return self.ix.shape


@dataclass(frozen=True)
class FlowField:
    h: np.ndarray
    v: np.ndarray

    @property
    def shape(self):
        return self.h.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.h, self.v)


@dataclass(frozen=True)
class HsConfig:
    alpha: float = 1.0
    max_iters: int = 100
    tol: float = 1e-4

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"hs.alpha must be > 0, got {self.alpha}")
        if self.max_iters < 1:
            raise ConfigError(f"hs.max_iters must be >= 1, got {self.max_iters}")
        if self.tol < 0:
            raise ConfigError(f"hs.tol must be >= 0, got {self.tol}")


@dataclass(frozen=True)
class MotionMaskConfig:
    k_sigma: float = 1.0
    compensate_global: bool = True

    def __post_init__(self):
        if self.k_sigma < 0:
            raise ConfigError(f"mask.k_sigma must be >= 0, got {self.k_sigma}")


def spatiotemporal_derivatives(prev, curr) -> DerivativeField:
    """Brightness derivatives from the 2x2x2 cube spanning both frames.

    Each derivative averages four first differences. The last row and
    column repeat the nearest valid difference.
    """
    e1 = as_frame(prev, "prev")
    e2 = as_frame(curr, "curr")
    if e1.shape != e2.shape:
        raise DimensionError(f"frame shapes differ: {e1.shape} vs {e2.shape}")
    height, width = e1.shape
    # degenerate 1-pixel axes: replicate so the stencil has a neighbour
    pad = ((0, max(0, 2 - height)), (0, max(0, 2 - width)))
    e1 = np.pad(e1, pad, mode="edge")
    e2 = np.pad(e2, pad, mode="edge")

    def corners(e):
        return e[:-1, :-1], e[:-1, 1:], e[1:, :-1], e[1:, 1:]

    a00, a01, a10, a11 = corners(e1)
    b00, b01, b10, b11 = corners(e2)
    ix = 0.25 * ((a01 - a00) + (a11 - a10) + (b01 - b00) + (b11 - b10))
    iy = 0.25 * ((a10 - a00) + (a11 - a01) + (b10 - b00) + (b11 - b01))
    it = 0.25 * ((b00 - a00) + (b01 - a01) + (b10 - a10) + (b11 - a11))

    def full(g):
        h0, w0 = g.shape
        g = np.pad(g, ((0, e1.shape[0] - h0), (0, e1.shape[1] - w0)), mode="edge")
        return g[:height, :width]

    if height < 2:
        iy = np.zeros_like(iy)
    if width < 2:
        ix = np.zeros_like(ix)
    return DerivativeField(full(ix), full(iy), full(it))


def neighborhood_average(f: np.ndarray) -> np.ndarray:
    return ndimage.correlate(f, AVERAGE_KERNEL, mode="nearest")


def horn_schunck(d: DerivativeField, cfg: HsConfig = HsConfig(), return_iterations: bool = False):
    """Jacobi iteration of the Horn-Schunck update from a zero initial flow.

    Stops after ``cfg.max_iters`` sweeps or once the mean of |dh| + |dv|
    falls below ``cfg.tol``.
    """
    ix, iy, it = d.ix, d.iy, d.it
    denom = cfg.alpha ** 2 + ix ** 2 + iy ** 2
    h = np.zeros_like(ix)
    v = np.zeros_like(ix)
    n_done = 0
    for n_done in range(1, cfg.max_iters + 1):
        h_bar = neighborhood_average(h)
        v_bar = neighborhood_average(v)
        common = (ix * h_bar + iy * v_bar + it) / denom
        h_new = h_bar - ix * common
        v_new = v_bar - iy * common
        delta = np.mean(np.abs(h_new - h) + np.abs(v_new - v))
        h, v = h_new, v_new
        if delta < cfg.tol:
            break
    flow = FlowField(h, v)
    if return_iterations:
        return flow, n_done
    return flow


def hs_energy(d: DerivativeField, flow: FlowField, alpha: float) -> float:
    """Discrete Horn-Schunck functional matching the update rule.

    Data term plus alpha^2/2 times the kernel-weighted squared differences
    between each pixel and its in-frame neighbours.
    """
    data = np.sum((d.it + d.ix * flow.h + d.iy * flow.v) ** 2)
    smooth = 0.0
    for f in (flow.h, flow.v):
        padded = np.pad(f, 1, mode="edge")
        rows, cols = f.shape
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                w = AVERAGE_KERNEL[dy + 1, dx + 1]
                if w == 0.0:
                    continue
                shifted = padded[1 + dy:1 + dy + rows, 1 + dx:1 + dx + cols]
                smooth += w * np.sum((f - shifted) ** 2)
    return float(data + 0.5 * alpha ** 2 * smooth)


def compensate_global_motion(f: FlowField) -> FlowField:
    """Remove camera motion by subtracting the per-component median flow."""
    return FlowField(f.h - np.median(f.h), f.v - np.median(f.v))


def motion_mask(f: FlowField, cfg: MotionMaskConfig = MotionMaskConfig()) -> np.ndarray:
    if cfg.compensate_global:
        f = compensate_global_motion(f)
    m = f.magnitude()
    threshold = m.mean() + cfg.k_sigma * m.std()
    return m > threshold


def estimate_flow(prev, curr, cfg: HsConfig = HsConfig()) -> FlowField:
    return horn_schunck(spatiotemporal_derivatives(prev, curr), cfg)
