import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aerialdet.errors import ConfigError, DimensionError
from aerialdet.opticalflow import (
    DerivativeField, FlowField, HsConfig, MotionMaskConfig, compensate_global_motion,
    estimate_flow, horn_schunck, hs_energy, motion_mask, neighborhood_average,
    spatiotemporal_derivatives,
)

seeds = st.integers(0, 2**31 - 1)


def ramp(width, height, offset=0.0):
    x = np.arange(width, dtype=float)
    return np.tile((x + offset) / width, (height, 1))


def _stencil_oracle(e1, e2):
    """Loop form of the 2x2x2 cube differences with edge-replicated last row/column."""
    H, W = e1.shape
    ix, iy, it = (np.zeros((H, W)) for _ in range(3))
    for y in range(H):
        for x in range(W):
            j, i = min(y, H - 2), min(x, W - 2)
            a = e1[j:j + 2, i:i + 2]
            b = e2[j:j + 2, i:i + 2]
            ix[y, x] = (a[0, 1] - a[0, 0] + a[1, 1] - a[1, 0] + b[0, 1] - b[0, 0] + b[1, 1] - b[1, 0]) / 4
            iy[y, x] = (a[1, 0] - a[0, 0] + a[1, 1] - a[0, 1] + b[1, 0] - b[0, 0] + b[1, 1] - b[0, 1]) / 4
            it[y, x] = (b - a).sum() / 4
    return ix, iy, it


# -- derivatives ------------------------------------------------------------

def test_identical_frames_have_zero_it(rng):
    f = rng.random((9, 11))
    assert not spatiotemporal_derivatives(f, f).it.any()


def test_ramp_derivatives():
    W = 20
    d = spatiotemporal_derivatives(ramp(W, 10), ramp(W, 10))
    assert np.allclose(d.ix, 1 / W, atol=1e-15) and not d.it.any() and not d.iy.any()
    shifted = spatiotemporal_derivatives(ramp(W, 10), ramp(W, 10, offset=-1))
    assert np.allclose(shifted.it[:-1, :-1], -1 / W, atol=1e-15)


@given(seeds, st.integers(2, 9), st.integers(2, 9))
def test_derivatives_match_loop_oracle(seed, h, w):
    r = np.random.default_rng(seed)
    e1, e2 = r.random((h, w)), r.random((h, w))
    d = spatiotemporal_derivatives(e1, e2)
    for got, want in zip((d.ix, d.iy, d.it), _stencil_oracle(e1, e2)):
        assert np.allclose(got, want, atol=1e-14)


def test_derivative_shape_mismatch():
    with pytest.raises(DimensionError):
        spatiotemporal_derivatives(np.zeros((3, 3)), np.zeros((3, 4)))


# -- Horn-Schunck -----------------------------------------------------------

def test_config_validation():
    for bad in (dict(alpha=0), dict(max_iters=0), dict(tol=-1)):
        with pytest.raises(ConfigError):
            HsConfig(**bad)
    with pytest.raises(ConfigError):
        MotionMaskConfig(k_sigma=-0.1)


def test_zero_it_gives_zero_flow(rng):
    d = DerivativeField(rng.normal(size=(6, 6)), rng.normal(size=(6, 6)), np.zeros((6, 6)))
    f = horn_schunck(d, HsConfig(1.0, 20, 0.0))
    assert not f.h.any() and not f.v.any()


def test_single_pixel_hand_update():
    d = DerivativeField(np.ones((1, 1)), np.zeros((1, 1)), -np.ones((1, 1)))
    f = horn_schunck(d, HsConfig(alpha=1.0, max_iters=1, tol=0.0))
    assert abs(f.h[0, 0] - 0.5) <= 1e-12 and f.v[0, 0] == 0.0


def test_ramp_follows_closed_form_rate():
    # uniform fields: the update reduces to 1 - h_k = (alpha^2 / (alpha^2 + ix^2))^k
    W, alpha, k = 64, 1.0, 500
    prev = ramp(W, 32, offset=1.0)
    curr = ramp(W, 32, offset=0.0)
    d = spatiotemporal_derivatives(prev, curr)
    assert np.allclose(d.ix, 1 / W) and np.allclose(d.it, -1 / W)
    f = horn_schunck(d, HsConfig(alpha, k, 0.0))
    expected = 1 - (alpha**2 / (alpha**2 + (1 / W) ** 2)) ** k
    assert np.allclose(f.h, expected, rtol=1e-10) and not f.v.any()


def test_ramp_with_small_alpha_recovers_unit_shift():
    W = 64
    d = spatiotemporal_derivatives(ramp(W, 16, offset=1.0), ramp(W, 16))
    f = horn_schunck(d, HsConfig(alpha=1 / W, max_iters=500, tol=0.0))
    assert 0.8 <= f.h.mean() <= 1.2 and np.abs(f.v).mean() < 0.2


def _averaging_matrix(H, W):
    n = H * W
    A = np.zeros((n, n))
    weights = {(-1, -1): 1 / 12, (-1, 1): 1 / 12, (1, -1): 1 / 12, (1, 1): 1 / 12,
               (-1, 0): 1 / 6, (1, 0): 1 / 6, (0, -1): 1 / 6, (0, 1): 1 / 6}
    for y in range(H):
        for x in range(W):
            for (dy, dx), w in weights.items():
                yy, xx = min(max(y + dy, 0), H - 1), min(max(x + dx, 0), W - 1)
                A[y * W + x, yy * W + xx] += w
    return A


def test_neighborhood_average_matches_matrix(rng):
    f = rng.random((5, 7))
    assert np.allclose(neighborhood_average(f).ravel(), _averaging_matrix(5, 7) @ f.ravel())


def test_converged_flow_matches_dense_solve():
    # fixpoint of the update: alpha^2 (I - A) h + ix (ix h + iy v + it) = 0, same for v
    r = np.random.default_rng(5)
    H, W, alpha = 6, 7, 1.0
    ix, iy, it = (r.normal(size=(H, W)) for _ in range(3))
    A = _averaging_matrix(H, W)
    L = alpha**2 * (np.eye(H * W) - A)
    X, Y, T = (np.diag(g.ravel()) for g in (ix, iy, it))
    M = np.block([[L + X @ X, X @ Y], [X @ Y, L + Y @ Y]])
    rhs = -np.concatenate([ix.ravel() * it.ravel(), iy.ravel() * it.ravel()])
    sol = np.linalg.solve(M, rhs)
    f = horn_schunck(DerivativeField(ix, iy, it), HsConfig(alpha, 20000, 1e-15))
    assert np.allclose(f.h.ravel(), sol[:H * W], atol=1e-8)
    assert np.allclose(f.v.ravel(), sol[H * W:], atol=1e-8)


def test_tolerance_stops_early():
    r = np.random.default_rng(0)
    d = DerivativeField(*(r.normal(size=(8, 8)) for _ in range(3)))
    _, n = horn_schunck(d, HsConfig(1.0, 5000, 1e-3), return_iterations=True)
    _, n_full = horn_schunck(d, HsConfig(1.0, 50, 0.0), return_iterations=True)
    assert 1 <= n < 5000 and n_full == 50


@given(seeds, st.floats(0.2, 3.0))
def test_energy_non_increasing(seed, alpha):
    r = np.random.default_rng(seed)
    d = DerivativeField(*(r.normal(size=(16, 16)) for _ in range(3)))
    energies = [hs_energy(d, horn_schunck(d, HsConfig(alpha, k, 0.0)), alpha) for k in range(1, 12)]
    assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(energies, energies[1:]))


@given(seeds, st.floats(-2, 2), st.floats(-2, 2))
def test_constant_consistent_flow_is_fixpoint(seed, h0, v0):
    r = np.random.default_rng(seed)
    ix, iy = r.normal(size=(7, 7)), r.normal(size=(7, 7))
    it = -(ix * h0 + iy * v0)
    # one sweep from the fixpoint: start the recursion by hand
    h_bar = neighborhood_average(np.full((7, 7), h0))
    v_bar = neighborhood_average(np.full((7, 7), v0))
    c = (ix * h_bar + iy * v_bar + it) / (1.0 + ix**2 + iy**2)
    assert np.allclose(h_bar - ix * c, h0, atol=1e-12) and np.allclose(v_bar - iy * c, v0, atol=1e-12)


@given(seeds, st.floats(0.1, 10.0))
def test_intensity_scaling_with_alpha(seed, c):
    r = np.random.default_rng(seed)
    e1, e2 = r.random((10, 10)), r.random((10, 10))
    a = estimate_flow(e1, e2, HsConfig(0.7, 30, 0.0))
    b = estimate_flow(c * e1, c * e2, HsConfig(0.7 * c, 30, 0.0))
    assert np.allclose(a.h, b.h, atol=1e-9) and np.allclose(a.v, b.v, atol=1e-9)


def test_noise_translation_recovers_shift():
    base = np.random.default_rng(0).random((64, 66))
    prev, curr = base[:, 1:65], base[:, 0:64]
    t0 = time.perf_counter()
    f = estimate_flow(prev, curr, HsConfig(1.0, 500, 0.0))
    assert time.perf_counter() - t0 < 5
    inner = (slice(4, -4), slice(4, -4))
    assert 0.8 <= f.h[inner].mean() <= 1.2 and np.abs(f.v[inner]).mean() < 0.2


# -- compensation and masks -------------------------------------------------

def test_uniform_flow_compensates_to_zero():
    f = compensate_global_motion(FlowField(np.full((5, 5), 2.0), np.full((5, 5), -1.0)))
    assert not f.h.any() and not f.v.any()
    z = compensate_global_motion(FlowField(np.zeros((3, 3)), np.zeros((3, 3))))
    assert not z.h.any()


def test_block_median_example():
    h = np.ones((100, 100))
    h[10:20, 30:40] = 4.0
    f = compensate_global_motion(FlowField(h, np.zeros_like(h)))
    assert np.all(f.h[10:20, 30:40] == 3.0)
    f.h[10:20, 30:40] = 0.0
    assert not f.h.any()


@given(seeds)
def test_compensation_idempotent(seed):
    r = np.random.default_rng(seed)
    f = FlowField(r.normal(size=(5, 5)), r.normal(size=(5, 5)))  # odd count: unique median
    once = compensate_global_motion(f)
    twice = compensate_global_motion(once)
    assert np.allclose(once.h, twice.h) and np.allclose(once.v, twice.v)


def test_mask_examples():
    zero = FlowField(np.zeros((6, 6)), np.zeros((6, 6)))
    assert not motion_mask(zero, MotionMaskConfig(1.0, False)).any()
    h = np.zeros((6, 6))
    h[2, 3] = 10.0
    m = motion_mask(FlowField(h, np.zeros_like(h)), MotionMaskConfig(1.0, False))
    assert m.sum() == 1 and m[2, 3]
    uniform = FlowField(np.full((6, 6), 3.0), np.full((6, 6), 1.0))
    assert not motion_mask(uniform, MotionMaskConfig(0.0, True)).any()
    assert motion_mask(uniform, MotionMaskConfig(0.0, False)).sum() == 0  # strict inequality
