"""Core containers: Q-weighted norms against a dense oracle, and the
three-point identity."""

import numpy as np
import pytest

from bilevel_tracking.containers import (
    DimensionMismatch,
    DualField,
    Grid2,
    MetricNotPositive,
    PdpsMetric,
    PrimalDualState,
    inner_product,
    q_form,
    q_norm,
)
from bilevel_tracking.linops import diff_operator, zero_operator


def random_state(n1, n2, rng):
    return PrimalDualState(
        Grid2(n1, n2, rng.standard_normal(n1 * n2)),
        DualField(n1, n2, rng.standard_normal(2 * n1 * n2)),
    )


def dense_q(metric, n1, n2):
    npix = n1 * n2
    dim = 3 * npix
    Q = np.zeros((dim, dim))
    Q[:npix, :npix] = np.eye(npix) / metric.tau_x
    Q[npix:, npix:] = np.eye(2 * npix) / (metric.omega * metric.tau_y)
    K = np.zeros((2 * npix, npix))
    for j in range(npix):
        e = np.zeros(npix)
        e[j] = 1.0
        K[:, j] = metric.K.apply(e.reshape(n1, n2)).ravel()
    Q[:npix, npix:] = -K.T
    Q[npix:, :npix] = -K
    return Q


def test_grid_validation():
    with pytest.raises(DimensionMismatch):
        Grid2(2, 3, np.zeros(5))
    with pytest.raises(ValueError):
        Grid2(2, 2, [1.0, np.inf, 0.0, 0.0])
    g = Grid2.from_array(np.arange(6.0).reshape(2, 3))
    assert g.matrix[1, 2] == 5.0


def test_dual_field_pixel_blocks():
    d = DualField(2, 2, np.arange(8.0))
    assert d.pairs.shape == (4, 2)
    assert np.all(d.pairs[3] == [6.0, 7.0])
    assert d.field.shape == (2, 2, 2)


def test_state_requires_matching_grids():
    with pytest.raises(DimensionMismatch):
        PrimalDualState(Grid2(2, 2, np.zeros(4)), DualField(2, 3, np.zeros(12)))


def test_inner_product_basics():
    assert inner_product(np.zeros(4), np.zeros(4)) == 0.0
    e1 = np.zeros(4)
    e1[0] = 1.0
    assert inner_product(e1, e1) == 1.0
    with pytest.raises(DimensionMismatch):
        inner_product(np.zeros(3), np.zeros(4))


def test_inner_product_matches_kahan_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a = rng.standard_normal(1000)
        b = rng.standard_normal(1000)
        # Kahan compensated summation as the independent reference
        s = c = 0.0
        for t in a * b:
            y = t - c
            tt = s + y
            c = (tt - s) - y
            s = tt
        assert abs(inner_product(a, b) - s) <= 1e-13 * max(1.0, abs(s))


def test_q_norm_zero_vector():
    metric = PdpsMetric(1.0, 1.0, 1.0, zero_operator(3, 3))
    u = PrimalDualState.zeros(3, 3)
    assert q_norm(u, metric) == 0.0


def test_q_norm_reduces_to_euclidean_without_coupling():
    metric = PdpsMetric(1.0, 1.0, 1.0, zero_operator(1, 2))
    u = PrimalDualState(Grid2(1, 2, [3.0, 4.0]), DualField(1, 2, np.zeros(4)))
    assert q_norm(u, metric) == pytest.approx(5.0, abs=1e-14)


def test_q_norm_matches_dense_quadratic_form():
    rng = np.random.default_rng(0)
    n1 = n2 = 4
    metric = PdpsMetric(0.354, 0.350, 1.0, diff_operator(n1, n2))
    Q = dense_q(metric, n1, n2)
    for _ in range(10):
        u = random_state(n1, n2, rng)
        flat = np.concatenate([u.x.values, u.y.values])
        expected = float(flat @ Q @ flat)
        assert q_norm(u, metric) ** 2 == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_three_point_identity():
    rng = np.random.default_rng(1)
    metric = PdpsMetric(0.354, 0.350, 1.0, diff_operator(4, 4))
    for _ in range(10):
        u = random_state(4, 4, rng)
        v = random_state(4, 4, rng)
        lhs = q_norm(u, metric) ** 2 + q_norm(v, metric) ** 2 - 2.0 * q_form(u, v, metric)
        rhs = q_norm(u - v, metric) ** 2
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_q_norm_absolutely_homogeneous():
    rng = np.random.default_rng(2)
    metric = PdpsMetric(0.354, 0.350, 1.0, diff_operator(4, 4))
    for _ in range(10):
        u = random_state(4, 4, rng)
        t = float(rng.uniform(-3, 3))
        assert q_norm(u.scaled(t), metric) == pytest.approx(
            abs(t) * q_norm(u, metric), rel=1e-12, abs=1e-12
        )


def test_q_norm_nonnegative_for_valid_steps():
    rng = np.random.default_rng(3)
    metric = PdpsMetric(0.354, 0.350, 1.0, diff_operator(4, 4))
    for _ in range(1000):
        assert q_norm(random_state(4, 4, rng), metric) >= 0.0


def test_q_norm_rejects_indefinite_metric():
    rng = np.random.default_rng(4)
    # tau_x * tau_y * ||K||^2 far above 1: indefinite form
    metric = PdpsMetric(5.0, 5.0, 1.0, diff_operator(4, 4))
    with pytest.raises(MetricNotPositive):
        for _ in range(50):
            q_norm(random_state(4, 4, rng), metric)


def test_q_norm_dimension_mismatch():
    metric = PdpsMetric(1.0, 1.0, 1.0, diff_operator(4, 4))
    with pytest.raises(DimensionMismatch):
        q_norm(PrimalDualState.zeros(3, 3), metric)
