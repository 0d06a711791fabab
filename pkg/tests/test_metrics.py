import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flocksim.metrics import (EmpiricalMeasure, HistogramGrid, exp_moment, free_transport, metric_t,
                              moment_q, tv_histogram, w1_exact)


def em(v, r=None, w=None):
    v = np.asarray(v, dtype=float).reshape(len(v), -1)
    r = np.zeros_like(v) if r is None else np.asarray(r, dtype=float).reshape(v.shape)
    return EmpiricalMeasure(r, v, w)


def random_em(rng, n, d=2, weighted=False):
    w = rng.dirichlet(np.ones(n)) if weighted else None
    return EmpiricalMeasure(rng.normal(size=(n, d)), rng.normal(size=(n, d)), w)


def test_weights_validated():
    with pytest.raises(ValueError):
        EmpiricalMeasure([[0.0]], [[0.0]], [0.5])
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.zeros((0, 1)), np.zeros((0, 1)))
    with pytest.raises(ValueError):
        EmpiricalMeasure([[0.0], [1.0]], [[0.0], [1.0]], [1.5, -0.5])


def test_moment_examples():
    assert moment_q(em([0.0]), 3.7) == 1.0
    assert moment_q(em([1.0]), 2) == pytest.approx(2.0)
    assert moment_q(em([0.0, 1.0]), 2) == pytest.approx(1.5)
    assert moment_q(em([4.0, -2.0]), 0) == 1.0


def test_moment_monotone_in_q():
    e = random_em(np.random.default_rng(0), 50)
    values = [moment_q(e, q) for q in np.linspace(0, 6, 13)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_exp_moment_examples():
    assert exp_moment(em([0.0]), 1.0, 1.0) == pytest.approx(math.e)
    assert exp_moment(em([3.0, 1.0]), 0.0, 1.0) == 1.0
    assert exp_moment(em([0.0, math.sqrt(3.0)]), 1.0, 1.0) == pytest.approx((math.e + math.e**2) / 2)


def test_free_transport_examples():
    moved = free_transport(em([1.0], r=[0.0]), 2.0)
    assert moved.positions[0, 0] == 2.0 and moved.velocities[0, 0] == 1.0
    e = em([0.5, -1.0], r=[1.0, 3.0])
    np.testing.assert_array_equal(free_transport(e, 0.0).positions, e.positions)
    back = free_transport(free_transport(e, 2.0), -2.0)
    np.testing.assert_array_equal(back.positions, e.positions)


def test_metric_examples():
    assert metric_t(([2.0], [1.0]), ([0.0], [0.0]), 2.0) == 1.0
    assert metric_t(([1.0, 0.0], [0.0, 0.0]), ([0.0, 0.0], [0.0, 3.0]), 0.0) == pytest.approx(4.0)
    assert metric_t(([1.0], [2.0]), ([1.0], [2.0]), 5.0) == 0.0


@given(st.floats(0, 20), st.integers(0, 10**6))
def test_metric_norm_sandwich(t, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    dt, d0 = metric_t(x, y, t), metric_t(x, y, 0.0)
    assert dt / (1 + t) <= d0 * (1 + 1e-12) and d0 <= (1 + t) * dt * (1 + 1e-12)


def test_w1_examples():
    rng = np.random.default_rng(1)
    a = random_em(rng, 20)
    assert w1_exact(a, a) == 0.0
    assert w1_exact(em([0.0]), em([1.0])) == 1.0
    assert w1_exact(em([0.0, 2.0]), em([1.0, 3.0])) == pytest.approx(1.0)


def test_w1_one_dimensional_sorted_coupling():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=40), rng.normal(1.0, 2.0, size=40)
    assert w1_exact(em(x), em(y)) == pytest.approx(np.mean(np.abs(np.sort(x) - np.sort(y))), abs=1e-12)


def test_w1_weighted_and_unequal_sizes():
    # unequal uniform measures: w1 between {0,1} and {0,0,1,1} duplicated atoms is 0
    assert w1_exact(em([0.0, 1.0]), em([0.0, 0.0, 1.0, 1.0])) == pytest.approx(0.0, abs=1e-12)
    assert w1_exact(em([0.0, 1.0], w=[0.25, 0.75]), em([0.0])) == pytest.approx(0.75)


def test_w1_symmetry_and_triangle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b, c = (random_em(rng, int(rng.integers(3, 25)), weighted=bool(rng.random() < 0.5)) for _ in range(3))
        t = float(rng.uniform(0, 3))
        ab, bc, ac = w1_exact(a, b, t), w1_exact(b, c, t), w1_exact(a, c, t)
        assert abs(ab - w1_exact(b, a, t)) <= 1e-9
        assert ac <= ab + bc + 1e-9


def test_shifted_distance_two_ways():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, b = random_em(rng, 30), random_em(rng, 30, weighted=bool(rng.random() < 0.5))
        t = float(rng.uniform(0, 5))
        direct = w1_exact(a, b, t)
        pulled = w1_exact(free_transport(a, -t), free_transport(b, -t), 0.0)
        assert abs(direct - pulled) <= 1e-9


def test_w1_dimension_mismatch():
    with pytest.raises(ValueError):
        w1_exact(em([0.0]), EmpiricalMeasure([[0.0, 0.0]], [[0.0, 0.0]]))


def test_tv_examples():
    a = em([0.0, 0.1, 0.2])
    assert tv_histogram(a, a) == 0.0
    grid = HistogramGrid((np.array([-1.0, 0.0, 1.0, 2.0]), np.array([-1.0, 0.5, 2.0])))
    p = em([0.0], r=[-0.5])
    q = em([0.0], r=[1.5])
    assert tv_histogram(p, q, grid) == 2.0
    half = em([0.0, 0.0], r=[-0.5, 0.5])
    other = em([0.0, 0.0], r=[-0.5, 1.5])
    assert tv_histogram(half, other, grid) == pytest.approx(1.0)


def test_tv_counts_mass_outside_grid():
    grid = HistogramGrid((np.array([0.0, 1.0]), np.array([0.0, 1.0])))
    inside = em([0.5], r=[0.5])
    outside = em([5.0], r=[5.0])
    est = tv_histogram(inside, outside, grid, detail=True)
    assert est.value == 2.0 and est.outside_mass == 1.0
    assert est.metadata["estimator"] == "histogram"


def test_default_grid_bin_rule():
    e = random_em(np.random.default_rng(5), 729, d=1)
    # 2d + 2 = 4 for d = 1: ceil(729 ** 0.25) = 6
    assert HistogramGrid.covering(e).bins_per_axis == (6, 6)


def test_tv_range():
    rng = np.random.default_rng(6)
    for _ in range(10):
        v = tv_histogram(random_em(rng, 40), random_em(rng, 60))
        assert 0.0 <= v <= 2.0
