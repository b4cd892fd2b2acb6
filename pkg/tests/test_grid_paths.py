import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from delaysmp.errors import InvalidDelay, NonAlignedHorizon
from delaysmp.grid_paths import (PathMatrix, build_grid, distributed_delay_all, features_all,
                                 sample_brownian)


def test_grid_shapes():
    g = build_grid(1.0, 0.5, 8)
    assert g.dt == 1 / 16 and g.n_steps == 16
    assert g.times[0] == -0.5 and g.times[-1] == 1.0
    assert g.index_of(0.25) == 4


@pytest.mark.parametrize("T,delta,m,err", [(1.0, 0.0, 4, InvalidDelay), (1.0, 1.5, 4, InvalidDelay),
                                           (1.0, 0.3, 4, NonAlignedHorizon), (1.0, 0.5, 0, InvalidDelay)])
def test_grid_errors(T, delta, m, err):
    with pytest.raises(err):
        build_grid(T, delta, m)


def test_off_grid_time():
    with pytest.raises(NonAlignedHorizon):
        build_grid(1.0, 0.5, 4).index_of(0.1)


def test_paths_do_not_depend_on_count():
    g = build_grid(1.0, 0.5, 4)
    a = sample_brownian(g, 3, 2, seed=9).increments
    b = sample_brownian(g, 10, 2, seed=9).increments
    assert np.array_equal(a, b[:3])
    assert not np.array_equal(a, sample_brownian(g, 3, 2, seed=10).increments)


def test_antithetic_pairs():
    g = build_grid(1.0, 0.5, 4)
    w = sample_brownian(g, 6, 1, seed=1, antithetic=True).increments
    assert np.array_equal(w[0::2], -w[1::2])
    with pytest.raises(ValueError):
        sample_brownian(g, 5, 1, seed=1, antithetic=True)


def test_increment_variance():
    g = build_grid(1.0, 0.5, 8)
    w = sample_brownian(g, 4000, 1, seed=2).increments
    assert abs(w.var() / g.dt - 1) < 0.03


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(0, 1000))
def test_coarsen_keeps_endpoint(m, factor, seed):
    g = build_grid(1.0, 0.5, 4 * m)
    W = sample_brownian(g, 3, 1, seed)
    C = W.coarsen(factor)
    assert C.n_steps * factor == W.n_steps
    np.testing.assert_allclose(C.path()[:, -1], W.path()[:, -1], atol=1e-12)


def test_distributed_delay_of_constant():
    # left-rectangle sum of e^{-kappa s} over [0, delta) against the exact integral
    g = build_grid(1.0, 0.5, 64)
    kappa, c = 0.7, 2.0
    x = PathMatrix(np.full((1, g.m_delay + g.n_steps + 1, 1), c), -g.m_delay)
    xt = distributed_delay_all(x, kappa, g)
    exact = c * (1 - np.exp(-kappa * g.delta)) / kappa
    assert abs(float(np.ravel(xt)[-1]) - exact) < 2 * g.dt * c


def test_features_layout():
    g = build_grid(1.0, 0.5, 4)
    vals = np.arange(g.m_delay + g.n_steps + 1, dtype=float)[None, :, None]
    X = features_all(PathMatrix(vals, -g.m_delay), g, 0.0)
    k = 5
    assert X[0, k, 0] == vals[0, k + g.m_delay, 0]
    assert X[0, k, 1] == vals[0, k, 0]
