import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from delaysmp.backward_solvers import (ExactMean, RegressionBasis, martingale_residual, projectors,
                                       solve_bsde, solve_bsvie)
from delaysmp.errors import RegimeUnsupported, SingularRegression, UnsupportedDiagonal
from delaysmp.grid_paths import build_grid, sample_brownian


def _noise(P=4000, m=8, seed=3):
    g = build_grid(1.0, 0.5, m)
    W = sample_brownian(g, P, 1, seed)
    return g, W, W.path()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_projector_reproduces_basis_span(seed, a, b, c):
    F = np.random.default_rng(seed).standard_normal((200, 1))
    E = RegressionBasis(degree=2, ridge_scale=0.0).fit(F)
    Y = a + b * F[:, 0] + c * F[:, 0] ** 2
    np.testing.assert_allclose(E(Y), Y, atol=1e-9 * (1 + abs(a) + abs(b) + abs(c)))


def test_projector_idempotent_and_mean_preserving():
    rng = np.random.default_rng(0)
    F = rng.standard_normal((500, 2))
    E = RegressionBasis(degree=2, ridge_scale=0.0).fit(F)
    Y = np.sin(F[:, 0]) * F[:, 1] + rng.standard_normal(500)
    once = E(Y)
    np.testing.assert_allclose(E(once), once, atol=1e-10)
    assert abs(once.mean() - Y.mean()) < 1e-12


def test_constant_features_collapse_to_mean():
    E = RegressionBasis().fit(np.ones((10, 3)))
    assert isinstance(E, ExactMean)
    np.testing.assert_allclose(E(np.arange(10.0)), 4.5)


def test_too_few_paths():
    with pytest.raises(SingularRegression):
        RegressionBasis(degree=3).fit(np.random.default_rng(0).standard_normal((5, 3)))


def test_linear_bsde_regression():
    # y = W_T terminal, g = a y: y_k = (1 + a dt)^(n-k) W_k, z_k -> (1 + a dt)^(n-k-1)
    g, W, path = _noise()
    a = 0.7
    basis = RegressionBasis(degree=1, ridge_scale=0.0)
    sol = solve_bsde(path[:, -1, 0], lambda k, y, z: a * y, W, features=path, basis=basis)
    n = g.n_steps
    for k in (0, 5, n - 1):
        expected = (1 + a * g.dt) ** (n - k) * path[:, k, 0]
        # sample regression: exact only up to O(P^-1/2) coefficient noise
        assert np.sqrt(np.mean((sol.y.values[:, k, 0] - expected) ** 2)) < 0.05
    zmean = sol.z[:, :, 0, 0].mean(axis=0)
    zexact = (1 + a * g.dt) ** (n - 1 - np.arange(n))
    assert np.max(np.abs(zmean / zexact - 1)) < 0.05


def test_exact_mode():
    g, W, _ = _noise(P=3)
    sol = solve_bsde(np.full(3, 2.0), lambda k, y, z: -0.5 * y, W, mode="exact")
    assert np.allclose(sol.y0, 2.0 * (1 - 0.5 * g.dt) ** g.n_steps)
    with pytest.raises(RegimeUnsupported):
        solve_bsde(np.arange(3.0), lambda k, y, z: y, W, mode="exact")


def test_bsvie_regression_matches_exact_for_deterministic_data():
    g, W, path = _noise(P=300)
    n = g.n_steps
    psi = np.tile(np.linspace(1, 2, n + 1), (300, 1))
    g2 = lambda i, j, y, z: 0.3 * y + 0.1 * (j - i) * g.dt
    ex = solve_bsvie(psi, g2, W, mode="exact")
    rg = solve_bsvie(psi, g2, W, features=path, basis=RegressionBasis(degree=1))
    np.testing.assert_allclose(rg.y.values, ex.y.values, atol=1e-9)


def _martingale_residual(P):
    g, W, path = _noise(P=P)
    psi = np.repeat(path[:, -1:, 0], g.n_steps + 1, axis=1)
    proj = projectors(RegressionBasis(degree=1, ridge_scale=0.0), path)
    sol = solve_bsvie(psi, lambda i, j, y, z: 0.0 * y, W, proj=proj, fill_lower=True)
    assert np.sqrt(np.mean((sol.y.values[:, :, 0] - path[:, :, 0]) ** 2)) < 0.05
    return martingale_residual(sol, W, proj)


def test_bsvie_martingale_representation():
    # psi = W_T gives y'(t_i) = W_i; the residual is pure regression noise and shrinks like P^-1/2
    r1, r16 = _martingale_residual(1000), _martingale_residual(16000)
    assert r1 < 0.2 and r16 < 0.5 * r1


def test_bsvie_diagonal_needs_exact():
    g, W, path = _noise(P=50)
    with pytest.raises(UnsupportedDiagonal):
        solve_bsvie(np.zeros((50, g.n_steps + 1)), lambda i, j, y, z: y, W, features=path, uses_diagonal=True)
