import numpy as np
import pytest

from delaysmp.adjoints import (assemble_pq, assemble_script_p, classical_adjoints, deterministic_fields,
                               direct_script_p, doleans_gamma, gamma_eps, solve_first_order,
                               solve_second_order, star_data)
from delaysmp.backward_solvers import RegressionBasis
from delaysmp.errors import RegimeUnsupported
from delaysmp.experiments import quadrature_model
from delaysmp.grid_paths import build_grid, sample_brownian
from delaysmp.model_spec import constant_control
from delaysmp.models import get_model


@pytest.fixture(scope="module")
def quad_star():
    mdl = quadrature_model()
    g = build_grid(mdl.T, mdl.delta, 16)
    return star_data(mdl, constant_control(mdl, g, 0.0), sample_brownian(g, 2, mdl.d, 0), g)


def test_same_grid_match_with_dense_volterra(golden, quad_star):
    # both sides use left-rectangle sums on dt = 1/32, so they agree to rounding
    ref = golden("dense_volterra")
    f = deterministic_fields(quad_star)
    pairs = [(f["eta"][:, 0], "eta_x"), (f["eta"][:, 1], "eta_xd"), (f["eta"][:, 2], "eta_xt"),
             (f["P2"][:, 0, 0], "P2_00"), (f["P3"][:, 0, 0], "P3_00"), (f["P3"][:, 1, 1], "P3_11"),
             (f["P4"][0, :, 0, 0], "P4_row0_00")]
    for got, key in pairs:
        np.testing.assert_allclose(got, ref[key], atol=1e-12, err_msg=key)


def test_second_order_symmetry_and_script_p(quad_star):
    st = quad_star
    adj = solve_first_order(st, mode="exact")
    so = solve_second_order(st, assemble_pq(adj))
    assert so.symmetry_residual() <= 1e-10
    sp = assemble_script_p(so, st.Gamma, st.model, st.grid)
    for j in (0, 5, st.grid.n_steps - st.grid.m_delay - 1):
        direct = direct_script_p(so, st.Gamma, st.model, st.grid, j)
        np.testing.assert_allclose(sp.values[j], direct, atol=1e-10)


def test_doleans_gamma_deterministic():
    g = build_grid(1.0, 0.5, 8)
    W = sample_brownian(g, 3, 1, 0)
    G = doleans_gamma(-0.4, 0.0, W, g)
    exact = np.exp(-0.4 * np.arange(g.n_steps + 1) * g.dt)
    np.testing.assert_allclose(G.values, np.tile(exact, (3, 1)), rtol=1e-14)


def test_gamma_eps_without_perturbation_is_gamma():
    mdl = get_model("nonlinear_delay")
    g = build_grid(mdl.T, mdl.delta, 8)
    st = star_data(mdl, constant_control(mdl, g, 0.2), sample_brownian(g, 500, mdl.d, 1), g)
    P, n = 500, g.n_steps
    G = gamma_eps(st, st.feats, np.zeros((P, n + 1)), np.zeros((P, n, mdl.d)))
    np.testing.assert_allclose(G.values, np.broadcast_to(st.Gamma.values, G.values.shape), rtol=1e-12)


def test_classical_needs_delay_free_model(quad_star):
    with pytest.raises(RegimeUnsupported):
        classical_adjoints(quad_star)


def test_no_delay_matches_classical():
    mdl = get_model("lq_nodelay", C=0.4)
    g = build_grid(mdl.T, mdl.delta, 8)
    st = star_data(mdl, constant_control(mdl, g, 0.2), sample_brownian(g, 800, mdl.d, 2), g,
                   basis=RegressionBasis(ridge_scale=0.0))
    adj = solve_first_order(st)
    ca = classical_adjoints(st)
    Pc = ca.p.shape[0]
    assert np.max(np.abs(adj.p[:Pc] - ca.p)) < 1e-8
    assert np.max(np.abs(adj.q[:Pc] - ca.q)) < 1e-8
