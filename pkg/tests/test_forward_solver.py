import numpy as np
import pytest

from delaysmp.errors import NoConvergence, NonFinite
from delaysmp.forward_solver import (admissible_window, contraction_factor, picard_splice_solve,
                                     simulate_sdde, strong_error)
from delaysmp.grid_paths import build_grid, sample_brownian
from delaysmp.model_spec import constant_control
from delaysmp.models import affine_quadratic_model, delay_drift, get_model


def _ode_path(model, m):
    g = build_grid(model.T, model.delta, m)
    W = sample_brownian(g, 1, model.d, 0)
    x = simulate_sdde(model, constant_control(model, g, 0.0), W, g)
    return x.values[0, g.m_delay:, 0]


def test_pure_delay_matches_closed_form(golden):
    # dx = x(t - 1/2) dt on [0, 1.5] against the frozen piecewise polynomial
    gt = golden("method_of_steps")
    mdl = delay_drift(a=1.0, T=1.5, delta=0.5)
    errs = []
    for m in (16, 32):
        x = _ode_path(mdl, m)
        stride = 32 // m
        ref = gt["x_pure_delay"][::stride]
        errs.append(np.max(np.abs(x - ref)))
    assert errs[0] < 5 * (1 / 32) and errs[1] < 0.6 * errs[0]


def test_mixed_delay_ode(golden):
    gt = golden("method_of_steps")
    mdl = affine_quadratic_model("mos", T=1.5, delta=0.5, Ab=[-0.5, 1.0, 0.0], xi=1.0,
                                 regime="deterministic-affine")
    x = _ode_path(mdl, 32)
    assert np.max(np.abs(x - gt["x"])) < 5 * (1 / 64)


def test_picard_equals_euler():
    mdl = get_model("nonlinear_delay")
    g = build_grid(1.0, 0.5, 8)
    W = sample_brownian(g, 6, mdl.d, 4)
    u = constant_control(mdl, g, 0.2)
    xe = simulate_sdde(mdl, u, W, g)
    xp, its = picard_splice_solve(mdl, u, W, g, eps0=2 * g.dt, check_bound=False)
    assert np.max(np.abs(xe.values - xp.values)) < 1e-10
    assert all(i >= 1 for i in its)


def test_contraction_bound():
    assert contraction_factor(1.0, 0.0) == 0.0
    eps0 = admissible_window(1.0, 1 / 4096)
    assert contraction_factor(1.0, eps0) < 1.0
    assert contraction_factor(1.0, eps0 + 1 / 4096) >= 1.0
    mdl = get_model("nonlinear_delay")
    g = build_grid(1.0, 0.5, 8)
    with pytest.raises(NoConvergence):
        picard_splice_solve(mdl, constant_control(mdl, g, 0.0), sample_brownian(g, 1, mdl.d, 0), g, eps0=0.5)


def test_strong_error_self_is_zero():
    mdl = get_model("linear_delay")
    g = build_grid(1.0, 0.5, 8)
    W = sample_brownian(g, 4, 1, 0)
    x = simulate_sdde(mdl, constant_control(mdl, g, 0.0), W, g)
    assert strong_error(x, x) == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_state():
    mdl = affine_quadratic_model("boom", T=1.0, delta=0.5, Ab=[1e300, 0.0, 0.0], xi=1e10,
                                 regime="deterministic-affine")
    g = build_grid(1.0, 0.5, 4)
    with pytest.raises(NonFinite) as ei:
        simulate_sdde(mdl, constant_control(mdl, g, 0.0), sample_brownian(g, 1, 1, 0), g)
    assert ei.value.index is not None
