import numpy as np
import pytest

from delaysmp.errors import EpsNotAligned, EpsNotLessThanDelta
from delaysmp.grid_paths import build_grid
from delaysmp.model_spec import box, constant_control, finite, spike_control, validate_assumptions
from delaysmp.models import BUILTINS, get_model


@pytest.mark.parametrize("name", sorted(BUILTINS))
def test_builtins_pass_assumption_checks(name):
    rep = validate_assumptions(get_model(name), n_samples=32)
    assert rep.passed, rep.violations
    assert rep.fd_mismatch < 1e-5


def test_unknown_model():
    with pytest.raises(KeyError):
        get_model("nope")


def test_control_sets():
    U = box([-1.0], [2.0])
    assert U.contains(np.array([[0.5]])).all()
    assert not U.contains(np.array([[2.5]])).any()
    np.testing.assert_array_equal(U.project(np.array([[3.0]])), [[2.0]])
    F = finite([[0.0], [1.0]])
    assert len(F.candidates()) == 2


def test_spike_control_window():
    m = get_model("lq_delay")
    g = build_grid(1.0, 0.5, 16)
    us = constant_control(m, g, 0.2)
    ue = spike_control(us, 0.9, 0.25, 0.125, g)
    vals = ue.values[0, g.m_delay:, 0]
    assert np.all(vals[8:12] == 0.9)
    assert np.all(np.delete(vals, range(8, 12)) == 0.2)
    assert ue.is_admissible(m, g)


@pytest.mark.parametrize("t0,eps,err", [(0.25, 0.05, EpsNotAligned), (0.25, 0.5, EpsNotLessThanDelta),
                                        (0.26, 0.125, EpsNotAligned), (0.0, -1.0, EpsNotAligned)])
def test_spike_errors(t0, eps, err):
    m = get_model("lq_delay")
    g = build_grid(1.0, 0.5, 16)
    with pytest.raises(err):
        spike_control(constant_control(m, g, 0.0), 1.0, t0, eps, g)


def test_with_params_overrides():
    m = get_model("linear_delay").with_params(T=2.0)
    assert m.T == 2.0
