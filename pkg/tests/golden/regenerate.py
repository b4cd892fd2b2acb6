"""Regenerate the frozen oracle tables. Run only when an oracle changes on purpose
(and bump ORACLE_VERSION); the tests compare fresh oracle output against these files."""
import os

import numpy as np
from scipy.integrate import solve_ivp

from delaysmp.experiments import _dense_reference, quadrature_model
from delaysmp.oracles import delay_ode_closed_form, lq_closed_form, method_of_steps_ode, write_golden

HERE = os.path.dirname(os.path.abspath(__file__))


def riccati():
    # scalar Riccati with control in the diffusion
    sol = lq_closed_form(0.3, 1.0, 0.2, 0.4, 1.0, 1.0, 1.0, T=1.0, sigma0=0.3, x0=1.0, dt=1 / 32)
    idx = np.arange(0, len(sol.times), 16)
    return sol.times[idx], {"P": sol.P[idx, 0, 0], "psi": sol.psi[idx, 0], "c": sol.c[idx]}


def steps():
    ts, xs = method_of_steps_ode(-0.5, 1.0, 1.0, 0.5, 1.5, 1 / 64)
    return ts, {"x": xs, "x_pure_delay": delay_ode_closed_form(1.0, 1.0, 0.5, ts)}


def volterra():
    ref = _dense_reference(quadrature_model(), 32)
    return ref.times[:-1], {"eta_x": ref.eta[:, 0], "eta_xd": ref.eta[:, 1], "eta_xt": ref.eta[:, 2],
                            "P2_00": ref.P2[:, 0, 0], "P3_00": ref.P3[:, 0, 0], "P3_11": ref.P3[:, 1, 1],
                            "P4_row0_00": ref.P4[0, :, 0, 0]}


def scalar_riccati_ivp():
    """Independent check of the RK4 tables by scipy's adaptive integrator (C = D = 0)."""
    f = lambda t, p: -(2 * 0.3 * p + 1.0 - p * p)
    s = solve_ivp(f, (1.0, 0.0), [1.0], rtol=1e-12, atol=1e-14, dense_output=True)
    t = np.linspace(0, 1, 33)
    return t, {"P": s.sol(t)[0]}


if __name__ == "__main__":
    for name, fn in (("riccati", riccati), ("method_of_steps", steps), ("dense_volterra", volterra),
                     ("riccati_scipy", scalar_riccati_ivp)):
        t, cols = fn()
        write_golden(os.path.join(HERE, f"{name}.csv"), t, cols)
        print("wrote", name, len(t))
