"""Spike perturbations: first- and second-order variational states, their
Volterra lifts, the source functional I, the variational cost BSDE and the
pathwise differences of the perturbed and reference systems.

Every jump is computed as phi(X*, u_eps, mu_eps) - phi(X*, u*, mu*) at each
grid step. Because eps < delta the two spike windows never overlap, so the
jump vanishes off the windows without any explicit bookkeeping.
"""
from dataclasses import dataclass

import numpy as np

from .backward_solvers import ExactMean, RegressionBasis, is_deterministic, projectors, solve_bsde
from .errors import NonFinite, RegimeUnsupported
from .forward_solver import _features, simulate_sdde
from .grid_paths import PathMatrix, delay_weights, features_all


def _rows(a, P):
    a = np.asarray(a)
    return a if a.shape[0] == P else np.broadcast_to(a[:1], (P,) + a.shape[1:])


def _noise(star, W):
    return star.W if W is None else W


# ------------------------------------------------------------------ jumps

@dataclass
class Jumps:
    db: np.ndarray          # (P, n, nn) full jump of b
    ds: np.ndarray          # (P, n, nn, d)
    df: np.ndarray          # (P, n)
    dsX: np.ndarray         # (P, n, nn, d, q)
    ds1: np.ndarray         # u-part of the sigma jump (first window)
    ds2: np.ndarray         # mu-part (second window)
    df1: np.ndarray
    df2: np.ndarray
    db1: np.ndarray
    db2: np.ndarray


def coefficient_jumps(star, u_eps, P=None):
    """Jumps of b, sigma, f and sigma_X along the reference state."""
    model, grid = star.model, star.grid
    n, dt = grid.n_steps, grid.dt
    P = star.feats.shape[0] if P is None else P
    feats = _rows(star.feats, P)
    y, z = _rows(star.y, P), _rows(star.z, P)
    us, ue = star.u, u_eps
    nn, d, q = model.n, model.d, 3 * model.n
    out = {k: np.zeros((P, n) + s) for k, s in
           (("db", (nn,)), ("db1", (nn,)), ("db2", (nn,)), ("ds", (nn, d)), ("ds1", (nn, d)),
            ("ds2", (nn, d)), ("df", ()), ("df1", ()), ("df2", ()), ("dsX", (nn, d, q)))}
    for k in range(n):
        u0, m0, u1, m1 = us.at(k), us.mu_at(k), ue.at(k), ue.mu_at(k)
        du, dm = np.any(u1 != u0), np.any(m1 != m0)
        if not (du or dm):
            continue
        bc = lambda a: _rows(a, P)
        u0, m0, u1, m1 = bc(u0), bc(m0), bc(u1), bc(m1)
        t, X, yk, zk = k * dt, feats[:, k], y[:, k], z[:, k]
        b0, s0, f0 = model.b_at(t, X, u0, m0), model.sigma_at(t, X, u0, m0), model.f_at(t, X, yk, zk, u0, m0)
        if du:
            out["db1"][:, k] = model.b_at(t, X, u1, m0) - b0
            out["ds1"][:, k] = model.sigma_at(t, X, u1, m0) - s0
            out["df1"][:, k] = model.f_at(t, X, yk, zk, u1, m0) - f0
        if dm:
            out["db2"][:, k] = model.b_at(t, X, u0, m1) - b0
            out["ds2"][:, k] = model.sigma_at(t, X, u0, m1) - s0
            out["df2"][:, k] = model.f_at(t, X, yk, zk, u0, m1) - f0
        out["db"][:, k] = model.b_at(t, X, u1, m1) - b0
        out["ds"][:, k] = model.sigma_at(t, X, u1, m1) - s0
        out["df"][:, k] = model.f_at(t, X, yk, zk, u1, m1) - f0
        out["dsX"][:, k] = model.sigma_X(t, X, u1, m1) - model.sigma_X(t, X, u0, m0)
    return Jumps(**out)


# ------------------------------------------------------------------ variational states

def _linear_euler(star, W, src_b, src_s):
    """Euler scheme for dx = [b_X X + src_b] dt + sum_l [sigma_X^l X + src_s^l] dW^l, x = 0 on [-delta, 0]."""
    model, grid = star.model, star.grid
    n, m, dt, nn = grid.n_steps, grid.m_delay, grid.dt, model.n
    P = W.n_paths
    bX, sX = _rows(star.bX, P), _rows(star.sX, P)
    w = delay_weights(grid, model.kappa)
    dW = W.increments
    x = np.zeros((P, m + n + 1, nn))
    for k in range(n):
        X = _features(x, k, m, w, dt)
        drift = np.einsum("paq,pq->pa", bX[:, k], X) + src_b(k, X)
        vol = np.einsum("palq,pq->pal", sX[:, k], X) + src_s(k, X)
        x[:, k + m + 1] = x[:, k + m] + drift * dt + np.einsum("pal,pl->pa", vol, dW[:, k])
        if not np.all(np.isfinite(x[:, k + m + 1])):
            raise NonFinite(f"variational state became non-finite at index {k + 1}", index=k + 1)
    return PathMatrix(x, -m)


def solve_x1(star, u_eps, W=None, jumps=None):
    """First-order variational equation driven by the coefficient jumps."""
    W = _noise(star, W)
    J = jumps or coefficient_jumps(star, u_eps, W.n_paths)
    return _linear_euler(star, W, lambda k, X: J.db[:, k], lambda k, X: J.ds[:, k])


def solve_x2(star, x1, u_eps, W=None, jumps=None):
    """Second-order variational equation: Hessian sources in x1 plus the sigma_X jump acting on x1."""
    W = _noise(star, W)
    P = W.n_paths
    J = jumps or coefficient_jumps(star, u_eps, P)
    X1 = features_all(x1, star.grid, star.model.kappa)
    bXX, sXX = _rows(star.bXX, P), _rows(star.sXX, P)

    def src_b(k, X):
        return 0.5 * np.einsum("pabc,pb,pc->pa", bXX[:, k], X1[:, k], X1[:, k])

    def src_s(k, X):
        return (0.5 * np.einsum("palbc,pb,pc->pal", sXX[:, k], X1[:, k], X1[:, k])
                + np.einsum("palq,pq->pal", J.dsX[:, k], X1[:, k]))

    return _linear_euler(star, W, src_b, src_s)


# ------------------------------------------------------------------ Volterra lift

def lifted(x, grid, kappa):
    """(x, x_delta 1(t > delta), x_tilde) at k = 0..n."""
    X = features_all(x, grid, kappa)
    nn = x.values.shape[2]
    X[:, :grid.m_delay + 1, nn:2 * nn] = 0.0
    return X


def svie_residual(X, svie, src_b, src_s, W):
    """sup_i max_paths |X(t_i) - sum_{j<i} [A(i,j) X_j + B(i,j)] dt - sum_{j<i} [C(i,j) X_j + D(i,j)] dW_j|."""
    P, N1, q = X.shape
    n, m, nn = N1 - 1, svie.m, svie.nn
    A0, A1, C0, C1 = (_rows(a, P) for a in (svie.A0, svie.A1, svie.C0, svie.C1))
    dt = W.dt
    dW = W.increments
    Xl = X[:, :n]
    src = src_b * dt + np.einsum("pjal,pjl->pja", src_s, dW)
    inc0 = np.einsum("pjab,pjb->pja", A0, Xl) * dt + np.einsum("pjlab,pjb,pjl->pja", C0, Xl, dW)
    inc1 = np.einsum("pjab,pjb->pja", A1, Xl) * dt + np.einsum("pjlab,pjb,pjl->pja", C1, Xl, dW)
    inc0[..., :nn] += src
    inc1[..., nn:2 * nn] += src
    S0 = np.zeros((P, n + 1, q))
    S1 = np.zeros((P, n + 1, q))
    S0[:, 1:] = np.cumsum(inc0, axis=1)
    S1[:, 1:] = np.cumsum(inc1, axis=1)
    rhs = S0.copy()
    rhs[:, m + 1:] += S1[:, 1:n + 1 - m]
    return float(np.max(np.abs(X - rhs)))


@dataclass
class Lift:
    X1: np.ndarray          # (P, n+1, 3n)
    X2: np.ndarray
    residual1: float
    residual2: float


def lift_svie(star, x1, x2, u_eps, W=None, jumps=None, svie=None):
    """Stack the variational states and measure how well they satisfy the Volterra identities."""
    from .adjoints import build_svie_matrices
    W = _noise(star, W)
    P = W.n_paths
    grid, model = star.grid, star.model
    J = jumps or coefficient_jumps(star, u_eps, P)
    S = svie or build_svie_matrices(model, star.bX, star.sX, grid)
    X1 = lifted(x1, grid, model.kappa)
    X2 = lifted(x2, grid, model.kappa)
    r1 = svie_residual(X1, S, J.db, J.ds, W)
    F1 = features_all(x1, grid, model.kappa)[:, :-1]
    bXX, sXX = _rows(star.bXX, P), _rows(star.sXX, P)
    sb = 0.5 * np.einsum("pjabc,pjb,pjc->pja", bXX, F1, F1)
    ss = 0.5 * np.einsum("pjalbc,pjb,pjc->pjal", sXX, F1, F1) + np.einsum("pjalq,pjq->pjal", J.dsX, F1)
    r2 = svie_residual(X2, S, sb, ss, W)
    return Lift(X1, X2, r1, r2)


# ------------------------------------------------------------------ I and the variational BSDE

@dataclass
class IPath:
    values: np.ndarray      # (P, n)
    dG: np.ndarray          # first-window part
    dG_tilde: np.ndarray    # second-window part (after the t0 gate)
    quad1: np.ndarray
    quad2: np.ndarray


def big_I(star, pq, script_p, u_eps, gamma=None, t0=None, P=None, jumps=None):
    """I(t_k) from the G-jumps in both windows and the script-P weighted sigma jumps.

    Uses the strict (later-node) adjoint sums, which is what the discrete
    duality pairs with x1 and x2. ``script_p`` may be None when sigma does not
    depend on the control.
    """
    grid = star.grid
    n, nn = grid.n_steps, star.model.n
    if P is None:
        P = max(star.feats.shape[0], pq.p_hat.shape[0], u_eps.values.shape[0])
    J = jumps or coefficient_jumps(star, u_eps, P)
    Gam = _rows((gamma or star.Gamma).values, P)[:, :n]
    p = _rows(pq.p_hat, P)[:, :n]
    q = _rows(pq.q_hat, P)

    def dG(db, ds, df):
        return Gam * df + np.einsum("pka,pka->pk", p, db) + np.einsum("pkal,pkal->pk", q, ds)

    g1 = dG(J.db1, J.ds1, J.df1)
    g2 = dG(J.db2, J.ds2, J.df2)
    if t0 is not None and t0 > grid.T - grid.delta + 1e-12:
        g2 = np.zeros_like(g2)
    if script_p is None:
        if np.any(J.ds1) or np.any(J.ds2):
            raise RegimeUnsupported("sigma jumps need the script-P weight")
        q1 = q2 = np.zeros_like(g1)
    else:
        SP = np.asarray(script_p.strict if hasattr(script_p, "strict") else script_p)[:n]
        q1 = 0.5 * np.einsum("pkal,kab,pkbl->pk", J.ds1, SP, J.ds1)
        q2 = 0.5 * np.einsum("pkal,kab,pkbl->pk", J.ds2, SP, J.ds2)
        if t0 is not None and t0 > grid.T - grid.delta + 1e-12:
            q2 = np.zeros_like(q2)
    return IPath(g1 + g2 + q1 + q2, g1, g2, q1, q2)


def solve_hat_y(star, I, gamma=None, W=None, basis=None, proj=None):
    """Linear BSDE with driver f_y y + f_z . z + Gamma^{-1} I and zero terminal value."""
    W = _noise(star, W)
    grid = star.grid
    n = grid.n_steps
    vals = I.values if isinstance(I, IPath) else np.asarray(I, float)
    P = max(W.n_paths, vals.shape[0])
    Gam = _rows((gamma or star.Gamma).values, P)
    src = _rows(vals, P) / Gam[:, :n]
    fy, fz = _rows(star.fy, P), _rows(star.fz, P)
    det = all(is_deterministic(a) for a in (src, fy, fz))
    if P != W.n_paths:
        W = _broadcast_noise(W, P)

    def driver(k, y, z):
        return (fy[:, k, None] * y + np.einsum("pl,pml->pm", fz[:, k], z) + src[:, k, None])

    if det:
        return solve_bsde(np.zeros(P), driver, W, mode="exact")
    if proj is None:
        proj = star.proj if (basis is None and not star.deterministic) else projectors(
            basis or RegressionBasis(), _rows(star.feats, P))
    return solve_bsde(np.zeros(P), driver, W, proj=proj)


def _broadcast_noise(W, P):
    from .grid_paths import BrownianBundle
    return BrownianBundle(np.broadcast_to(W.increments[:1], (P,) + W.increments.shape[1:]), W.dt, W.seed,
                          W.antithetic)


# ------------------------------------------------------------------ perturbed system

@dataclass
class PerturbedDifferences:
    hat_y: np.ndarray       # (P, n+1) y_eps - y*
    hat_z: np.ndarray       # (P, n, d)
    x_eps: PathMatrix
    feats_eps: np.ndarray
    y_eps0: float
    y_star0: float


def _cost_solve(model, feats, u, W, grid, proj):
    P = feats.shape[0]
    ub = u.expand(P)

    def driver(k, y, z):
        return model.f_at(k * grid.dt, feats[:, k], y[:, 0], z[:, 0, :], ub.at(k), ub.mu_at(k))[:, None]

    return solve_bsde(model.h_at(feats[:, grid.n_steps]), driver, W, proj=proj)


def shared_projectors(feats_a, feats_b, basis=None):
    """One projector per step fitted on the union of two feature sets."""
    both = np.concatenate([feats_a, feats_b], axis=2)
    return projectors(basis or RegressionBasis(), both)


def perturbed_differences(star, u_eps, basis=None, x_eps=None):
    """Solve the perturbed system on the reference noise and difference the cost BSDEs.

    Both BSDEs use the same per-step projectors, so the regression error is a
    linear map applied to the difference itself.
    """
    model, grid, W = star.model, star.grid, star.W
    P = W.n_paths
    if x_eps is None:
        x_eps = simulate_sdde(model, u_eps, W, grid)
    fe = features_all(x_eps, grid, model.kappa)
    fs = _rows(star.feats, P)
    if is_deterministic(fe) and is_deterministic(fs):
        proj = [ExactMean()] * (grid.n_steps + 1)
    else:
        proj = shared_projectors(fs, fe, basis)
    se = _cost_solve(model, fe, u_eps, W, grid, proj)
    ss = _cost_solve(model, fs, star.u, W, grid, proj)
    hy = se.y.values[:, :, 0] - ss.y.values[:, :, 0]
    hz = se.z[:, :, 0, :] - ss.z[:, :, 0, :]
    return PerturbedDifferences(hy, hz, x_eps, fe, float(np.mean(se.y0)), float(np.mean(ss.y0)))


def pathwise_cost(model, u, W, grid, x=None):
    """h(X_T) + sum f dt per path; equals the cost BSDE value when f ignores (y, z)."""
    if x is None:
        x = simulate_sdde(model, u, W, grid)
    feats = features_all(x, grid, model.kappa)
    P = feats.shape[0]
    ub = u.expand(P)
    zero_y, zero_z = np.zeros(P), np.zeros((P, model.d))
    acc = model.h_at(feats[:, grid.n_steps]).astype(float)
    for k in range(grid.n_steps):
        acc = acc + model.f_at(k * grid.dt, feats[:, k], zero_y, zero_z, ub.at(k), ub.mu_at(k)) * grid.dt
    return acc


def expansion_residual(y_eps0, y_star0, hat_y0):
    """Signed remainder y_eps(0) - y*(0) - y_hat(0)."""
    return float(y_eps0) - float(y_star0) - float(hat_y0)


# ------------------------------------------------------------------ bundle

@dataclass
class VariationalBundle:
    x1: PathMatrix
    x2: PathMatrix
    X1: np.ndarray
    X2: np.ndarray
    I_path: IPath
    hat_y: object
    hat_y_eps: np.ndarray
    hat_z_eps: np.ndarray
    lift: Lift = None


def variational_bundle(star, u_eps, pq, script_p=None, t0=None, basis=None, differences=True):
    """Everything of the spike analysis for one (t0, eps) on the reference noise."""
    J = coefficient_jumps(star, u_eps, star.W.n_paths)
    x1 = solve_x1(star, u_eps, jumps=J)
    x2 = solve_x2(star, x1, u_eps, jumps=J)
    lift = lift_svie(star, x1, x2, u_eps, jumps=J)
    I = big_I(star, pq, script_p, u_eps, t0=t0, P=star.W.n_paths, jumps=J)
    hy = solve_hat_y(star, I, basis=basis)
    hye = hze = None
    if differences:
        pdiff = perturbed_differences(star, u_eps, basis)
        hye, hze = pdiff.hat_y, pdiff.hat_z
    return VariationalBundle(x1, x2, lift.X1, lift.X2, I, hy, hye, hze, lift)
