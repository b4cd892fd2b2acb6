"""Independent reference solutions: Riccati LQ, scenario-tree DP, method of steps,
exact discrete costates and dense Volterra fixed-point references.

Nothing here imports the adjoint or spike modules.
"""
import csv
import itertools
from dataclasses import dataclass
from math import factorial

import numpy as np
from scipy.integrate import solve_ivp

from .errors import RiccatiBlowup, TreeTooLarge

ORACLE_VERSION = "1"


# ------------------------------------------------------------------ Riccati LQ

@dataclass
class LqSolution:
    times: np.ndarray     # fine grid, ascending
    P: np.ndarray         # (N, n, n)
    psi: np.ndarray       # (N, n)
    c: np.ndarray         # (N,)
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    R: np.ndarray
    sigma0: np.ndarray
    J: float

    def _idx(self, t):
        h = self.times[1] - self.times[0]
        i = int(round(t / h))
        if abs(i * h - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not an oracle node")
        return i

    def value(self, t, x):
        i = self._idx(t)
        x = np.atleast_1d(x)
        return float(x @ self.P[i] @ x + 2 * self.psi[i] @ x + self.c[i])

    def gain(self, t):
        """(K, k0) with optimal feedback u = -(K x + k0)."""
        i = self._idx(t)
        P, psi = self.P[i], self.psi[i]
        S = self.R + self.D.T @ P @ self.D
        K = np.linalg.solve(S, self.B.T @ P + self.D.T @ P @ self.C)
        k0 = np.linalg.solve(S, self.B.T @ psi + self.D.T @ P @ self.sigma0)
        return K, k0

    def feedback(self, t, x):
        K, k0 = self.gain(t)
        x = np.atleast_2d(x)
        return -(x @ K.T + k0)


def lq_closed_form(A, B, C=0.0, D=0.0, Q=0.0, R=1.0, G=0.0, T=1.0, sigma0=0.0, x0=1.0, dt=None,
                   oracle_dt=None):
    """Riccati solution of min E[x(T)'G x(T) + int (x'Qx + u'Ru) dt] with
    dx = (Ax + Bu)dt + (sigma0 + Cx + Du)dW (one noise component).

    V(t, x) = x'P x + 2 psi'x + c. RK4 backward at ``oracle_dt`` (dt/16 by default).
    """
    A = np.atleast_2d(np.asarray(A, float))
    n = A.shape[0]
    B = np.asarray(B, float).reshape(n, -1)
    k = B.shape[1]
    C = np.broadcast_to(np.asarray(C, float), (n, n)).copy() if np.ndim(C) < 2 else np.asarray(C, float)
    D = np.asarray(D, float).reshape(n, k) if np.size(D) == n * k else np.full((n, k), float(D))
    Q = np.broadcast_to(np.asarray(Q, float), (n, n)).copy() if np.ndim(Q) < 2 else np.asarray(Q, float)
    R = np.broadcast_to(np.asarray(R, float), (k, k)).copy() if np.ndim(R) < 2 else np.asarray(R, float)
    G = np.broadcast_to(np.asarray(G, float), (n, n)).copy() if np.ndim(G) < 2 else np.asarray(G, float)
    if n == 1:
        C, Q, G = C.reshape(1, 1), Q.reshape(1, 1), G.reshape(1, 1)
    if n > 1:
        C = C if np.ndim(C) == 2 else C * np.eye(n)
    s0 = np.broadcast_to(np.asarray(sigma0, float), (n,)).copy()
    if oracle_dt is None:
        oracle_dt = (dt if dt is not None else T / 64) / 16
    N = int(round(T / oracle_dt))
    h = T / N

    def rhs(P, psi):
        S = R + D.T @ P @ D
        if not np.all(np.isfinite(S)) or np.any(np.linalg.eigvalsh(0.5 * (S + S.T)) <= 0):
            raise RiccatiBlowup("R + D'PD lost positive definiteness")
        L = P @ B + C.T @ P @ D
        m = B.T @ psi + D.T @ P @ s0
        Sinv = np.linalg.inv(S)
        dP = -(A.T @ P + P @ A + C.T @ P @ C + Q - L @ Sinv @ L.T)
        dpsi = -(A.T @ psi + C.T @ P @ s0 - L @ Sinv @ m)
        dc = -(s0 @ P @ s0 - m @ Sinv @ m)
        return dP, dpsi, dc

    Ps = np.empty((N + 1, n, n))
    psis = np.empty((N + 1, n))
    cs = np.empty(N + 1)
    P, psi, c = G.copy(), np.zeros(n), 0.0
    Ps[N], psis[N], cs[N] = P, psi, c
    for i in range(N, 0, -1):
        # integrate backward: y(t - h) = y(t) - h * y'
        k1 = rhs(P, psi)
        k2 = rhs(P - 0.5 * h * k1[0], psi - 0.5 * h * k1[1])
        k3 = rhs(P - 0.5 * h * k2[0], psi - 0.5 * h * k2[1])
        k4 = rhs(P - h * k3[0], psi - h * k3[1])
        P = P - h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        psi = psi - h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        c = c - h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        P = 0.5 * (P + P.T)
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(psi)) and np.isfinite(c)):
            raise RiccatiBlowup(f"Riccati solution non-finite at t={(i - 1) * h}")
        Ps[i - 1], psis[i - 1], cs[i - 1] = P, psi, c
    x0 = np.broadcast_to(np.asarray(x0, float), (n,))
    J = float(x0 @ Ps[0] @ x0 + 2 * psis[0] @ x0 + cs[0])
    return LqSolution(np.arange(N + 1) * h, Ps, psis, cs, A, B, C, D, R, s0, J)


# ------------------------------------------------------------------ scenario tree DP

def _tree_step_noise(branching, dt):
    if branching == 2:
        return np.array([-1.0, 1.0]) * np.sqrt(dt), np.array([0.5, 0.5])
    if branching == 3:
        return np.array([-1.0, 0.0, 1.0]) * np.sqrt(3 * dt), np.array([1 / 6, 2 / 3, 1 / 6])
    raise ValueError("branching must be 2 or 3")


@dataclass
class TreeResult:
    J: float
    policy: dict          # node key (tuple of noise indices) -> control value
    n_leaves: int


def dp_scenario_tree(model, grid, controls, branching=2, depth=None):
    """Exhaustive backward induction on a recombination-free scenario tree.

    The node key is the tuple of past noise branches; together with the
    controls chosen along the way it pins down the full history ring of
    (x, u) needed by the delay, so the augmented state is exact. At each node
    y_k = E_k[y_{k+1}] + f(t_k, X_k, y_{k+1}, z_k, u_k, mu_k) dt with
    z_k = E_k[y_{k+1} dW_k] / dt, minimized over ``controls``.
    """
    depth = grid.n_steps if depth is None else int(depth)
    if depth != grid.n_steps:
        raise ValueError("depth must equal grid.n_steps (the tree spans the horizon)")
    controls = [np.atleast_1d(np.asarray(c, float)) for c in controls]
    if depth > 6 or len(controls) > 5:
        raise TreeTooLarge("tree oracle is limited to depth <= 6 and at most 5 controls")
    leaves = (branching * len(controls)) ** depth
    if leaves > 10 ** 6:
        raise TreeTooLarge(f"{leaves} leaves exceed the 1e6 limit")
    dW, prob = _tree_step_noise(branching, grid.dt)
    m, dt = grid.m_delay, grid.dt
    xi = model.xi_path(grid)
    gam = model.gamma_path(grid)
    w = np.exp(model.kappa * (-grid.delta + np.arange(m) * dt))
    policy = {}

    def feats(xs):
        c = len(xs) - 1
        xt = dt * sum(w[j] * xs[c - m + j] for j in range(m))
        return np.concatenate([xs[c], xs[c - m], xt])[None]

    def solve(key, xs, us):
        k = len(key)
        X = feats(xs)
        if k == depth:
            return float(model.h_at(X)[0])
        best = None
        mu = us[len(us) - m]
        for u in controls:
            t = k * dt
            drift = model.b_at(t, X, u[None], mu[None])[0]
            vol = model.sigma_at(t, X, u[None], mu[None])[0]
            ys = np.array([solve(key + (b,), xs + [xs[-1] + drift * dt + vol[:, 0] * dW[b]], us + [u])
                           for b in range(branching)])
            Ey = float(prob @ ys)
            z = np.array([[float(prob @ (ys * dW)) / dt]])
            f = float(model.f_at(t, X, np.array([Ey]), z, u[None], mu[None])[0])
            val = Ey + f * dt
            if best is None or val < best[0] - 1e-15:
                best = (val, u)
        policy[key] = best[1]
        return best[0]

    xs0 = [row for row in xi]
    us0 = [row for row in gam]
    J = solve((), xs0, us0)
    return TreeResult(J, policy, leaves)


def dp_scenario_tree_levelwise(model, grid, controls, branching=2):
    """Same optimum as ``dp_scenario_tree`` but enumerated breadth-first:
    all (control path, noise path) histories are generated level by level and
    the minimization is folded back from the leaves."""
    controls = [np.atleast_1d(np.asarray(c, float)) for c in controls]
    depth = grid.n_steps
    if (branching * len(controls)) ** depth > 10 ** 6 or depth > 6:
        raise TreeTooLarge("tree too large")
    dW, prob = _tree_step_noise(branching, grid.dt)
    m, dt, nU = grid.m_delay, grid.dt, len(controls)
    w = np.exp(model.kappa * (-grid.delta + np.arange(m) * dt))
    U = np.stack(controls)                                   # (nU, k)
    # states: (L, hist, n) for L live histories; controls: (L, m + k, k)
    xs = model.xi_path(grid)[None]
    us = model.gamma_path(grid)[None]
    levels = []
    for k in range(depth):
        L = xs.shape[0]
        c = xs.shape[1] - 1
        xt = dt * np.einsum("j,ljn->ln", w, xs[:, c - m:c])
        X = np.concatenate([xs[:, c], xs[:, c - m], xt], axis=1)
        Xr = np.repeat(X, nU, axis=0)
        ur = np.tile(U, (L, 1))
        mur = np.repeat(us[:, us.shape[1] - m], nU, axis=0)
        drift = model.b_at(k * dt, Xr, ur, mur)
        vol = model.sigma_at(k * dt, Xr, ur, mur)[:, :, 0]
        levels.append((Xr, ur, mur))
        nxt = (xs[:, -1].repeat(nU, axis=0)[:, None, :] + (drift * dt)[:, None, :]
               + vol[:, None, :] * dW[None, :, None])        # (L*nU, b, n)
        xs = np.concatenate([np.repeat(np.repeat(xs, nU, axis=0)[:, None], branching, axis=1),
                             nxt[:, :, None, :]], axis=2).reshape(-1, xs.shape[1] + 1, xs.shape[2])
        us = np.repeat(np.concatenate([np.repeat(us, nU, axis=0), ur[:, None, :]], axis=1),
                       branching, axis=0)
    c = xs.shape[1] - 1
    xt = dt * np.einsum("j,ljn->ln", w, xs[:, c - m:c])
    vals = model.h_at(np.concatenate([xs[:, c], xs[:, c - m], xt], axis=1))
    for k in range(depth - 1, -1, -1):
        Xr, ur, mur = levels[k]
        ys = vals.reshape(-1, branching)                     # (L*nU, b)
        Ey = ys @ prob
        z = ((ys * dW) @ prob / dt)[:, None]
        f = model.f_at(k * dt, Xr, Ey, z, ur, mur)
        cand = (Ey + f * dt).reshape(-1, nU)
        vals = cand.min(axis=1)
    return float(vals[0])


# ------------------------------------------------------------------ method of steps

def delay_ode_closed_form(a, c, delta, t):
    """x' = a x(t - delta), x = c on [-delta, 0]:  x(t) = c sum_j a^j (t-(j-1)delta)_+^j / j!."""
    t = np.asarray(t, float)
    jmax = int(np.floor(np.max(t) / delta)) + 2
    out = np.zeros_like(t)
    for j in range(jmax + 1):
        s = np.clip(t - (j - 1) * delta, 0.0, None)
        out = out + a ** j * s ** j / factorial(j)
    return c * np.where(t >= 0, out, 1.0)


def method_of_steps_ode(a, a_delay, c, delta, T, fine_dt):
    """x' = a x + a_delay x(t - delta), constant history c, integrated interval by
    interval with a dense-output solver. Returns (times, values) on the grid k*fine_dt."""
    nint = int(np.ceil(T / delta - 1e-12))
    prev = lambda s: np.full_like(np.asarray(s, float), c)
    x_start = c
    pieces = []
    for k in range(nint):
        t0, t1 = k * delta, min((k + 1) * delta, T)
        fprev = prev
        sol = solve_ivp(lambda t, x, fp=fprev: a * x + a_delay * fp(t - delta), (t0, t1), [x_start],
                        rtol=1e-12, atol=1e-14, dense_output=True, method="DOP853")
        pieces.append((t0, t1, sol.sol))
        prev = (lambda s, f=sol.sol: np.asarray(f(s))[0])
        x_start = float(sol.y[0, -1])
    N = int(round(T / fine_dt))
    ts = np.arange(N + 1) * fine_dt
    xs = np.empty_like(ts)
    for i, t in enumerate(ts):
        for t0, t1, f in pieces:
            if t0 - 1e-14 <= t <= t1 + 1e-14:
                xs[i] = f(t)[0]
                break
    return ts, xs


# ------------------------------------------------------------------ exact discrete costates

@dataclass
class DiscreteLinearOptimum:
    pi: np.ndarray        # costate pi_i = dJ/dx_i, i = 0..n
    u: np.ndarray         # optimal u_k, k = 0..n-1
    J: float


def delayed_linear_cost_optimum(model, grid):
    """Exact optimum of the Euler-discretized scalar delayed problem with costs
    linear in (x, x_delta, x_tilde) and quadratic in (u, mu).

    The costate is the reverse-mode derivative of the discrete cost with respect
    to x_i, built directly from the recursion (no Volterra machinery).
    """
    p = model.params
    if model.n != 1 or model.k != 1:
        raise ValueError("scalar models only")
    if np.any(p["Q"]) or np.any(p["G"]) or np.any(p["Sx"]) or np.any(p["Sxu"]) or p["fy"] != 0.0:
        raise ValueError("oracle needs linear state costs, state-free diffusion and f_y = 0")
    a, ad, at = p["Ab"][0]
    beta, beta_mu = p["Bu"][0, 0], p["Bmu"][0, 0]
    q0, q1, q2 = p["q"]
    g0, g1, g2 = p["g"]
    R, r, Rmu, rmu = p["R"][0, 0], p["r"][0], p["Rmu"][0, 0], p["rmu"][0]
    n, m, dt = grid.n_steps, grid.m_delay, grid.dt
    w = np.exp(model.kappa * (-grid.delta + np.arange(m) * dt))
    direct = np.zeros(n + 1)
    direct[:n] += q0 * dt
    for i in range(n + 1):
        if i + m <= n - 1:
            direct[i] += q1 * dt
        for k in range(i + 1, min(i + m, n - 1) + 1):
            direct[i] += q2 * w[i - k + m] * dt * dt
        if n - m <= i <= n - 1:
            direct[i] += g2 * w[i - n + m] * dt
    direct[n] += g0
    direct[n - m] += g1
    pi = np.zeros(n + 1)
    for i in range(n, -1, -1):
        v = direct[i]
        if i <= n - 1:
            v += pi[i + 1] * (1 + a * dt)
        if i + m <= n - 1:
            v += pi[i + m + 1] * ad * dt
        for k in range(i + 1, min(i + m, n - 1) + 1):
            v += pi[k + 1] * at * w[i - k + m] * dt * dt
        pi[i] = v
    lo, hi = model.control_set.lower[0], model.control_set.upper[0]
    u = np.empty(n)
    for k in range(n):
        gate = k + m <= n - 1
        quad = R + (Rmu if gate else 0.0)
        lin = r + beta * pi[k + 1] + ((rmu + beta_mu * pi[k + m + 1]) if gate else 0.0)
        if quad <= 0:
            raise ValueError("control cost must be strictly convex")
        u[k] = np.clip(-lin / (2 * quad), lo, hi)
    # cost along the mean path (noise does not affect a linear functional)
    xi = model.xi_path(grid)[:, 0]
    gam = model.gamma_path(grid)[:, 0]
    uall = np.concatenate([gam, u])
    x = np.concatenate([xi, np.zeros(n)])
    J = 0.0
    for k in range(n):
        c = k + m
        xt = dt * float(w @ x[c - m:c])
        J += (q0 * x[c] + q1 * x[c - m] + q2 * xt + R * uall[c] ** 2 + r * uall[c]
              + Rmu * uall[k] ** 2 + rmu * uall[k]) * dt
        x[c + 1] = x[c] + (a * x[c] + ad * x[c - m] + at * xt + beta * uall[c] + beta_mu * uall[k]) * dt
    c = n + m
    J += g0 * x[c] + g1 * x[c - m] + g2 * dt * float(w @ x[c - m:c])
    return DiscreteLinearOptimum(pi, u, J)


# ------------------------------------------------------------------ dense Volterra references

@dataclass
class VolterraReference:
    times: np.ndarray     # (N+1,)
    eta: np.ndarray       # (N, q)
    P2: np.ndarray        # (N, q, q)
    P3: np.ndarray        # (N, q, q)
    P4: np.ndarray        # (N, N, q, q), zero diagonal
    iterations: int


def _kernels(bX, sX, times, n, d, kappa, delta, h, m):
    """A(t_i, s_j) and C^l(t_i, s_j) as dense (N+1, N, q, q) arrays (i = 0..N)."""
    N = len(times) - 1
    q = 3 * n
    I = np.eye(n)
    A = np.zeros((N + 1, N, q, q))
    C = np.zeros((N + 1, N, d, q, q))
    for j in range(N):
        s = times[j]
        Bx = bX(s)
        Sx = sX(s)
        for i in range(N + 1):
            gate = (i - j) > m
            A[i, j, :n] = Bx
            if gate:
                A[i, j, n:2 * n] = Bx
            A[i, j, 2 * n:, :n] = I
            A[i, j, 2 * n:, n:2 * n] = -np.exp(-kappa * delta) * I
            A[i, j, 2 * n:, 2 * n:] = -kappa * I
            for l in range(d):
                C[i, j, l, :n] = Sx[l]
                if gate:
                    C[i, j, l, n:2 * n] = Sx[l]
    return A, C


def dense_volterra_reference(bX, sX, Fbar, d2G, Gamma, Hbar, H, n, d, T, delta, kappa, N,
                             tol=1e-15, max_iter=400):
    """Deterministic first- and second-order adjoints by simultaneous fixed-point
    iteration of the full discrete Volterra system on an N-step grid.

    Coefficients are callables of time: bX(s) -> (n, 3n), sX(s) -> (d, n, 3n),
    Fbar(s) -> (3n,), d2G(s) -> (3n, 3n), Gamma(s) -> scalar. Strict sums over
    later nodes; the T-node enters only through A(T, .) and C(T, .).
    """
    h = T / N
    m = int(round(delta / h))
    times = np.arange(N + 1) * h
    q = 3 * n
    A, C = _kernels(bX, sX, times, n, d, kappa, delta, h, m)
    AT, CT = A[N], C[N]                                   # (N, q, q), (N, d, q, q)
    Ain = A[:N]                                           # A[theta, r] for theta < N
    Cin = C[:N]
    later = np.triu(np.ones((N, N)), 1).T                 # later[theta, r] = 1 if theta > r
    GT = Gamma(T)
    lam = GT * np.asarray(Hbar, float)
    P1 = GT * np.asarray(H, float)
    psi = np.stack([Gamma(times[j]) * np.asarray(Fbar(times[j]), float) for j in range(N)])
    M = np.stack([np.asarray(d2G(times[j]), float) for j in range(N)])

    # first order: eta_r = psi_r + A(T,r)' lam + sum_{theta>r} A(theta,r)' eta_theta h
    base = psi + np.einsum("rab,a->rb", AT, lam)
    eta = base.copy()
    it1 = 0
    for it1 in range(1, max_iter + 1):
        new = base + h * np.einsum("tr,trab,ta->rb", later, Ain, eta)
        done = np.max(np.abs(new - eta)) <= tol * max(1.0, np.max(np.abs(new)))
        eta = new
        if done:
            break

    # second order, all blocks iterated together
    baseP2 = np.einsum("rab,ac->rbc", AT, P1)
    P2 = baseP2.copy()
    for _ in range(max_iter):
        new = baseP2 + h * np.einsum("tr,trab,tac->rbc", later, Ain, P2)
        done = np.max(np.abs(new - P2)) <= tol * max(1.0, np.max(np.abs(new)))
        P2 = new
        if done:
            break
    base3 = M + np.einsum("rlab,ac,rlcd->rbd", CT, P1, CT)
    P3 = M.copy()
    P4 = np.zeros((N, N, q, q))
    offdiag = 1.0 - np.eye(N)
    it2 = 0
    for it2 in range(1, max_iter + 1):
        # (c): C-weighted single and double sums over later nodes
        term = np.zeros((N, q, q))
        for l in range(d):
            CTl = CT[:, l]                                # (r, q, q)
            Cl = Cin[:, :, l]                             # (theta, r, q, q)
            a2 = np.einsum("trba,tbc,rcd->trad", Cl, P2, CTl)         # C(theta,r)' P2(theta) C(T,r)
            a3 = np.einsum("trba,tbc,trcd->trad", Cl, P3, Cl)         # C(theta,r)' P3(theta) C(theta,r)
            a1 = np.einsum("rba,tcb,trcd->trad", CTl, P2, Cl)         # C(T,r)' P2(theta)' C(theta,r)
            term += h * np.einsum("tr,trad->rad", later, a1 + a2 + a3)
            term += h * h * np.einsum("tr,sr,ts,trba,stbc,srcd->rad", later, later, offdiag, Cl, P4, Cl,
                                      optimize=True)
        newP3 = base3 + term
        # (d) for theta > r, then symmetry
        lower = (np.einsum("rba,tcb->trac", AT, P2)                 # A(T,r)' P2(theta)'
                 + np.einsum("trba,tbc->trac", Ain, P3))            # A(theta,r)' P3(theta)
        tail = h * np.einsum("sr,ts,srba,tsbc->trac", later, offdiag, Ain, P4, optimize=True)
        newP4 = (lower + tail) * later[:, :, None, None]
        newP4 = newP4 + newP4.transpose(1, 0, 3, 2)
        ch = max(np.max(np.abs(newP3 - P3)), np.max(np.abs(newP4 - P4)))
        sc = max(1.0, np.max(np.abs(newP3)), np.max(np.abs(newP4)))
        P3, P4 = newP3, newP4
        if ch <= tol * sc:
            break
    return VolterraReference(times, eta, P2, P3, P4, max(it1, it2))


# ------------------------------------------------------------------ golden files

def write_golden(path, t, columns, oracle_version=ORACLE_VERSION):
    """CSV with header (t, <columns...>, oracle_version); full float precision."""
    names = list(columns)
    cols = [np.asarray(columns[k], float).ravel() for k in names]
    t = np.asarray(t, float).ravel()
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t"] + names + ["oracle_version"])
        for i in range(len(t)):
            wr.writerow([repr(float(t[i]))] + [repr(float(c[i])) for c in cols] + [oracle_version])


def read_golden(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.array([[float(v) for v in r[:-1]] for r in rows[1:]])
    out = {name: data[:, i] for i, name in enumerate(header[:-1])}
    out["oracle_version"] = rows[1][-1] if len(rows) > 1 else None
    return out
