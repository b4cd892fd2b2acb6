"""Doléans-Dade weight, Volterra lift matrices, first- and second-order adjoints,
the assembled (p, q) and script-P, epsilon-auxiliary variants and the delay-free
classical adjoints.

Index conventions on an n-step grid: a matrix path M has entries M[j] for
j = 0..n-1 (left points); the terminal index n carries P1, lambda(T) and H.
Stacked vectors live in R^{3n} as (x, x_delta, x_tilde).
"""
from dataclasses import dataclass, field

import numpy as np

from .backward_solvers import ExactMean, RegressionBasis, is_deterministic, projectors, solve_cost
from .errors import DimensionMismatch, RegimeUnsupported
from .forward_solver import simulate_sdde
from .grid_paths import PathMatrix, features_all


# ------------------------------------------------------------------ Gamma

@dataclass
class GammaPath:
    values: np.ndarray      # (P, n+1)
    drift: np.ndarray       # (P, n+1): sum f_y dt
    stoch: np.ndarray       # (P, n+1): sum f_z dW - 0.5 sum |f_z|^2 dt

    @property
    def T(self):
        return self.values[:, -1]

    def inverse(self):
        return np.exp(-(self.drift + self.stoch))


def doleans_gamma(fy, fz, W, grid):
    """Log-exact discrete exponential: exp(sum f_y dt + sum f_z dW - 0.5 sum |f_z|^2 dt)."""
    n, dt = grid.n_steps, grid.dt
    dW = W.increments
    P = dW.shape[0]
    fy = np.broadcast_to(np.asarray(fy, float), (P, n)) if np.ndim(fy) else np.full((P, n), float(fy))
    fz = np.asarray(fz, float)
    fz = np.broadcast_to(fz, (P, n, W.d)) if fz.ndim else np.full((P, n, W.d), float(fz))
    drift = np.zeros((P, n + 1))
    stoch = np.zeros((P, n + 1))
    drift[:, 1:] = np.cumsum(fy * dt, axis=1)
    stoch[:, 1:] = np.cumsum(np.sum(fz * dW, axis=2) - 0.5 * np.sum(fz ** 2, axis=2) * dt, axis=1)
    return GammaPath(np.exp(drift + stoch), drift, stoch)


# ------------------------------------------------------------------ reference data

@dataclass
class StarData:
    """Reference trajectory and every derivative the adjoints read along it."""
    model: object
    grid: object
    W: object
    u: object
    x: PathMatrix
    feats: np.ndarray       # (P, n+1, 3n)
    y: np.ndarray           # (P, n+1)
    z: np.ndarray           # (P, n, d)
    bX: np.ndarray          # (P, n, nn, q)
    sX: np.ndarray          # (P, n, nn, d, q)
    bXX: np.ndarray         # (P, n, nn, q, q)
    sXX: np.ndarray         # (P, n, nn, d, q, q)
    fX: np.ndarray          # (P, n, q)
    fXX: np.ndarray         # (P, n, q, q)
    fy: np.ndarray          # (P, n)
    fz: np.ndarray          # (P, n, d)
    hX: np.ndarray          # (P, q)
    hXX: np.ndarray         # (P, q, q)
    Gamma: GammaPath
    deterministic: bool
    proj: list = field(default=None, repr=False)


def along_path(model, x, u, W, grid, y, z, feats=None):
    """Derivatives of b, sigma, f, h along (x, y, z, u); y is (P, n+1), z is (P, n, d)."""
    feats = features_all(x, grid, model.kappa) if feats is None else feats
    P, n, dt = feats.shape[0], grid.n_steps, grid.dt
    ub = u.expand(P)
    out = {k: [] for k in ("bX", "sX", "bXX", "sXX", "fX", "fXX", "fy", "fz")}
    for k in range(n):
        t, X, uk, mk = k * dt, feats[:, k], ub.at(k), ub.mu_at(k)
        yk, zk = y[:, k], z[:, k]
        out["bX"].append(model.b_X(t, X, uk, mk))
        out["sX"].append(model.sigma_X(t, X, uk, mk))
        out["bXX"].append(model.b_XX(t, X, uk, mk))
        out["sXX"].append(model.sigma_XX(t, X, uk, mk))
        out["fX"].append(model.f_X(t, X, yk, zk, uk, mk))
        out["fXX"].append(model.f_XX(t, X, yk, zk, uk, mk))
        out["fy"].append(np.broadcast_to(model.f_y(t, X, yk, zk, uk, mk), (P,)))
        out["fz"].append(np.broadcast_to(model.f_z(t, X, yk, zk, uk, mk), (P, model.d)))
    arr = {k: np.stack(v, axis=1) for k, v in out.items()}
    arr["hX"] = model.h_X(feats[:, n])
    arr["hXX"] = model.h_XX(feats[:, n])
    return feats, arr


def star_data(model, u, W, grid, basis=None, mode="auto", x=None):
    """Forward solve, cost BSDE, derivative paths, Gamma and per-step projectors."""
    if x is None:
        x = simulate_sdde(model, u, W, grid)
    feats = features_all(x, grid, model.kappa)
    sol, _ = solve_cost(model, x, u, W, grid, basis, mode=mode, features=feats)
    y = sol.y.values[:, :, 0]
    z = sol.z[:, :, 0, :]
    feats, arr = along_path(model, x, u, W, grid, y, z, feats)
    Gam = doleans_gamma(arr["fy"], arr["fz"], W, grid)
    det = all(is_deterministic(a) for a in (feats, arr["bX"], arr["sX"], arr["bXX"], arr["sXX"],
                                            arr["fX"], arr["fXX"], Gam.values, arr["hX"], arr["hXX"]))
    if det:
        proj = [ExactMean()] * (grid.n_steps + 1)
    else:
        proj = projectors(basis or RegressionBasis(), feats)
    return StarData(model, grid, W, u.expand(W.n_paths), x, feats, y, z, Gamma=Gam, deterministic=det,
                    proj=proj, **arr)


# ------------------------------------------------------------------ SVIE matrices

@dataclass
class SvieMatrices:
    """A(t_i, s_j) = A0[j] + 1(i - j > m) A1[j];  C^l likewise with C0, C1."""
    A0: np.ndarray          # (P, n, q, q)
    A1: np.ndarray
    C0: np.ndarray          # (P, n, d, q, q)
    C1: np.ndarray
    m: int
    nn: int

    def gate(self, i, j):
        return (i - j) > self.m

    def A(self, i, j):
        return self.A0[:, j] + self.gate(i, j) * self.A1[:, j]

    def C(self, i, j):
        return self.C0[:, j] + self.gate(i, j) * self.C1[:, j]

    def Dtilde(self, i, j):
        """(3n, n) lift of an n-vector source at s_j into the equation for X(t_i)."""
        nn = self.nn
        D = np.zeros((3 * nn, nn))
        D[:nn] = np.eye(nn)
        if self.gate(i, j):
            D[nn:2 * nn] = np.eye(nn)
        return D

    def source(self, i, j, v):
        """Dtilde(i, j) @ v for v of shape (P, n) (spike sources B, D, B-bar, D-bar)."""
        return v @ self.Dtilde(i, j).T


def build_svie_matrices(model, bX, sX, grid):
    """Assemble the 3n-block kernels from b_X (P, n, nn, q) and sigma_X (P, n, nn, d, q)."""
    nn, q = model.n, 3 * model.n
    if bX.shape[-2:] != (nn, q) or sX.shape[-3:] != (nn, model.d, q):
        raise DimensionMismatch(f"derivative blocks {bX.shape}, {sX.shape} do not fit n={nn}, d={model.d}")
    P, n = bX.shape[:2]
    I = np.eye(nn)
    A0 = np.zeros((P, n, q, q))
    A1 = np.zeros((P, n, q, q))
    A0[:, :, :nn] = bX
    A1[:, :, nn:2 * nn] = bX
    A0[:, :, 2 * nn:, :nn] = I
    A0[:, :, 2 * nn:, nn:2 * nn] = -np.exp(-model.kappa * model.delta) * I
    A0[:, :, 2 * nn:, 2 * nn:] = -model.kappa * I
    sXl = np.moveaxis(sX, 3, 2)                      # (P, n, d, nn, q)
    C0 = np.zeros((P, n, model.d, q, q))
    C1 = np.zeros((P, n, model.d, q, q))
    C0[:, :, :, :nn] = sXl
    C1[:, :, :, nn:2 * nn] = sXl
    return SvieMatrices(A0, A1, C0, C1, grid.m_delay, nn)


# ------------------------------------------------------------------ first order

@dataclass
class FirstOrderAdjoint:
    lam: np.ndarray         # (P, n+1, q)
    nu: np.ndarray          # (P, n, q, d)
    eta: np.ndarray         # (P, n+1, q); eta[:, n] = 0
    zeta_sum: np.ndarray    # (P, n, q, d): sum_{i>j} zeta(i, j) dt, block 0 and gated block 1 kept whole
    p_hat: np.ndarray       # (P, n+1, nn) strict sums over later nodes
    q_hat: np.ndarray       # (P, n, nn, d)
    p: np.ndarray           # (P, n+1, nn) sums including the left node
    q: np.ndarray           # (P, n, nn, d)
    exact: bool

    def components(self, name):
        """Split a stacked field into its three n-blocks."""
        a = getattr(self, name)
        nn = a.shape[-1] // 3 if name in ("lam", "eta") else a.shape[-2] // 3
        ax = -1 if name in ("lam", "eta") else -2
        return np.split(a, [nn, 2 * nn], axis=ax)


@dataclass
class PqPair:
    p: np.ndarray           # (P, n+1, nn)
    q: np.ndarray           # (P, n, nn, d)
    p_hat: np.ndarray
    q_hat: np.ndarray


def _det_rows(arrs, mode):
    if mode == "exact":
        for a in arrs:
            if not is_deterministic(a):
                raise RegimeUnsupported("exact adjoints need deterministic coefficients along the path")
        return [a[:1] for a in arrs]
    return list(arrs)


def solve_first_order(star, gamma=None, mode="auto", basis=None, svie=None):
    """lambda-BSDE, then the eta-BSVIE backward in the free index with the lower
    martingale integrands zeta(i, j) = E_j[eta_i dW_j] / dt, then (p, q).

    ``gamma`` overrides star.Gamma (used for the epsilon-auxiliary and forced-one runs).
    """
    model, grid, W = star.model, star.grid, star.W
    n, m, dt, nn, d = grid.n_steps, grid.m_delay, grid.dt, model.n, model.d
    q3 = 3 * nn
    Gam = (gamma or star.Gamma).values
    if mode == "auto":
        mode = "exact" if (star.deterministic and is_deterministic(Gam)) else "regression"
    S = svie or build_svie_matrices(model, star.bX, star.sX, grid)
    A0, A1, C0, C1, fX, hX, Gam_ = _det_rows([S.A0, S.A1, S.C0, S.C1, star.fX, star.hX, Gam], mode)
    exact = mode == "exact"
    P = A0.shape[0] if exact else W.n_paths
    A0, A1, C0, C1, fX, hX, Gam_ = [np.broadcast_to(a, (P,) + a.shape[1:]) for a in (A0, A1, C0, C1, fX, hX, Gam_)]
    dW = W.increments[:P] if not exact else np.zeros((P, n, d))
    if exact:
        proj = [ExactMean()] * (n + 1)
    elif basis is not None:
        proj = projectors(basis, star.feats)
    else:
        proj = star.proj

    def cond_z(E, Y, k):
        if exact:
            return np.zeros(Y.shape + (d,))
        return E(Y[..., None] * dW[:, k, None, :]) / dt

    lam = np.empty((P, n + 1, q3))
    nu = np.zeros((P, n, q3, d))
    lam[:, n] = Gam_[:, n, None] * hX
    for k in range(n - 1, -1, -1):
        nu[:, k] = cond_z(proj[k], lam[:, k + 1], k)
        lam[:, k] = proj[k](lam[:, k + 1])

    eta = np.zeros((P, n + 1, q3))
    zsum = np.zeros((P, n, q3, d))
    p_hat = np.zeros((P, n + 1, nn))
    q_hat = np.zeros((P, n, nn, d))
    p = np.zeros((P, n + 1, nn))
    q = np.zeros((P, n, nn, d))
    S0 = np.zeros((P, q3))       # sum_{j < i < n} eta_i, projected step by step
    S1 = np.zeros((P, q3))       # sum_{j + m < i < n} eta_i, likewise
    T = lambda a: np.swapaxes(a, -1, -2)
    for j in range(n - 1, -1, -1):
        E = proj[j]
        gT = (n - j) > m
        AT = A0[:, j] + gT * A1[:, j]
        CT = C0[:, j] + gT * C1[:, j]                       # (P, d, q, q)
        ES0, ES1 = E(S0), E(S1)
        Z0, Z1 = cond_z(E, S0, j), cond_z(E, S1, j)         # (P, q, d)
        psi = Gam_[:, j, None] * fX[:, j] + np.einsum("pab,pa->pb", AT, lam[:, j])
        psi = psi + np.einsum("plab,pal->pb", CT, nu[:, j])
        acc = (np.einsum("pab,pa->pb", A0[:, j], ES0) + np.einsum("pab,pa->pb", A1[:, j], ES1)
               + np.einsum("plab,pal->pb", C0[:, j], Z0) + np.einsum("plab,pal->pb", C1[:, j], Z1))
        eta[:, j] = psi + acc * dt
        zsum[:, j] = (Z0 + Z1) * dt
        # strict (predicted) pair
        p_hat[:, j] = lam[:, j, :nn] + gT * lam[:, j, nn:2 * nn] + (ES0[:, :nn] + ES1[:, nn:2 * nn]) * dt
        q_hat[:, j] = nu[:, j, :nn] + gT * nu[:, j, nn:2 * nn] + (Z0[:, :nn] + Z1[:, nn:2 * nn]) * dt
        # sums including the left node: eta_j itself and the gated eta_{j+m}
        p[:, j] = p_hat[:, j] + eta[:, j, :nn] * dt
        q[:, j] = q_hat[:, j]
        if j + m <= n - 1:
            p[:, j] += E(eta[:, j + m, nn:2 * nn]) * dt
            q[:, j] += cond_z(E, eta[:, j + m, nn:2 * nn], j) * dt
        # carry projected running sums (tower property): same limit, lower variance,
        # and identical to the delay-free recursion when no delay terms are present
        S0 = ES0 + eta[:, j]
        S1 = ES1 + (eta[:, j + m] if j + m <= n - 1 else 0.0)
    p_hat[:, n] = lam[:, n, :nn]
    p[:, n] = lam[:, n, :nn]
    return FirstOrderAdjoint(lam, nu, eta, zsum, p_hat, q_hat, p, q, exact)


def assemble_pq(adj, grid=None):
    """Package the adjoint pair; the sums themselves are accumulated in solve_first_order."""
    return PqPair(adj.p, adj.q, adj.p_hat, adj.q_hat)


# ------------------------------------------------------------------ second order

@dataclass
class SecondOrderAdjoint:
    P1: np.ndarray          # (q, q)
    P2: np.ndarray          # (n, q, q)
    P3: np.ndarray          # (n, q, q)
    P4: np.ndarray          # (n, n, q, q); P4[a, b] = P4(t_a, t_b), zero diagonal
    d2G: np.ndarray         # (n, q, q)
    Q_blocks_zero: bool = True

    def symmetry_residual(self):
        return float(np.max(np.abs(self.P4 - np.transpose(self.P4, (1, 0, 3, 2))))) if self.P4.size else 0.0


def hessian_G(star, pq, gamma=None):
    """d^2 G / dX^2 = Gamma f_XX + sum_a p_a b_XX^a + sum_{a,l} q_{a,l} sigma_XX^{a,l} (strict p, q)."""
    P = pq.p_hat.shape[0]
    cut = (lambda a: a[:1]) if P == 1 else (lambda a: a)
    Gam = cut((gamma or star.Gamma).values)[:, :-1]
    out = Gam[..., None, None] * cut(star.fXX)
    out = out + np.einsum("pja,pjabc->pjbc", pq.p_hat[:, :-1], cut(star.bXX))
    out = out + np.einsum("pjal,pjalbc->pjbc", pq.q_hat, cut(star.sXX))
    return out


def solve_second_order(star, pq, gamma=None, svie=None):
    """P1..P4 by backward Volterra quadrature (deterministic regime only).

    Left-rectangle sums over later nodes; A(theta, r) = A0(r) + 1(theta - r > m) A1(r)
    lets every sum over theta split into two suffix sums, so the whole system
    costs O(n^2) block operations. P4 on the diagonal is set to zero.
    """
    model, grid = star.model, star.grid
    n, m, dt = grid.n_steps, grid.m_delay, grid.dt
    Gam = (gamma or star.Gamma).values
    S = svie or build_svie_matrices(model, star.bX, star.sX, grid)
    d2G = hessian_G(star, pq, gamma)
    for a in (S.A0, S.A1, S.C0, S.C1, Gam, star.hXX, d2G):
        if not is_deterministic(a):
            raise RegimeUnsupported("second-order adjoints are solved in the deterministic-affine regime only")
    A0, A1, C0, C1 = S.A0[0], S.A1[0], S.C0[0], S.C1[0]
    d2G = np.array(d2G[0])
    q3 = A0.shape[-1]
    d = C0.shape[1]
    has_C = bool(np.any(C0) or np.any(C1))
    P1 = Gam[0, n] * star.hXX[0]
    P2 = np.zeros((n, q3, q3))
    P3 = np.zeros((n, q3, q3))
    K = np.zeros((n, n, q3, q3))
    R0 = np.zeros((n, q3, q3))          # R0[t] = sum_{t' > r} K[t, t']
    R1 = np.zeros((n, q3, q3))          # R1[t] = sum_{t' > r + m} K[t, t']
    s2_0 = np.zeros((q3, q3))
    s2_1 = np.zeros((q3, q3))
    s3_0 = np.zeros((q3, q3))
    s3_1 = np.zeros((q3, q3))
    for r in range(n - 1, -1, -1):
        gT = (n - r) > m
        a0, a1 = A0[r], A1[r]
        AT = a0 + gT * a1
        P2[r] = AT.T @ P1 + (a0.T @ s2_0 + a1.T @ s2_1) * dt
        p3 = d2G[r].copy()
        if has_C:
            hi0 = slice(r + 1, n)
            hi1 = slice(min(r + m + 1, n), n)
            T00 = K[hi0, hi0].sum(axis=(0, 1))
            T01 = K[hi1, hi0].sum(axis=(0, 1))    # K[t2, t] with t2 > r + m, t > r
            T10 = K[hi0, hi1].sum(axis=(0, 1))
            T11 = K[hi1, hi1].sum(axis=(0, 1))
            for l in range(d):
                c0, c1 = C0[r, l], C1[r, l]
                CT = c0 + gT * c1
                p3 += CT.T @ P1 @ CT
                single = (CT.T @ (s2_0.T @ c0 + s2_1.T @ c1) + (c0.T @ s2_0 + c1.T @ s2_1) @ CT
                          + c0.T @ s3_0 @ c0 + c1.T @ s3_1 @ c0 + c0.T @ s3_1 @ c1 + c1.T @ s3_1 @ c1)
                double = c0.T @ T00 @ c0 + c1.T @ T10 @ c0 + c0.T @ T01 @ c1 + c1.T @ T11 @ c1
                p3 += single * dt + double * dt * dt
        P3[r] = p3
        if r + 1 < n:
            th = np.arange(r + 1, n)
            g = ((th - r) > m)[:, None, None]
            col = (np.einsum("ab,tcb->tac", AT.T, P2[r + 1:])             # A(T,r)' P2(theta)'
                   + np.einsum("ba,tbc->tac", a0, P3[r + 1:])
                   + g * np.einsum("ba,tbc->tac", a1, P3[r + 1:])         # A(theta,r)' P3(theta)
                   + (np.einsum("ba,tbc->tac", a0, R0[r + 1:])
                      + np.einsum("ba,tbc->tac", a1, R1[r + 1:])) * dt)
            K[r + 1:, r] = col
            K[r, r + 1:] = np.transpose(col, (0, 2, 1))
            R0[r + 1:] += col
            R0[r] = K[r, r + 1:].sum(axis=0)
            if r + m < n:
                R1[r + 1:] += K[r + 1:, r + m]
                R1[r] = K[r, r + m:].sum(axis=0)
        s2_0 += P2[r]
        s3_0 += P3[r]
        if r + m < n:
            s2_1 += P2[r + m]
            s3_1 += P3[r + m]
    return SecondOrderAdjoint(P1, P2, P3, K, d2G)


# ------------------------------------------------------------------ script P

@dataclass
class ScriptP:
    values: np.ndarray      # (n+1, nn, nn): sums including the left node (printed form)
    strict: np.ndarray      # (n+1, nn, nn): sums over later nodes only (discrete duality)
    forced: np.ndarray      # (n+1, nn, nn): printed form with the T - delta gate forced on
    m: int

    def gate_jump(self, j):
        return self.forced[j] - self.values[j]


def _suffix(X, n):
    """S[a] = sum_{l >= a} X[l] for a = 0..n+m safely (zero past the end)."""
    S = np.zeros((2 * n + 2,) + X.shape[1:])
    S[:n] = np.cumsum(X[::-1], axis=0)[::-1]
    return S


def _suffix2(K, n):
    """S2[b, a] = sum_{l' >= b, l >= a} K[l', l], padded with zeros."""
    S = np.zeros((2 * n + 2, 2 * n + 2) + K.shape[2:])
    c = np.cumsum(np.cumsum(K[::-1, ::-1], axis=0), axis=1)[::-1, ::-1]
    S[:n, :n] = c
    return S


def assemble_script_p(so, gamma, model, grid):
    """Block sums of the second-order adjoints with all T - delta gates."""
    n, m, dt, nn = grid.n_steps, grid.m_delay, grid.dt, model.n
    b0, b1 = slice(0, nn), slice(nn, 2 * nn)
    GT = float(np.asarray(gamma.values)[0, n])
    H = so.P1 / GT if GT != 0 else so.P1
    P2, P3, K = so.P2, so.P3, so.P4
    S2_00 = _suffix(P2[:, b0, b0], n)
    S2_10 = _suffix(P2[:, b1, b0], n)
    S2_01 = _suffix(P2[:, b0, b1], n)
    S2_11 = _suffix(P2[:, b1, b1], n)
    S3_00 = _suffix(P3[:, b0, b0], n)
    S3_g = _suffix(P3[:, b0, b1] + P3[:, b1, b0] + P3[:, b1, b1], n)
    # K[l', l] with rows of the block belonging to l (second argument)
    Q00 = _suffix2(K[:, :, b0, b0], n)
    Q10 = _suffix2(K[:, :, b1, b0], n)
    Q01 = _suffix2(K[:, :, b0, b1], n)
    Q11 = _suffix2(K[:, :, b1, b1], n)
    T = lambda a: np.swapaxes(a, -1, -2)

    def build(shift, force):
        out = np.zeros((n + 1, nn, nn))
        for j in range(n + 1):
            a, g = j + shift, j + m + shift
            gn = force or j < n - m
            v = GT * (H[b0, b0] + gn * (H[b0, b1] + H[b1, b0] + H[b1, b1]))
            p2 = S2_00[a] + S2_10[g] + gn * (S2_01[a] + S2_11[g])
            v = v + (p2 + T(p2)) * dt
            v = v + (S3_00[a] + S3_g[g]) * dt
            v = v + (Q00[a, a] + Q10[a, g] + Q01[g, a] + Q11[g, g]) * dt * dt
            out[j] = v
        return out

    return ScriptP(build(0, False), build(1, False), build(0, True), m)


def direct_script_p(so, gamma, model, grid, j, strict=False, force=False):
    """Brute-force block summation of script-P at one index (reference for tests);
    ``force`` switches the T - delta gate on regardless of j."""
    n, m, dt, nn = grid.n_steps, grid.m_delay, grid.dt, model.n
    lo = j + 1 if strict else j
    gn = force or j < n - m
    GT = float(np.asarray(gamma.values)[0, n])
    Dn = np.zeros((3 * nn, nn))
    Dn[:nn] = np.eye(nn)
    if gn:
        Dn[nn:2 * nn] = np.eye(nn)

    thr = j + m + (1 if strict else 0)

    def D(l):
        M = np.zeros((3 * nn, nn))
        M[:nn] = np.eye(nn)
        if l >= thr:
            M[nn:2 * nn] = np.eye(nn)
        return M

    v = Dn.T @ so.P1 @ Dn
    for l in range(lo, n):
        v = v + (D(l).T @ so.P2[l] @ Dn + Dn.T @ so.P2[l].T @ D(l)) * dt
        v = v + D(l).T @ so.P3[l] @ D(l) * dt
        for lp in range(lo, n):
            v = v + D(l).T @ so.P4[lp, l] @ D(lp) * dt * dt
    return v


# ------------------------------------------------------------------ epsilon-auxiliary

def gauss_legendre_average(fn, order=8):
    """int_0^1 fn(theta) d theta by fixed Gauss-Legendre nodes."""
    x, w = np.polynomial.legendre.leggauss(order)
    th = 0.5 * (x + 1.0)
    return sum(0.5 * wi * fn(ti) for ti, wi in zip(th, w))


def gamma_eps(star, x_feats, hat_y_eps, hat_z_eps, order=8):
    """Gamma^eps with f_y, f_z averaged over theta in the (y, z) slots only:
    state features ``x_feats`` of X* + X1 + X2, arguments (y* + theta y_hat^eps,
    z* + theta z_hat^eps) and the reference control."""
    model, grid, W = star.model, star.grid, star.W
    n, dt = grid.n_steps, grid.dt
    P = max(W.n_paths, x_feats.shape[0], hat_y_eps.shape[0])
    ub = star.u.expand(P)
    X = np.broadcast_to(x_feats, (P,) + x_feats.shape[1:])
    ys = np.broadcast_to(star.y, (P, n + 1))
    zs = np.broadcast_to(star.z, (P, n, model.d))

    def derivs(th):
        fy = np.empty((P, n))
        fz = np.empty((P, n, model.d))
        for k in range(n):
            yk = ys[:, k] + th * hat_y_eps[:, k]
            zk = zs[:, k] + th * hat_z_eps[:, k]
            uk, mk = ub.at(k), ub.mu_at(k)
            fy[:, k] = model.f_y(k * dt, X[:, k], yk, zk, uk, mk)
            fz[:, k] = model.f_z(k * dt, X[:, k], yk, zk, uk, mk)
        return np.concatenate([fy[..., None], fz], axis=2)

    avg = gauss_legendre_average(derivs, order)
    return doleans_gamma(avg[..., 0], avg[..., 1:], W, grid)


def auxiliary_eps_adjoints(star, x_feats, hat_y_eps, hat_z_eps, basis=None, mode="auto"):
    """Gamma^eps and the first-order adjoint rebuilt with it."""
    Gam_eps = gamma_eps(star, x_feats, hat_y_eps, hat_z_eps)
    adj = solve_first_order(star, gamma=Gam_eps, mode=mode, basis=basis)
    return Gam_eps, adj, assemble_pq(adj, star.grid)


# ------------------------------------------------------------------ classical (no delay)

@dataclass
class ClassicalAdjoints:
    p: np.ndarray           # (P, n+1, nn)
    q: np.ndarray           # (P, n, nn, d)
    P: np.ndarray           # (P, n+1, nn, nn)
    Q: np.ndarray           # (P, n, nn, nn, d)


def _no_delay_check(star):
    nn = star.model.n
    for a in (star.bX[..., nn:], star.sX[..., nn:], star.fX[..., nn:], star.hX[..., nn:]):
        if np.any(a != 0):
            raise RegimeUnsupported("classical adjoints need coefficients free of x_delta and x_tilde")


def classical_adjoints(star, gamma=None, exact=None):
    """Explicit backward schemes for the delay-free first- and second-order adjoints."""
    _no_delay_check(star)
    model, grid, W = star.model, star.grid, star.W
    n, dt, nn, d = grid.n_steps, grid.dt, model.n, model.d
    Gam = (gamma or star.Gamma).values
    exact = (star.deterministic and is_deterministic(Gam)) if exact is None else exact
    P = 1 if exact else W.n_paths
    sl = (lambda a: a[:1]) if exact else (lambda a: np.broadcast_to(a, (P,) + a.shape[1:]))
    bx = sl(star.bX)[..., :nn]                          # (P, n, nn, nn)
    sx = sl(star.sX)[..., :nn]                          # (P, n, nn, d, nn)
    bxx = sl(star.bXX)[..., :nn, :nn]
    sxx = sl(star.sXX)[..., :nn, :nn]
    fx = sl(star.fX)[..., :nn]
    fxx = sl(star.fXX)[..., :nn, :nn]
    G = sl(Gam)
    proj = [ExactMean()] * (n + 1) if exact else star.proj
    dW = np.zeros((P, n, d)) if exact else W.increments
    p = np.empty((P, n + 1, nn))
    q = np.zeros((P, n, nn, d))
    Pm = np.empty((P, n + 1, nn, nn))
    Q = np.zeros((P, n, nn, nn, d))
    p[:, n] = G[:, n, None] * sl(star.hX)[:, :nn]
    Pm[:, n] = G[:, n, None, None] * sl(star.hXX)[:, :nn, :nn]
    for k in range(n - 1, -1, -1):
        E = proj[k]
        pn, Pn = p[:, k + 1], Pm[:, k + 1]
        if not exact:
            q[:, k] = E(pn[..., None] * dW[:, k, None, :]) / dt
            Q[:, k] = E(Pn[..., None] * dW[:, k, None, None, :]) / dt
        sxl = np.moveaxis(sx[:, k], 2, 1)               # (P, d, nn, nn)
        drift = (np.einsum("pab,pa->pb", bx[:, k], pn) + np.einsum("plab,pal->pb", sxl, q[:, k])
                 + G[:, k, None] * fx[:, k])
        p[:, k] = E(pn + drift * dt)
        Gxx = (G[:, k, None, None] * fxx[:, k] + np.einsum("pa,pabc->pbc", pn, bxx[:, k])
               + np.einsum("pal,palbc->pbc", q[:, k], sxx[:, k]))
        T = lambda a: np.swapaxes(a, -1, -2)
        dP = np.einsum("pab,pac->pbc", bx[:, k], Pn) + Pn @ bx[:, k] + Gxx
        for l in range(d):
            s = sxl[:, l]
            dP = dP + T(s) @ Pn @ s + T(s) @ Q[:, k, :, :, l] + Q[:, k, :, :, l] @ s
        Pm[:, k] = E(Pn + dP * dt)
    return ClassicalAdjoints(p, q, Pm, Q)


@dataclass
class TransformReport:
    residual: float         # sup_k RMS of the per-unit-time defect of the transformed equation
    per_step: np.ndarray


def gamma_transform_check(ca, star, gamma=None):
    """Defect of the transformed first-order equation satisfied by p~ = p / Gamma,
    q~ = (q - p f_z) / Gamma, per unit time."""
    model, grid, W = star.model, star.grid, star.W
    n, dt, nn, d = grid.n_steps, grid.dt, model.n, model.d
    P = ca.p.shape[0]
    sl = lambda a: a[:1] if P == 1 else np.broadcast_to(a, (P,) + a.shape[1:])
    Gam = sl((gamma or star.Gamma).values)
    bx = sl(star.bX)[..., :nn]
    sx = np.moveaxis(sl(star.sX)[..., :nn], 3, 2)      # (P, n, d, nn, nn)
    fx = sl(star.fX)[..., :nn]
    fy = sl(star.fy)
    fz = sl(star.fz)
    proj = [ExactMean()] * (n + 1) if P == 1 else star.proj
    pt = ca.p / Gam[..., None]
    qt = (ca.q - ca.p[:, :n, :, None] * fz[:, :, None, :]) / Gam[:, :n, None, None]
    res = np.empty(n)
    for k in range(n):
        pn = pt[:, k + 1]
        drift = fy[:, k, None] * pn + np.einsum("pab,pa->pb", bx[:, k], pn) + fx[:, k]
        for l in range(d):
            drift = drift + fz[:, k, l, None] * np.einsum("pab,pa->pb", sx[:, k, l], pn)
            drift = drift + fz[:, k, l, None] * qt[:, k, :, l] + np.einsum("pab,pa->pb", sx[:, k, l], qt[:, k, :, l])
        r = pt[:, k] - proj[k](pn + drift * dt)
        res[k] = np.sqrt(np.mean(np.sum(r ** 2, axis=1))) / dt
    return TransformReport(float(np.max(res)), res)


# ------------------------------------------------------------------ extrapolation

def deterministic_fields(star):
    """(eta, P2, P3, P4, p, scriptP) of a deterministic instance, all at left nodes."""
    adj = solve_first_order(star, mode="exact")
    pq = assemble_pq(adj)
    so = solve_second_order(star, pq)
    sp = assemble_script_p(so, star.Gamma, star.model, star.grid)
    return dict(eta=adj.eta[0, :-1], p=adj.p[0, :-1], P2=so.P2, P3=so.P3, P4=so.P4,
                scriptP=sp.values[:-1])


def restrict_fields(fields, factor):
    """Sample fine-grid fields at the nodes of a grid ``factor`` times coarser."""
    out = {}
    for k, v in fields.items():
        out[k] = v[::factor, ::factor] if k == "P4" else v[::factor]
    return out


def romberg(levels):
    """Richardson tableau for first-order quadrature errors; ``levels`` are field
    dicts on grids dt, dt/2, dt/4, ... already restricted to the coarsest nodes."""
    rows = [dict(lv) for lv in levels]
    for order in range(1, len(rows)):
        w = 2.0 ** order
        rows = [{k: (w * b[k] - a[k]) / (w - 1.0) for k in a} for a, b in zip(rows[:-1], rows[1:])]
    return rows[0]


def extrapolated_fields(make_star, m_delay, levels=3):
    """Deterministic adjoint fields extrapolated over ``levels`` dyadic refinements.

    ``make_star(m)`` returns the StarData on the grid with m steps per delay.
    Left-rectangle sums carry an error expansion in powers of dt (the gate
    breakpoints sit on grid nodes), so each tableau column gains one order.
    """
    lv = [restrict_fields(deterministic_fields(make_star(m_delay * 2 ** i)), 2 ** i) for i in range(levels)]
    return romberg(lv)
