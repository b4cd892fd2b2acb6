"""Least-squares Monte Carlo solvers for BSDEs and BSVIEs on the master grid."""
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from .errors import RegimeUnsupported, SingularRegression, UnsupportedDiagonal
from .grid_paths import PathMatrix

DET_TOL = 1e-12


# ------------------------------------------------------------------ regression

class Projector:
    """Ridge least-squares projection onto span(phi(features)) for one time step.

    The non-constant columns are centered so the intercept decouples (sample
    means are preserved and left unpenalized); the fit then runs through a thin
    SVD, which avoids squaring the condition number of the design.
    """

    def __init__(self, phi, ridge, cond):
        self.phi = phi
        self.cond = cond
        X = phi[:, 1:]
        self._mu = X.mean(axis=0)
        try:
            U, sv, Vt = np.linalg.svd(X - self._mu, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise SingularRegression(f"design decomposition failed ({exc})") from exc
        if not np.all(np.isfinite(sv)):
            raise SingularRegression("design matrix has non-finite entries")
        keep = sv > sv[0] * 1e-13 if sv.size else sv > 0
        if sv.size and (keep.sum() == 0 or (ridge == 0.0 and not keep.all())):
            raise SingularRegression("design matrix is rank deficient")
        self._U = U[:, keep]
        self._shrink = sv[keep] ** 2 / (sv[keep] ** 2 + ridge)
        self._coef_map = (Vt[keep].T * (sv[keep] / (sv[keep] ** 2 + ridge)))

    def coef(self, Y):
        """Coefficients on the raw design columns (constant first)."""
        flat = np.asarray(Y, float).reshape(len(self.phi), -1)
        mean = flat.mean(axis=0)
        beta = self._coef_map @ (self._U.T @ (flat - mean))
        c = np.vstack([mean - self._mu @ beta, beta])
        if not np.all(np.isfinite(c)):
            raise SingularRegression("regression produced non-finite coefficients")
        return c

    def __call__(self, Y):
        """Fitted values E_hat[Y | features], same shape as Y."""
        Y = np.asarray(Y, float)
        flat = Y.reshape(Y.shape[0], -1)
        mean = flat.mean(axis=0)
        fit = mean + self._U @ (self._shrink[:, None] * (self._U.T @ (flat - mean)))
        return fit.reshape(Y.shape)


class ExactMean:
    """Conditional expectation when the conditioning information is trivial."""
    cond = 1.0

    def __call__(self, Y):
        Y = np.asarray(Y, float)
        return np.broadcast_to(Y.mean(axis=0, keepdims=True), Y.shape).copy()


@dataclass
class RegressionBasis:
    """Polynomials of total degree <= ``degree`` in the selected feature columns.

    Features are standardized per step; columns with no cross-path spread are
    dropped, so at deterministic times the basis collapses to the constant.
    The ridge is ``ridge_scale * n_paths`` on every non-constant coefficient.
    """
    degree: int = 2
    ridge_scale: float = 1e-8
    columns: object = None
    conditioning: list = field(default_factory=list)

    def design(self, feats):
        F = np.asarray(feats, float)
        if F.ndim == 1:
            F = F[:, None]
        if self.columns is not None:
            F = F[:, list(self.columns)]
        P = F.shape[0]
        if F.shape[1]:
            mu = F.mean(axis=0)
            sd = F.std(axis=0)
            scale = np.maximum(np.abs(mu), 1.0)
            keep = sd > 1e-10 * scale
            F = (F[:, keep] - mu[keep]) / sd[keep]
        cols = [np.ones(P)]
        q = F.shape[1]
        for deg in range(1, self.degree + 1):
            for combo in combinations_with_replacement(range(q), deg):
                cols.append(np.prod(F[:, list(combo)], axis=1))
        return np.stack(cols, axis=1)

    def fit(self, feats):
        phi = self.design(feats)
        P = phi.shape[0]
        if phi.shape[1] == 1:
            self.conditioning.append(1.0)
            return ExactMean()
        if P < phi.shape[1]:
            raise SingularRegression(f"{P} paths cannot support {phi.shape[1]} basis functions")
        s = np.linalg.svd(phi / np.sqrt(P), compute_uv=False)
        cond = float(s[0] / max(s[-1], 1e-300))
        self.conditioning.append(cond)
        return Projector(phi, self.ridge_scale * P, cond)


def projectors(basis, features):
    """One projector per grid index of a (P, n+1, q) feature array."""
    return [basis.fit(features[:, k]) for k in range(features.shape[1])]


def _spread(a):
    a = np.asarray(a, float)
    return float(np.max(np.abs(a - a[:1]))) if a.size else 0.0


def is_deterministic(a, tol=DET_TOL):
    a = np.asarray(a, float)
    return _spread(a) <= tol * max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)


# ------------------------------------------------------------------ BSDE

@dataclass
class BsdeSolution:
    y: PathMatrix   # (P, n+1, m_y), first_index 0
    z: np.ndarray   # (P, n, m_y, d)

    @property
    def y0(self):
        return self.y.values[:, 0]


def solve_bsde(terminal, driver, W, features=None, basis=None, mode="regression",
               scheme="explicit", proj=None):
    """Backward regression scheme for y(t) = xi + int_t^T g ds - int_t^T z dW.

    ``driver(k, y, z)`` receives the grid index, y of shape (P, m) and z of
    shape (P, m, d) and returns (P, m); it may close over path features.
    ``terminal`` is (P,) or (P, m). In ``mode="exact"`` the terminal and the
    driver must be deterministic and every conditional expectation is exact.
    z_k is the regression of (y_{k+1} - E_k[y_{k+1}]) dW_k / dt.
    """
    xi = np.asarray(terminal, float)
    scalar = xi.ndim == 1
    if scalar:
        xi = xi[:, None]
    P, my = xi.shape
    n, d, dt = W.n_steps, W.d, W.dt
    dW = W.increments
    if mode == "exact":
        if not is_deterministic(xi):
            raise RegimeUnsupported("exact mode needs a deterministic terminal value")
        proj = [ExactMean()] * (n + 1)
    elif proj is None:
        if basis is None:
            basis = RegressionBasis()
        if features is None:
            raise ValueError("regression mode needs path features")
        proj = projectors(basis, features)
    y = np.empty((P, n + 1, my))
    z = np.zeros((P, n, my, d))
    y[:, n] = xi
    for k in range(n - 1, -1, -1):
        E = proj[k]
        ynext = y[:, k + 1]
        if mode == "exact":
            zk = np.zeros((P, my, d))
        else:
            # centering by E_k[y_{k+1}] keeps the mean and removes most of the variance
            zk = E((ynext - E(ynext))[:, :, None] * dW[:, k, None, :]) / dt
        g = np.asarray(driver(k, ynext, zk), float).reshape(P, my)
        if mode == "exact" and not is_deterministic(g):
            raise RegimeUnsupported(f"driver is random at step {k}; exact mode unavailable")
        yk = E(ynext + g * dt)
        if scheme == "implicit":
            base = E(ynext)
            yk = base + np.asarray(driver(k, yk, zk), float).reshape(P, my) * dt
        z[:, k] = zk
        y[:, k] = yk
    return BsdeSolution(PathMatrix(y, 0), z)


def solve_cost(model, x, u, W, grid, basis=None, mode="regression", features=None):
    """Cost BSDE dy = -f dt + z dW, y(T) = h(X(T)) along a solved state path."""
    from .grid_paths import features_all
    feats = features_all(x, grid, model.kappa) if features is None else features
    P = feats.shape[0]
    ub = u.expand(P)

    def driver(k, y, z):
        return model.f_at(k * grid.dt, feats[:, k], y[:, 0], z[:, 0, :], ub.at(k), ub.mu_at(k))[:, None]

    terminal = model.h_at(feats[:, grid.n_steps])
    if mode == "auto":
        mode = "exact" if is_deterministic(feats) else "regression"
    return solve_bsde(terminal, driver, W, feats, basis, mode=mode), feats


def cost_functional(model, u, W, grid, basis=None, return_spread=False):
    """J(u) = y(0): forward solve, then the cost BSDE; y(0) averaged across paths."""
    from .forward_solver import simulate_sdde
    x = simulate_sdde(model, u, W, grid)
    sol, _ = solve_cost(model, x, u, W, grid, basis)
    y0 = sol.y0[:, 0]
    J = float(np.mean(y0))
    if return_spread:
        return J, float(np.std(y0))
    return J


# ------------------------------------------------------------------ BSVIE

@dataclass
class BsvieSolution:
    y: PathMatrix          # y'(t_i), (P, n+1, m)
    z: np.ndarray          # z'(t_i, s_j), (P, n+1, n, m, d); lower part j < i optional
    lower_filled: bool = False


def solve_bsvie(psi, g2, W, features=None, basis=None, mode="regression", uses_diagonal=False,
                fill_lower=False, proj=None):
    """Discrete BSVIE  y'(t_i) = psi(t_i) + sum_{j>i} g2(i, j, y'(s_j), z'(t_i, s_j)) dt - sum_{j>=i} z' dW_j.

    ``psi`` is (P, n+1) or (P, n+1, m); ``g2(i, j, y, z)`` gets y'(s_j) of shape
    (P, m) and z'(t_i, s_j) of shape (P, m, d) and returns (P, m). Drivers that
    read the diagonal value z'(s_j, t_i) are supported only in exact mode.
    """
    psi = np.asarray(psi, float)
    if psi.ndim == 2:
        psi = psi[:, :, None]
    P, N1, m = psi.shape
    n, d, dt = W.n_steps, W.d, W.dt
    if N1 != n + 1:
        raise ValueError("psi must be given at every grid index 0..n")
    dW = W.increments
    if mode == "exact":
        if not is_deterministic(psi):
            raise RegimeUnsupported("exact mode needs deterministic psi")
        y = np.empty((1, n + 1, m))
        ps = psi[:1]
        for i in range(n, -1, -1):
            acc = ps[:, i].copy()
            for j in range(i + 1, n):
                acc += np.asarray(g2(i, j, y[:, j], np.zeros((1, m, d))), float).reshape(1, m) * dt
            y[:, i] = acc
        y = np.broadcast_to(y, (P, n + 1, m)).copy()
        return BsvieSolution(PathMatrix(y, 0), np.zeros((P, n + 1, n, m, d)), True)
    if uses_diagonal:
        raise UnsupportedDiagonal("drivers reading z'(s, t) need the deterministic regime")
    if proj is None:
        if basis is None:
            basis = RegressionBasis()
        proj = projectors(basis, features)
    U = psi.copy()           # U[:, i] = running value of equation i at the current time
    y = np.empty((P, n + 1, m))
    z = np.zeros((P, n + 1, n, m, d))
    y[:, n] = proj[n](U[:, n])
    for j in range(n - 1, -1, -1):
        E = proj[j]
        live = U[:, :j + 1]                                        # equations i <= j
        z[:, :j + 1, j] = E(live[..., None] * dW[:, j, None, None, :]) / dt
        live = E(live)
        y[:, j] = live[:, j]
        for i in range(j):                                         # strict: s_j > t_i
            live[:, i] += np.asarray(g2(i, j, y[:, j], z[:, i, j]), float).reshape(P, m) * dt
        U[:, :j + 1] = live
    if fill_lower:
        for j in range(n):
            E = proj[j]
            later = y[:, j + 1:]
            z[:, j + 1:, j] = E(later[..., None] * dW[:, j, None, None, :]) / dt
    return BsvieSolution(PathMatrix(y, 0), z, fill_lower)


def martingale_residual(sol, W, proj):
    """Relative L2 residual of y'(t_i) = E_j[y'(t_i)] + sum_{r=j}^{i-1} z'(t_i, r) dW_r."""
    if not sol.lower_filled:
        raise ValueError("lower part of z' not computed; call solve_bsvie(fill_lower=True)")
    y = sol.y.values
    P, N1, m = y.shape
    num = den = 0.0
    for i in range(1, N1):
        for j in range(i):
            stoch = np.einsum("prmd,prd->pm", sol.z[:, i, j:i], W.increments[:, j:i])
            rec = proj[j](y[:, i]) + stoch
            num += float(np.sum((rec - y[:, i]) ** 2))
            den += float(np.sum(y[:, i] ** 2))
    return np.sqrt(num / max(den, 1e-300))
