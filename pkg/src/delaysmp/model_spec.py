"""Control problem instances: coefficients, derivatives, control sets."""
from dataclasses import dataclass, field

import numpy as np

from .errors import (DimensionMismatch, EpsNotAligned, EpsNotLessThanDelta,
                     EvaluatorFailure, NonAlignedHorizon)

REGIMES = ("general", "affine", "deterministic-affine")
FD_REL = 1e-4


# ---------------------------------------------------------------- control sets

@dataclass(frozen=True)
class ControlSet:
    kind: str
    points: np.ndarray = None
    lower: np.ndarray = None
    upper: np.ndarray = None

    @property
    def dim(self):
        return (self.points.shape[1] if self.kind == "finite" else self.lower.shape[0])

    def contains(self, u, tol=1e-12):
        u = np.atleast_2d(np.asarray(u, float))
        if self.kind == "box":
            return np.all((u >= self.lower - tol) & (u <= self.upper + tol), axis=-1)
        diff = np.abs(u[..., None, :] - self.points)
        return np.any(np.all(diff <= tol, axis=-1), axis=-1)

    def candidates(self, per_dim=21):
        if self.kind == "finite":
            return self.points.copy()
        axes = [np.linspace(lo, hi, per_dim) for lo, hi in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def project(self, u):
        u = np.asarray(u, float)
        if self.kind == "box":
            return np.clip(u, self.lower, self.upper)
        d = np.linalg.norm(u[..., None, :] - self.points, axis=-1)
        return self.points[np.argmin(d, axis=-1)]


def box(lower, upper):
    lo = np.atleast_1d(np.asarray(lower, float))
    hi = np.atleast_1d(np.asarray(upper, float))
    if lo.shape != hi.shape or np.any(hi < lo):
        raise ValueError("box bounds must have equal shape and lower <= upper")
    return ControlSet("box", lower=lo, upper=hi)


def finite(points):
    pts = np.asarray(points, float)
    if pts.ndim == 1:
        pts = pts[:, None]
    return ControlSet("finite", points=pts)


# ---------------------------------------------------------------- finite differences

def _steps(v):
    return FD_REL * (1.0 + np.abs(v))


def fd_jacobian(fun, X):
    """Central differences of fun(X) -> (P, *out) w.r.t. the last axis of X (P, q)."""
    q = X.shape[1]
    cols = []
    for j in range(q):
        hj = _steps(X[:, j])
        Xp, Xm = X.copy(), X.copy()
        Xp[:, j] += hj
        Xm[:, j] -= hj
        fp, fm = np.asarray(fun(Xp)), np.asarray(fun(Xm))
        shape = (-1,) + (1,) * (fp.ndim - 1)
        cols.append((fp - fm) / (2.0 * hj.reshape(shape)))
    return np.stack(cols, axis=-1)


def fd_hessian(fun, X):
    """Symmetrized central second differences, shape (P, *out, q, q)."""
    q = X.shape[1]
    f0 = np.asarray(fun(X))
    H = np.empty(f0.shape + (q, q))
    shape = (-1,) + (1,) * (f0.ndim - 1)
    h = [_steps(X[:, j]) for j in range(q)]
    for i in range(q):
        for j in range(i, q):
            hi, hj = h[i].reshape(shape), h[j].reshape(shape)
            if i == j:
                Xp, Xm = X.copy(), X.copy()
                Xp[:, i] += h[i]
                Xm[:, i] -= h[i]
                val = (np.asarray(fun(Xp)) - 2 * f0 + np.asarray(fun(Xm))) / hi ** 2
            else:
                acc = 0.0
                for si, sj, w in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
                    Xs = X.copy()
                    Xs[:, i] += si * h[i]
                    Xs[:, j] += sj * h[j]
                    acc = acc + w * np.asarray(fun(Xs))
                val = acc / (4 * hi * hj)
            H[..., i, j] = val
            H[..., j, i] = val
    return H


# ---------------------------------------------------------------- model

@dataclass
class ModelSpec:
    """A delayed forward-backward control problem.

    Coefficients are vectorized over paths: with P paths, ``x, x_delta,
    x_tilde`` are (P, n), ``u, mu`` are (P, k), ``y`` is (P,), ``z`` is (P, d).
    ``b`` returns (P, n), ``sigma`` (P, n, d), ``f`` (P,), ``h`` (P,).

    Optional analytic derivatives go in ``derivs`` keyed by ``b_X, b_XX,
    sigma_X, sigma_XX, f_X, f_XX, f_y, f_z, h_X, h_XX``; they take the stacked
    state X = (x, x_delta, x_tilde) of shape (P, 3n). Missing ones fall back
    to central finite differences.
    """
    name: str
    n: int
    d: int
    k: int
    T: float
    delta: float
    kappa: float
    b: object
    sigma: object
    f: object
    h: object
    xi: object
    gamma_init: object
    control_set: ControlSet
    regime: str = "general"
    derivs: dict = field(default_factory=dict)
    L1: float = np.inf
    L2: float = np.inf
    k1: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.control_set.dim != self.k:
            raise DimensionMismatch("control set dimension differs from k")

    # -- stacked-state helpers
    def split(self, X):
        n = self.n
        return X[:, :n], X[:, n:2 * n], X[:, 2 * n:]

    def b_at(self, t, X, u, mu):
        x, xd, xt = self.split(X)
        return np.asarray(self.b(t, x, xd, xt, u, mu), float)

    def sigma_at(self, t, X, u, mu):
        x, xd, xt = self.split(X)
        return np.asarray(self.sigma(t, x, xd, xt, u, mu), float)

    def f_at(self, t, X, y, z, u, mu):
        x, xd, xt = self.split(X)
        return np.asarray(self.f(t, x, xd, xt, y, z, u, mu), float)

    def h_at(self, X):
        x, xd, xt = self.split(X)
        return np.asarray(self.h(x, xd, xt), float)

    # -- derivatives in X = (x, x_delta, x_tilde)
    def b_X(self, t, X, u, mu):
        if "b_X" in self.derivs:
            return self.derivs["b_X"](t, X, u, mu)
        return fd_jacobian(lambda Z: self.b_at(t, Z, u, mu), X)

    def b_XX(self, t, X, u, mu):
        if "b_XX" in self.derivs:
            return self.derivs["b_XX"](t, X, u, mu)
        return fd_hessian(lambda Z: self.b_at(t, Z, u, mu), X)

    def sigma_X(self, t, X, u, mu):
        if "sigma_X" in self.derivs:
            return self.derivs["sigma_X"](t, X, u, mu)
        return fd_jacobian(lambda Z: self.sigma_at(t, Z, u, mu), X)

    def sigma_XX(self, t, X, u, mu):
        if "sigma_XX" in self.derivs:
            return self.derivs["sigma_XX"](t, X, u, mu)
        return fd_hessian(lambda Z: self.sigma_at(t, Z, u, mu), X)

    def f_X(self, t, X, y, z, u, mu):
        if "f_X" in self.derivs:
            return self.derivs["f_X"](t, X, y, z, u, mu)
        return fd_jacobian(lambda Z: self.f_at(t, Z, y, z, u, mu), X)

    def f_XX(self, t, X, y, z, u, mu):
        if "f_XX" in self.derivs:
            return self.derivs["f_XX"](t, X, y, z, u, mu)
        return fd_hessian(lambda Z: self.f_at(t, Z, y, z, u, mu), X)

    def f_y(self, t, X, y, z, u, mu):
        if "f_y" in self.derivs:
            return self.derivs["f_y"](t, X, y, z, u, mu)
        return fd_jacobian(lambda Y: self.f_at(t, X, Y[:, 0], z, u, mu), y[:, None])[..., 0]

    def f_z(self, t, X, y, z, u, mu):
        if "f_z" in self.derivs:
            return self.derivs["f_z"](t, X, y, z, u, mu)
        return fd_jacobian(lambda Z: self.f_at(t, X, y, Z, u, mu), z)

    def h_X(self, X):
        if "h_X" in self.derivs:
            return self.derivs["h_X"](X)
        return fd_jacobian(self.h_at, X)

    def h_XX(self, X):
        if "h_XX" in self.derivs:
            return self.derivs["h_XX"](X)
        return fd_hessian(self.h_at, X)

    # -- initial data on the grid
    def xi_path(self, grid):
        """xi(t_k) for k = -m..0, shape (m+1, n)."""
        ts = np.arange(-grid.m_delay, 1) * grid.dt
        return np.array([np.atleast_1d(self.xi(t)) for t in ts], float).reshape(len(ts), self.n)

    def gamma_path(self, grid):
        """gamma(t_k) for k = -m..-1, shape (m, k)."""
        ts = np.arange(-grid.m_delay, 0) * grid.dt
        return np.array([np.atleast_1d(self.gamma_init(t)) for t in ts], float).reshape(len(ts), self.k)

    def with_params(self, **kw):
        """Shallow copy with some dataclass fields replaced."""
        from dataclasses import replace
        return replace(self, **kw)


def eval_coeffs(model, t, x, x_delta, x_tilde, y, z, u, mu):
    """(b, sigma, f) at one time for a batch of P points."""
    x, x_delta, x_tilde = (np.atleast_2d(np.asarray(a, float)) for a in (x, x_delta, x_tilde))
    u, mu = np.atleast_2d(np.asarray(u, float)), np.atleast_2d(np.asarray(mu, float))
    z = np.atleast_2d(np.asarray(z, float))
    y = np.atleast_1d(np.asarray(y, float))
    for name, a, width in (("x", x, model.n), ("x_delta", x_delta, model.n), ("x_tilde", x_tilde, model.n),
                           ("u", u, model.k), ("mu", mu, model.k), ("z", z, model.d)):
        if a.shape[-1] != width:
            raise DimensionMismatch(f"{name} has trailing size {a.shape[-1]}, expected {width}")
    try:
        bv = np.asarray(model.b(t, x, x_delta, x_tilde, u, mu), float)
        sv = np.asarray(model.sigma(t, x, x_delta, x_tilde, u, mu), float)
        fv = np.asarray(model.f(t, x, x_delta, x_tilde, y, z, u, mu), float)
    except DimensionMismatch:
        raise
    except Exception as exc:  # evaluator bugs surface as a typed error
        raise EvaluatorFailure(f"coefficient evaluation failed: {exc}") from exc
    return bv, sv, fv


# ---------------------------------------------------------------- controls

@dataclass(frozen=True)
class ControlProcess:
    """Control values on indices -m..n-1; leading axis is paths (1 = shared)."""
    values: np.ndarray  # (P or 1, m + n, k)
    m_delay: int
    tag: str = ""

    @property
    def first_index(self):
        return -self.m_delay

    def at(self, k):
        return self.values[:, k + self.m_delay]

    def mu_at(self, k):
        return self.values[:, k]

    def expand(self, n_paths):
        if self.values.shape[0] == n_paths:
            return self
        return ControlProcess(np.broadcast_to(self.values, (n_paths,) + self.values.shape[1:]).copy(),
                              self.m_delay, self.tag)

    def is_admissible(self, model, grid, tol=1e-12):
        gam = model.gamma_path(grid)
        head = self.values[:, :grid.m_delay]
        ok_init = np.allclose(head, gam[None], atol=tol, rtol=0)
        ok_set = bool(np.all(model.control_set.contains(self.values.reshape(-1, model.k), tol)))
        return ok_init and ok_set


def constant_control(model, grid, value, tag="constant"):
    """u(t) = value on [0, T), gamma_init on [-delta, 0)."""
    vals = np.empty((1, grid.m_delay + grid.n_steps, model.k))
    vals[0, :grid.m_delay] = model.gamma_path(grid)
    vals[0, grid.m_delay:] = np.atleast_1d(np.asarray(value, float))
    return ControlProcess(vals, grid.m_delay, tag)


def control_from_function(model, grid, fn, tag="open-loop"):
    """Deterministic open-loop control u(t_k) = fn(t_k)."""
    vals = np.empty((1, grid.m_delay + grid.n_steps, model.k))
    vals[0, :grid.m_delay] = model.gamma_path(grid)
    for k in range(grid.n_steps):
        vals[0, grid.m_delay + k] = np.atleast_1d(fn(k * grid.dt))
    return ControlProcess(vals, grid.m_delay, tag)


def spike_window(grid, t0, eps):
    """Index range [k0, k1) covering t0 <= t_k < t0 + eps."""
    if eps <= 0:
        raise EpsNotAligned("eps must be positive")
    l_float = eps / grid.dt
    l = int(round(l_float))
    if l < 1 or abs(l_float - l) > 1e-7:
        raise EpsNotAligned(f"eps={eps} is not a positive multiple of dt={grid.dt}")
    if not eps < grid.delta - 1e-12:
        raise EpsNotLessThanDelta(f"eps={eps} must be smaller than delta={grid.delta}")
    try:
        k0 = grid.index_of(t0, "t0")
    except NonAlignedHorizon as exc:
        raise EpsNotAligned(str(exc)) from exc
    if not 0 <= k0 < grid.n_steps:
        raise EpsNotAligned(f"t0={t0} must lie in [0, T)")
    return k0, min(k0 + l, grid.n_steps)


def spike_control(u_star, u_alt, t0, eps, grid):
    """u_alt on [t0, t0+eps), u_star elsewhere.

    ``u_alt`` may be a ControlProcess or a constant control vector.
    """
    k0, k1 = spike_window(grid, t0, eps)
    m = grid.m_delay
    if isinstance(u_alt, ControlProcess):
        P = max(u_star.values.shape[0], u_alt.values.shape[0])
        vals = u_star.expand(P).values.copy()
        alt = u_alt.expand(P).values
        vals[:, m + k0:m + k1] = alt[:, m + k0:m + k1]
    else:
        vals = u_star.values.copy()
        vals[:, m + k0:m + k1] = np.atleast_1d(np.asarray(u_alt, float))
    return ControlProcess(vals, m, f"spike(t0={t0:g}, eps={eps:g})")


# ---------------------------------------------------------------- assumption checks

@dataclass
class AssumptionReport:
    derivative_sup: dict
    growth_ratio_b: float
    growth_ratio_f: float
    fd_mismatch: float
    fd_detail: dict
    violations: list

    @property
    def passed(self):
        return not self.violations


def _rel_mismatch(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / (1.0 + np.abs(b))))


def validate_assumptions(model, n_samples=64, seed=0, fd_tol=1e-5, scale=1.0):
    """Sampled check of the growth bounds and of the declared derivatives.

    Points are drawn from N(0, scale^2) in state, y, z, and uniformly from the
    control set. Derivative evaluators supplied by the model are compared with
    central differences; without analytic derivatives the mismatch is zero.
    """
    rng = np.random.default_rng(seed)
    P, n, d, k = int(n_samples), model.n, model.d, model.k
    X = rng.standard_normal((P, 3 * n)) * scale
    y = rng.standard_normal(P) * scale
    z = rng.standard_normal((P, d)) * scale
    cands = model.control_set.candidates(5)
    u = cands[rng.integers(0, len(cands), P)]
    mu = cands[rng.integers(0, len(cands), P)]
    t = float(rng.uniform(0, model.T))
    violations = []
    try:
        zero = np.zeros((P, 3 * n))
        b0 = model.b_at(t, zero, u, mu)
        s0 = model.sigma_at(t, zero, u, mu)
        f0 = model.f_at(t, zero, np.zeros(P), np.zeros((P, d)), u, mu)
        denom = 1.0 + np.linalg.norm(u, axis=1) + np.linalg.norm(mu, axis=1)
        gb = float(np.max((np.linalg.norm(b0, axis=1) + np.linalg.norm(s0.reshape(P, -1), axis=1)) / denom))
        gf = float(np.max(np.abs(f0) / denom))
        sup = {}
        fd = {}
        pairs = [
            ("b_X", lambda: model.b_X(t, X, u, mu), lambda: fd_jacobian(lambda Z: model.b_at(t, Z, u, mu), X)),
            ("sigma_X", lambda: model.sigma_X(t, X, u, mu), lambda: fd_jacobian(lambda Z: model.sigma_at(t, Z, u, mu), X)),
            ("f_X", lambda: model.f_X(t, X, y, z, u, mu), lambda: fd_jacobian(lambda Z: model.f_at(t, Z, y, z, u, mu), X)),
            ("f_y", lambda: model.f_y(t, X, y, z, u, mu),
             lambda: fd_jacobian(lambda Y: model.f_at(t, X, Y[:, 0], z, u, mu), y[:, None])[..., 0]),
            ("f_z", lambda: model.f_z(t, X, y, z, u, mu), lambda: fd_jacobian(lambda Z: model.f_at(t, X, y, Z, u, mu), z)),
            ("h_X", lambda: model.h_X(X), lambda: fd_jacobian(model.h_at, X)),
            ("b_XX", lambda: model.b_XX(t, X, u, mu), lambda: fd_hessian(lambda Z: model.b_at(t, Z, u, mu), X)),
            ("sigma_XX", lambda: model.sigma_XX(t, X, u, mu), lambda: fd_hessian(lambda Z: model.sigma_at(t, Z, u, mu), X)),
            ("f_XX", lambda: model.f_XX(t, X, y, z, u, mu), lambda: fd_hessian(lambda Z: model.f_at(t, Z, y, z, u, mu), X)),
            ("h_XX", lambda: model.h_XX(X), lambda: fd_hessian(model.h_at, X)),
        ]
        for name, analytic, numeric in pairs:
            a = np.asarray(analytic())
            sup[name] = float(np.max(np.abs(a))) if a.size else 0.0
            if name in model.derivs:
                fd[name] = _rel_mismatch(a, numeric())
            else:
                fd[name] = 0.0
            if name.endswith("XX") and a.size:
                asym = float(np.max(np.abs(a - np.swapaxes(a, -1, -2))))
                if asym > 1e-12:
                    violations.append(f"{name} not symmetric (max asymmetry {asym:.2e})")
    except Exception as exc:
        raise EvaluatorFailure(f"evaluator raised during validation: {exc}") from exc
    mismatch = max(fd.values()) if fd else 0.0
    if gb > model.L1:
        violations.append(f"growth of b, sigma at the origin: ratio {gb:.3g} exceeds L1={model.L1:g}")
    if gf > model.L2:
        violations.append(f"growth of f at the origin: ratio {gf:.3g} exceeds L2={model.L2:g}")
    if mismatch > fd_tol:
        worst = max(fd, key=fd.get)
        violations.append(f"derivative {worst} disagrees with finite differences (rel {mismatch:.2e})")
    return AssumptionReport(sup, gb, gf, mismatch, fd, violations)
