"""Hamiltonian increments, maximum-principle scans, the duality residual and
the log-log rate fitting engine."""
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .backward_solvers import RegressionBasis, is_deterministic
from .errors import InsufficientLadder, RegimeUnsupported
from .spike_variation import _rows, big_I, coefficient_jumps

MAX_REL_ERR = 0.3
BANDS = {"O(eps)": (0.85, 1.25), "O(eps^2)": (1.8, 2.4), "o(eps)": (1.1, None)}


# ------------------------------------------------------------------ Hamiltonian

@dataclass
class HamiltonianEval:
    dH: np.ndarray          # (P,) increment with the candidate in the u-slot at t
    dH_tilde: np.ndarray    # (P,) increment with the candidate in the mu-slot at t
    t_index: int


def _G(model, star, k, p, q, Gam, u, mu, P):
    t = k * star.grid.dt
    X = _rows(star.feats, P)[:, k]
    y, z = _rows(star.y, P)[:, k], _rows(star.z, P)[:, k]
    f = model.f_at(t, X, y, z, u, mu)
    b = model.b_at(t, X, u, mu)
    s = model.sigma_at(t, X, u, mu)
    return Gam * f + np.einsum("pa,pa->p", p, b) + np.einsum("pal,pal->p", q, s), s


def _slot(a, P):
    return np.broadcast_to(np.atleast_2d(np.asarray(a, float)), (P, np.atleast_2d(a).shape[-1]))


def delta_H(star, pq, script_p, k, candidate, gamma=None):
    """(Delta H(t_k), Delta H~(t_k)) for one candidate control value.

    Delta H puts the candidate in the current-control slot, Delta H~ in the
    delayed-control slot; both carry the script-P penalty on the sigma jump.
    ``pq`` may be a PqPair (strict sums are used) or a ClassicalAdjoints.
    """
    model = star.model
    P = max(star.feats.shape[0], _pq_rows(pq))
    p, q = _pq_arrays(pq, P, k, star)
    Gam = _rows((gamma or star.Gamma).values, P)[:, k]
    u0, m0 = _slot(star.u.at(k), P), _slot(star.u.mu_at(k), P)
    v = _slot(candidate, P)
    G0, s0 = _G(model, star, k, p, q, Gam, u0, m0, P)
    G1, s1 = _G(model, star, k, p, q, Gam, v, m0, P)
    G2, s2 = _G(model, star, k, p, q, Gam, u0, v, P)
    SP = _script_p_at(script_p, pq, k, P, model.n, star)
    pen = lambda ds: 0.5 * np.einsum("pal,pab,pbl->p", ds, SP, ds)
    return HamiltonianEval(G1 - G0 + pen(s1 - s0), G2 - G0 + pen(s2 - s0), k)


def _pq_rows(pq):
    return (pq.p_hat if hasattr(pq, "p_hat") else pq.p).shape[0]


def _pq_arrays(pq, P, k, star):
    if hasattr(pq, "p_hat"):
        return _rows(pq.p_hat, P)[:, k], _rows(pq.q_hat, P)[:, k]
    # classical pair: p(t_{k+1}) seen from t_k, matching the strict sums above
    return _rows(star.proj[k](pq.p[:, k + 1]), P), _rows(pq.q, P)[:, k]


def _script_p_at(script_p, pq, k, P, nn, star):
    if script_p is None:
        if hasattr(pq, "P"):                       # classical second-order adjoint
            return _rows(star.proj[k](pq.P[:, k + 1]), P)
        return np.zeros((P, nn, nn))
    SP = np.asarray(script_p.strict if hasattr(script_p, "strict") else script_p)
    return np.broadcast_to(SP[k], (P,) + SP.shape[1:]) if SP.ndim == 3 else _rows(SP, P)[:, k]


# ------------------------------------------------------------------ MP residual and scan

@dataclass
class ResidualSummary:
    t_index: int
    candidate: np.ndarray
    values: np.ndarray      # per-path estimate of Delta H(t) + E_t[Delta H~(t + delta)]
    mean: float
    p05: float
    minimum: float
    stderr: float
    p05_stderr: float
    gated: bool


def mp_residual(star, pq, script_p, k, candidate, basis=None, gamma=None):
    """Delta H(t_k) + E_{t_k}[Delta H~(t_k + delta)] with the gate 1(t_k <= T - delta).

    The conditional expectation is exact when the shifted increment is
    deterministic and a regression on the delay features at t_k otherwise.
    """
    grid = star.grid
    n, m = grid.n_steps, grid.m_delay
    now = delta_H(star, pq, script_p, k, candidate, gamma)
    vals = now.dH
    gated = k + m <= n - 1
    if gated:
        later = delta_H(star, pq, script_p, k + m, candidate, gamma).dH_tilde
        if is_deterministic(later):
            cond = np.full_like(later, later[0])
        else:
            feats = _rows(star.feats, later.shape[0])[:, k]
            cond = (basis or RegressionBasis()).fit(feats)(later)
        vals = vals + cond
    P = vals.shape[0]
    se = float(np.std(vals) / np.sqrt(P)) if P > 1 else 0.0
    return ResidualSummary(k, np.atleast_1d(np.asarray(candidate, float)), vals, float(np.mean(vals)),
                           float(np.percentile(vals, 5)), float(np.min(vals)), se, quantile_stderr(vals, 0.05),
                           gated)


def quantile_stderr(vals, level):
    """Standard error of an empirical quantile from its distribution-free 95% rank interval."""
    v = np.sort(np.asarray(vals, float))
    P = v.size
    if P < 2 or v[0] == v[-1]:
        return 0.0
    half = 1.959963984540054 * np.sqrt(P * level * (1 - level))
    lo = int(np.clip(np.floor(P * level - half), 0, P - 1))
    hi = int(np.clip(np.ceil(P * level + half), 0, P - 1))
    return float((v[hi] - v[lo]) / (2 * 1.959963984540054))


@dataclass
class ScanResult:
    rows: list              # ResidualSummary per (time, candidate)
    tols: np.ndarray        # tol_mp per row
    grid_pitch: float
    verdict: str            # "pass" when no significant violation, "violation" otherwise
    statistic: str = "p05"
    worst: object = None
    per_time: dict = field(default_factory=dict)

    def stat(self, r):
        return r.p05 if self.statistic == "p05" else r.mean

    @property
    def tol(self):
        return float(np.max(self.tols))

    def margins(self):
        """statistic / tol_mp per row (below -1 means a violation)."""
        return np.array([self.stat(r) / t for r, t in zip(self.rows, self.tols)])

    def strong_violations(self, factor=10.0):
        return [r for r, t in zip(self.rows, self.tols) if self.stat(r) < -factor * t]

    def table(self):
        return [(r.t_index, *r.candidate, r.mean, r.p05, r.stderr) for r in self.rows]


def hamiltonian_scale(rows):
    """Typical size of the scanned increments: mean over cells of the path-mean |residual|."""
    return max(float(np.mean([np.mean(np.abs(r.values)) for r in rows])), 1e-12)


def mp_scan(star, pq, script_p, candidates=None, times=None, basis=None, gamma=None, per_dim=21,
            statistic="p05", tol=None):
    """Residuals over a control grid and a time subsample.

    Each cell gets tol_mp = 3 * (standard error of its statistic) + 1e-3 * scale(H)
    and violates when the statistic (5th percentile by default) is below -tol_mp.
    """
    model, grid = star.model, star.grid
    n = grid.n_steps
    if candidates is None:
        candidates = model.control_set.candidates(per_dim)
    candidates = np.atleast_2d(np.asarray(candidates, float))
    if times is None:
        times = np.unique(np.linspace(0, n - 1, 9).round().astype(int))
    rows = [mp_residual(star, pq, script_p, int(k), v, basis, gamma) for k in times for v in candidates]
    err = (lambda r: r.p05_stderr) if statistic == "p05" else (lambda r: r.stderr)
    if tol is None:
        scale = hamiltonian_scale(rows)
        tols = np.array([3.0 * err(r) + 1e-3 * scale for r in rows])
    else:
        tols = np.full(len(rows), float(tol))
    pitch = float(np.min(np.diff(np.unique(candidates[:, 0])))) if len(candidates) > 1 else 0.0
    res = ScanResult(rows, tols, pitch, "pass", statistic)
    marg = res.margins()
    res.worst = rows[int(np.argmin(marg))]
    for r in rows:
        res.per_time[r.t_index] = min(res.per_time.get(r.t_index, np.inf), res.stat(r))
    res.verdict = "pass" if np.all(marg >= -1.0) else "violation"
    return res


# ------------------------------------------------------------------ duality residual

@dataclass
class DualityEstimate:
    value: float
    stderr: float
    per_path: np.ndarray


def duality_terms(star, X1, X2, u_eps, pq_eps, script_p_eps, gamma_eps, t0=None):
    """Per-path bracket: terminal and running pairings of X1 + X2 with the cost
    derivatives, the quadratic forms in X1, the f-jump, minus the integrated I."""
    grid = star.grid
    n, dt = grid.n_steps, grid.dt
    P = X1.shape[0]
    Gam = _rows(gamma_eps.values, P)
    hX, hXX = _rows(star.hX, P), _rows(star.hXX, P)
    fX, fXX = _rows(star.fX, P), _rows(star.fXX, P)
    S = X1 + X2
    term = Gam[:, n] * (np.einsum("pa,pa->p", hX, S[:, n])
                        + 0.5 * np.einsum("pa,pab,pb->p", X1[:, n], hXX, X1[:, n]))
    J = coefficient_jumps(star, u_eps, P)
    run = Gam[:, :n] * (np.einsum("pka,pka->pk", fX, S[:, :n])
                        + 0.5 * np.einsum("pka,pkab,pkb->pk", X1[:, :n], fXX, X1[:, :n]) + J.df)
    I = big_I(star, pq_eps, script_p_eps, u_eps, gamma=gamma_eps, t0=t0, P=P, jumps=J)
    return term + (run - I.values).sum(axis=1) * dt


def duality_residual(star, X1, X2, u_eps, pq_eps, script_p_eps, gamma_eps, t0=None, antithetic=False):
    """Monte Carlo estimate of the bracketed duality expectation (deterministic-affine regime)."""
    model = star.model
    if model.regime != "deterministic-affine" or not star.deterministic:
        raise RegimeUnsupported("the duality residual is evaluated in the deterministic-affine regime")
    vals = duality_terms(star, X1, X2, u_eps, pq_eps, script_p_eps, gamma_eps, t0)
    return DualityEstimate(float(np.mean(vals)), mc_stderr(vals, antithetic), vals)


def mc_stderr(vals, antithetic=False):
    v = np.asarray(vals, float)
    if antithetic and v.size % 2 == 0:
        v = v.reshape(-1, 2).mean(axis=1)
    return float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def window_controls(W, k0, k1):
    """Mean-zero statistics of the noise on steps k0..k1-1: sum(dW^2 - dt) and the
    Ito sum of W(s) - W(t_k0) against dW, per path and per noise component."""
    dw = W.increments[:, k0:k1]
    part = np.cumsum(dw, axis=1) - dw
    return np.concatenate([(dw ** 2 - W.dt).sum(axis=1), (part * dw).sum(axis=1)], axis=1)


def cv_mean(vals, controls, antithetic=False):
    """Regression control-variate estimate of E[vals] given controls with known zero mean.

    Returns (mean, stderr). Antithetic pairs are averaged before the regression.
    """
    v = np.asarray(vals, float)
    Z = np.asarray(controls, float).reshape(v.size, -1)
    if antithetic and v.size % 2 == 0:
        v = v.reshape(-1, 2).mean(axis=1)
        Z = Z.reshape(-1, 2, Z.shape[1]).mean(axis=1)
    A = np.column_stack([np.ones(v.size), Z - Z.mean(axis=0)])
    coef = np.linalg.lstsq(A, v, rcond=None)[0]
    adj = v - Z @ coef[1:]
    dof = max(v.size - A.shape[1], 1)
    se = float(np.sqrt(np.sum((adj - adj.mean()) ** 2) / dof / v.size))
    return float(adj.mean()), se


# ------------------------------------------------------------------ rate fitting

@dataclass
class RateReport:
    ladder: list            # (eps, error, stderr)
    used: list              # indices of the points entering the fit
    slope: float
    halfwidth: float        # 95% half-width of the slope
    intercept: float
    verdict: str = "unclassified"
    claim: str = ""

    @property
    def slope_se(self):
        return self.halfwidth / 1.959963984540054


def rate_fit(ladder, min_points=4, max_rel_err=MAX_REL_ERR):
    """Weighted least squares of log(error) on log(eps).

    Weights are inverse variances of log(error), approximated by
    (stderr / error)^2; points with zero stderr get equal weights. Points with
    relative MC error >= ``max_rel_err`` are dropped.
    """
    pts = [(float(e), float(v), float(s)) for e, v, s in ladder]
    used = [i for i, (e, v, s) in enumerate(pts) if e > 0 and v > 0 and s / v < max_rel_err]
    if len(used) < min_points:
        raise InsufficientLadder(f"only {len(used)} usable ladder points (need {min_points})")
    x = np.log([pts[i][0] for i in used])
    y = np.log([pts[i][1] for i in used])
    rel = np.array([pts[i][2] / pts[i][1] for i in used])
    if np.all(rel == 0):
        w = np.ones_like(x)
        known = False
    else:
        w = 1.0 / np.maximum(rel, 1e-3 * max(rel.max(), 1e-12)) ** 2
        known = True
    Xd = np.stack([np.ones_like(x), x], axis=1)
    WX = Xd * w[:, None]
    cov = np.linalg.inv(Xd.T @ WX)
    beta = cov @ (WX.T @ y)
    resid = y - Xd @ beta
    dof = len(x) - 2
    if known:
        # inflate by the residual scatter when it exceeds the stated errors
        chi2 = float(np.sum(w * resid ** 2)) / dof if dof > 0 else 1.0
        cov = cov * max(1.0, chi2)
        z = stats.norm.ppf(0.975)
    else:
        s2 = float(np.sum(resid ** 2)) / dof if dof > 0 else 0.0
        cov = cov * s2
        z = stats.t.ppf(0.975, dof) if dof > 0 else np.inf
    half = float(z * np.sqrt(max(cov[1, 1], 0.0)))
    return RateReport(pts, used, float(beta[1]), half, float(beta[0]))


def classify(report, claim):
    """pass / fail / inconclusive against the slope band of an O(.) or o(.) claim."""
    lo, hi = BANDS[claim]
    s = report.slope
    if claim == "o(eps)":
        verdict = "pass" if s >= lo else ("inconclusive" if s > 1.0 else "fail")
    else:
        verdict = "pass" if lo <= s <= hi else "fail"
    report.verdict, report.claim = verdict, claim
    return verdict


def majority(verdicts):
    """Majority verdict over alternative spike locations (ties resolve to inconclusive)."""
    vs = list(verdicts)
    for v in ("pass", "fail"):
        if sum(x == v for x in vs) * 2 > len(vs):
            return v
    return "inconclusive"


def eps_ladder(delta, levels=5):
    """eps_j = (delta / 2) 2^{-j}, j = 0..levels-1."""
    return [0.5 * delta * 2.0 ** (-j) for j in range(levels)]


def ladder_m_delay(delta, levels=5, per_eps=4):
    """Steps per delay so that dt <= eps_J / per_eps and every eps_j is a grid multiple."""
    return int(2 * per_eps * 2 ** (levels - 1))
