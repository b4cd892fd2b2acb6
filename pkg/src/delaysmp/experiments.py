"""Acceptance experiments: each runner returns an Outcome with a verdict and its raw rows.

The CLI and the acceptance tests call the same runners, so a reported verdict
always comes from one code path.
"""
from dataclasses import dataclass, field
import time

import numpy as np

from .adjoints import (ClassicalAdjoints, GammaPath, assemble_pq, assemble_script_p, classical_adjoints,
                       direct_script_p, extrapolated_fields, gamma_eps, gamma_transform_check,
                       solve_first_order, solve_second_order, star_data)
from .backward_solvers import ExactMean, RegressionBasis, solve_bsde
from .errors import InsufficientLadder
from .forward_solver import picard_splice_solve, simulate_feedback, simulate_sdde, strong_error_samples
from .grid_paths import build_grid, features_all, sample_brownian
from .model_spec import ControlProcess, constant_control, spike_control
from .models import BUILTINS, affine_quadratic_model, get_model
from .mp_and_rates import (cv_mean, classify, eps_ladder, majority, mc_stderr, mp_scan, rate_fit,
                           window_controls, duality_terms)
from .oracles import (delay_ode_closed_form, delayed_linear_cost_optimum, dense_volterra_reference,
                      lq_closed_form)
from .spike_variation import (big_I, coefficient_jumps, lifted, pathwise_cost, perturbed_differences,
                              solve_hat_y, solve_x1, solve_x2)

T0_FRACTIONS = (0.3, 0.1, 0.2, 0.55)


@dataclass
class Outcome:
    criterion: int
    name: str
    verdict: str                    # pass / fail / inconclusive
    detail: str
    ladder: list = field(default_factory=list)   # (quantity, t0, eps, error, stderr, n_paths)
    mp_rows: list = field(default_factory=list)  # (case, t, candidate, mean, p05, stderr)
    seconds: float = 0.0

    @property
    def line(self):
        return f"[{self.verdict.upper():>12}] {self.criterion:>2}. {self.name}: {self.detail}"


def _timed(fn):
    def run(*a, **kw):
        t = time.perf_counter()
        out = fn(*a, **kw)
        out.seconds = time.perf_counter() - t
        return out
    run.__name__, run.__doc__ = fn.__name__, fn.__doc__
    return run


def _combine(verdicts):
    vs = list(verdicts)
    if all(v == "pass" for v in vs):
        return "pass"
    return "fail" if "fail" in vs else "inconclusive"


def _on_grid(grid, frac):
    return round(frac * grid.T / grid.dt) * grid.dt


def _ladder(delta, levels, eps0=None):
    if eps0 is None:
        return eps_ladder(delta, levels)
    return [float(eps0) * 2.0 ** -j for j in range(levels)]


def _fit_verdict(ladder, claim, extra=None):
    try:
        rep = rate_fit(ladder)
    except InsufficientLadder:
        return None, "fail"
    v = classify(rep, claim)
    if extra is not None and v == "pass" and not extra(rep):
        v = "fail"
    return rep, v


# ------------------------------------------------------------------ 1. forward convergence

@_timed
def forward_convergence(model="linear_delay", n_paths=10_000, seed=11, m_levels=(2, 4, 8, 16, 32),
                        ref_factor=16):
    """Strong error of Euler against a dt/ref_factor run on the same noise."""
    mdl = get_model(model) if isinstance(model, str) else model
    mf = max(m_levels) * ref_factor
    gf = build_grid(mdl.T, mdl.delta, mf)
    Wf = sample_brownian(gf, n_paths, mdl.d, seed)
    u0 = np.zeros(mdl.k)
    xf = simulate_sdde(mdl, constant_control(mdl, gf, u0), Wf, gf)
    lad = []
    for m in m_levels:
        g = build_grid(mdl.T, mdl.delta, m)
        x = simulate_sdde(mdl, constant_control(mdl, g, u0), Wf.coarsen(mf // m), g)
        e = strong_error_samples(x, xf)
        lad.append((g.dt, float(e.mean()), mc_stderr(e)))
    rep = rate_fit(lad)
    v = "pass" if 0.85 <= rep.slope <= 1.3 else "fail"
    return Outcome(1, "forward strong convergence", v, f"slope {rep.slope:.3f} +/- {rep.halfwidth:.3f} "
                   f"in [0.85, 1.3]", [("E sup|x_dt - x_ref|^2", 0.0, e, m, s, n_paths) for e, m, s in lad])


# ------------------------------------------------------------------ 2. method of steps

@_timed
def deterministic_drift(a=1.0, m_levels=(4, 8, 16, 32)):
    """b = a x_delta, sigma = 0 against the closed-form method-of-steps solution."""
    mdl = get_model("delay_drift", a=a)
    rows, ok = [], True
    for m in m_levels:
        g = build_grid(mdl.T, mdl.delta, m)
        W = sample_brownian(g, 1, mdl.d, 0)
        x = simulate_sdde(mdl, constant_control(mdl, g, np.zeros(mdl.k)), W, g)
        kmax = min(g.n_steps, 2 * m)
        t = np.arange(kmax + 1) * g.dt
        exact = delay_ode_closed_form(a, float(mdl.xi(0.0)[0]), mdl.delta, t)
        err = float(np.max(np.abs(x.values[0, m:m + kmax + 1, 0] - exact)))
        bound = 5 * a * a * g.dt
        ok &= err <= bound
        rows.append(("sup|x - x_mos| on [0, 2 delta]", 0.0, g.dt, err, 0.0, 1))
    worst = max(r[3] / (5 * a * a * r[2]) for r in rows)
    return Outcome(2, "deterministic-drift exactness", "pass" if ok else "fail",
                   f"max error / (5 a^2 dt) = {worst:.3f} over dt = {[round(r[2], 5) for r in rows]}", rows)


# ------------------------------------------------------------------ 3. Picard / Euler

@_timed
def picard_equivalence(n_paths=16, m_delay=8, seed=3, tol=1e-10, window_steps=2):
    """Window-spliced Picard fixed point against plain Euler on every built-in."""
    worst, names = 0.0, []
    for name in sorted(BUILTINS):
        mdl = get_model(name)
        g = build_grid(mdl.T, mdl.delta, m_delay)
        W = sample_brownian(g, n_paths, mdl.d, seed)
        u = constant_control(mdl, g, 0.5 * (mdl.control_set.candidates(3)[-1]))
        xe = simulate_sdde(mdl, u, W, g)
        xp, _ = picard_splice_solve(mdl, u, W, g, window_steps * g.dt, tol=1e-14, check_bound=False)
        err = float(np.max(np.abs(xe.values - xp.values)))
        worst = max(worst, err)
        names.append(f"{name}={err:.1e}")
    return Outcome(3, "Picard/Euler equivalence", "pass" if worst <= tol else "fail",
                   f"max |picard - euler| = {worst:.2e} (tol {tol:g}); " + ", ".join(names))


# ------------------------------------------------------------------ 4. BSDE oracles

@_timed
def bsde_oracle(n_paths=100_000, seed=5, a=0.7, c=1.3, T=1.0):
    """Linear driver y' = -a y against c e^{a(T-t)}; terminal W(T) against z = 1."""
    g = build_grid(T, T / 2, 64)                          # dt = 1/128
    W1 = sample_brownian(g, 2, 1, seed)
    sol = solve_bsde(np.full(2, c), lambda k, y, z: a * y, W1, mode="exact")
    exact = c * np.exp(a * (T - np.arange(g.n_steps + 1) * g.dt))
    rel = float(np.max(np.abs(sol.y.values[0, :, 0] - exact) / exact))
    W = sample_brownian(g, n_paths, 1, seed + 1)
    path = W.path()
    sol2 = solve_bsde(path[:, -1, 0], lambda k, y, z: np.zeros_like(y), W, features=path,
                      basis=RegressionBasis(degree=2))
    zerr = float(np.sqrt(np.mean((sol2.z[:, :, 0, 0] - 1.0) ** 2)))
    v = "pass" if rel <= 0.01 and zerr <= 0.05 else "fail"
    return Outcome(4, "BSDE oracles", v, f"linear driver max rel error {rel:.2e} (<= 1e-2); "
                   f"martingale ||z - 1||_L2 = {zerr:.3f} (<= 0.05)")


# ------------------------------------------------------------------ 5. spike rates

STATE_CLAIMS = (("E sup|x_eps - x*|^2", "O(eps)"), ("E sup|x1|^2", "O(eps)"),
                ("E sup|x_eps - x* - x1|^2", "O(eps^2)"), ("E sup|x2|^2", "O(eps^2)"),
                ("E sup|x_eps - x* - x1 - x2|^2", "o(eps^2)"))


def _state_verdict(rep, claim):
    if claim == "o(eps^2)":
        rep.claim = claim
        rep.verdict = "pass" if rep.slope >= 2.05 else "fail"
        return rep.verdict
    return classify(rep, claim)


@_timed
def spike_rates(model="nonlinear_delay", n_paths=20_000, seed=7, m_delay=128, u_star=0.2, u_alt=0.9,
                t0_fracs=T0_FRACTIONS, levels=5, basis=None, eps0=None):
    """Variational-state rates over the eps ladder, majority over spike locations."""
    mdl = get_model(model) if isinstance(model, str) else model
    g = build_grid(mdl.T, mdl.delta, m_delay)
    W = sample_brownian(g, n_paths, mdl.d, seed)
    u = constant_control(mdl, g, u_star)
    star = star_data(mdl, u, W, g, basis=basis)
    rows, per_q = [], {q: [] for q, _ in STATE_CLAIMS}
    slopes = {q: [] for q, _ in STATE_CLAIMS}
    for frac in t0_fracs:
        t0 = _on_grid(g, frac)
        lads = {q: [] for q, _ in STATE_CLAIMS}
        for eps in _ladder(mdl.delta, levels, eps0):
            ue = spike_control(u, u_alt, t0, eps, g)
            xe = simulate_sdde(mdl, ue, W, g)
            J = coefficient_jumps(star, ue)
            x1 = solve_x1(star, ue, jumps=J)
            x2 = solve_x2(star, x1, ue, jumps=J)
            d = xe.values - star.x.values
            sup = lambda a: np.max(np.linalg.norm(a, axis=2), axis=1) ** 2
            vals = (sup(d), sup(x1.values), sup(d - x1.values), sup(x2.values),
                    sup(d - x1.values - x2.values))
            for (q, _), v in zip(STATE_CLAIMS, vals):
                lads[q].append((eps, float(v.mean()), mc_stderr(v)))
                rows.append((q, t0, eps, float(v.mean()), mc_stderr(v), n_paths))
        for q, claim in STATE_CLAIMS:
            try:
                rep = rate_fit(lads[q])
            except InsufficientLadder:
                rep = None
            v = _state_verdict(rep, claim) if rep is not None else "fail"
            per_q[q].append(v)
            slopes[q].append(rep.slope if rep is not None else float("nan"))
    verdicts = {q: majority(per_q[q]) for q, _ in STATE_CLAIMS}
    detail = "; ".join(f"{q}: slopes {np.round(slopes[q], 2).tolist()} -> {verdicts[q]}" for q, _ in STATE_CLAIMS)
    return Outcome(5, "spike-rate suite", _combine(verdicts.values()), detail, rows)


# ------------------------------------------------------------------ 6 and 7. backward and Gamma rates

def backward_rates(model="nonlinear_delay", n_paths=10_000, seed=7, m_delay=128, u_star=0.2, u_alt=-0.3,
                   t0_fracs=T0_FRACTIONS, levels=5, basis=None, eps0=None):
    """Perturbed-backward rate and Gamma-perturbation rates on one set of runs.

    Returns the pair (criterion 6, criterion 7).
    """
    t_start = time.perf_counter()
    mdl = get_model(model) if isinstance(model, str) else model
    g = build_grid(mdl.T, mdl.delta, m_delay)
    W = sample_brownian(g, n_paths, mdl.d, seed)
    u = constant_control(mdl, g, u_star)
    star = star_data(mdl, u, W, g, basis=basis)
    dt = g.dt
    names = ("E sup|y_hat|^2 + E int|z_hat|^2", "E int|Gamma_eps - Gamma|^2", "E int|1 - Gamma_eps/Gamma|^2")
    rows, verdicts, slopes = [], {q: [] for q in names}, {q: [] for q in names}
    for frac in t0_fracs:
        t0 = _on_grid(g, frac)
        lads = {q: [] for q in names}
        for eps in _ladder(mdl.delta, levels, eps0):
            ue = spike_control(u, u_alt, t0, eps, g)
            pdiff = perturbed_differences(star, ue, basis)
            J = coefficient_jumps(star, ue)
            x1 = solve_x1(star, ue, jumps=J)
            x2 = solve_x2(star, x1, ue, jumps=J)
            xs = type(x1)(star.x.values + x1.values + x2.values, x1.first_index)
            Ge = gamma_eps(star, features_all(xs, g, mdl.kappa), pdiff.hat_y, pdiff.hat_z)
            G0 = star.Gamma.values
            vals = (np.max(pdiff.hat_y ** 2, axis=1) + np.sum(pdiff.hat_z ** 2, axis=(1, 2)) * dt,
                    np.sum((Ge.values - G0)[:, :-1] ** 2, axis=1) * dt,
                    np.sum((1.0 - Ge.values / G0)[:, :-1] ** 2, axis=1) * dt)
            for q, v in zip(names, vals):
                lads[q].append((eps, float(v.mean()), mc_stderr(v)))
                rows.append((q, t0, eps, float(v.mean()), mc_stderr(v), n_paths))
        for i, q in enumerate(names):
            rep, v = _fit_verdict(lads[q], "O(eps)")
            if rep is not None and i > 0:
                v = "pass" if 0.85 <= rep.slope <= 1.3 else "fail"
            verdicts[q].append(v)
            slopes[q].append(rep.slope if rep is not None else float("nan"))
    fin = {q: majority(verdicts[q]) for q in names}
    txt = lambda q: f"{q}: slopes {np.round(slopes[q], 2).tolist()} -> {fin[q]}"
    secs = time.perf_counter() - t_start
    o6 = Outcome(6, "perturbed-backward rate", fin[names[0]], txt(names[0]) + " (band [0.85, 1.25])",
                 [r for r in rows if r[0] == names[0]], seconds=secs / 2)
    o7 = Outcome(7, "Gamma-perturbation rates", _combine(fin[q] for q in names[1:]),
                 "; ".join(txt(q) for q in names[1:]) + " (band [0.85, 1.3])",
                 [r for r in rows if r[0] != names[0]], seconds=secs / 2)
    return o6, o7


# ------------------------------------------------------------------ 8. adjoint quadrature

def quadrature_model():
    """Deterministic-affine instance with state noise, distributed delay and f_y != 0."""
    return affine_quadratic_model(
        "quadrature_affine", T=1.0, delta=0.5, kappa=0.5, Ab=[-0.4, 0.5, 0.3], Bu=[1.0], Sx=[0.5, 0.1, 0.0],
        fy=-0.3, Q=np.array([[0.8, 0.1, 0], [0.1, 0.3, 0], [0, 0, 0.2]]), q=[0.2, 0.1, 0.3],
        G=np.array([[1, 0.25, 0.1], [0.25, 0.4, 0], [0.1, 0, 0.3]]), g=[0.5, 0.2, 0.1], xi=0.0,
        regime="deterministic-affine")


def _dense_reference(mdl, N):
    p = mdl.params
    fy = float(p["fy"])
    return dense_volterra_reference(
        lambda s: p["Ab"], lambda s: p["Sx"], lambda s: p["q"], lambda s: 2 * np.exp(fy * s) * p["Q"],
        lambda s: np.exp(fy * s), p["g"], 2 * p["G"], mdl.n, mdl.d, mdl.T, mdl.delta, mdl.kappa, N)


@_timed
def adjoint_quadrature(n_steps=32, rel_tol=1e-4, levels=3):
    """Extrapolated (eta, P2..P4) at n steps against Richardson-corrected dense references."""
    mdl = quadrature_model()
    m = int(round(n_steps * mdl.delta / mdl.T))

    def make_star(mm):
        g = build_grid(mdl.T, mdl.delta, mm)
        return star_data(mdl, constant_control(mdl, g, 0.0), sample_brownian(g, 2, mdl.d, 0), g)

    ext = extrapolated_fields(make_star, m, levels)
    r4, r8 = _dense_reference(mdl, 4 * n_steps), _dense_reference(mdl, 8 * n_steps)

    def sub(r, f):
        return dict(eta=r.eta[::f], P2=r.P2[::f], P3=r.P3[::f], P4=r.P4[::f, ::f])

    a, b = sub(r4, 4), sub(r8, 8)
    rel = {k: float(np.max(np.abs(ext[k] - (2 * b[k] - a[k]))) / np.max(np.abs(2 * b[k] - a[k]))) for k in a}
    star = make_star(m)
    adj = solve_first_order(star, mode="exact")
    so = solve_second_order(star, assemble_pq(adj))
    sp = assemble_script_p(so, star.Gamma, mdl, star.grid)
    sym = so.symmetry_residual()
    j = star.grid.n_steps - m
    analytic = (direct_script_p(so, star.Gamma, mdl, star.grid, j, force=True)
                - direct_script_p(so, star.Gamma, mdl, star.grid, j))
    gate = float(np.max(np.abs(sp.gate_jump(j) - analytic)))
    zeta = float(np.max(np.abs(adj.zeta_sum)))
    ok = max(rel.values()) <= rel_tol and sym <= 1e-10 and gate <= 1e-10 and zeta == 0.0
    det = ", ".join(f"{k} {v:.1e}" for k, v in rel.items())
    return Outcome(8, "adjoint quadrature", "pass" if ok else "fail",
                   f"relative errors {det} (<= {rel_tol:g}); zeta max {zeta:g}; P4 symmetry {sym:.1e}; "
                   f"gate jump mismatch {gate:.1e}")


# ------------------------------------------------------------------ 9. expansion

@_timed
def expansion(n_paths=40_000, seed=1000, m_delay=128, u_alt=1.0, t0_fracs=T0_FRACTIONS, levels=5,
              chunk=20_000, eps0=None):
    """|y_eps(0) - y*(0) - y_hat(0)| on the LQ-with-delay model (deterministic reference)."""
    mdl = get_model("lq_delay", sigma0=0.0)
    g = build_grid(mdl.T, mdl.delta, m_delay)
    W1 = sample_brownian(g, 2, mdl.d, 0, antithetic=True)
    u = constant_control(mdl, g, 0.0)
    star = star_data(mdl, u, W1, g)
    pq = assemble_pq(solve_first_order(star, mode="exact"))
    sp = assemble_script_p(solve_second_order(star, pq), star.Gamma, mdl, g)
    ystar = float(pathwise_cost(mdl, u, W1, g).mean())
    rows, verdicts, slopes = [], [], []
    nchunk = max(1, n_paths // chunk)
    noise = [sample_brownian(g, chunk, mdl.d, seed + c, antithetic=True) for c in range(nchunk)]
    for frac in t0_fracs:
        t0 = _on_grid(g, frac)
        lad = []
        for eps in _ladder(mdl.delta, levels, eps0):
            ue = spike_control(u, u_alt, t0, eps, g)
            I = big_I(star, pq, sp, ue, t0=t0, P=1)
            hy = float(solve_hat_y(star, I, W=W1).y0[0, 0])
            v = np.concatenate([pathwise_cost(mdl, ue, W, g) for W in noise]) - ystar - hy
            r, se = abs(float(v.mean())), mc_stderr(v, antithetic=True)
            lad.append((eps, r, se))
            rows.append(("|y_eps(0) - y*(0) - y_hat(0)|", t0, eps, r, se, v.size))
        rep, v = _fit_verdict(lad, "o(eps)")
        verdicts.append(v)
        slopes.append(rep.slope if rep is not None else float("nan"))
    fin = majority(verdicts)
    return Outcome(9, "second-order expansion", fin,
                   f"slopes {np.round(slopes, 2).tolist()} per t0 -> {verdicts}; need >= 1.1, (1.0, 1.1] inconclusive",
                   rows)


# ------------------------------------------------------------------ 10. duality

@_timed
def duality(n_paths=20_000, seed=500, m_delay=128, u_alt=1.0, t0_fracs=T0_FRACTIONS, levels=5,
            chunk=20_000, eps0=None):
    """Bracketed duality expectation on the deterministic-affine built-in."""
    mdl = get_model("duality_affine")
    g = build_grid(mdl.T, mdl.delta, m_delay)
    W1 = sample_brownian(g, 2, mdl.d, 0, antithetic=True)
    u = constant_control(mdl, g, 0.0)
    star = star_data(mdl, u, W1, g)
    pq = assemble_pq(solve_first_order(star, mode="exact"))
    sp = assemble_script_p(solve_second_order(star, pq), star.Gamma, mdl, g)
    nchunk = max(1, n_paths // chunk)
    noise = [sample_brownian(g, chunk, mdl.d, seed + c, antithetic=True) for c in range(nchunk)]
    rows, verdicts, slopes = [], [], []
    for frac in t0_fracs:
        t0 = _on_grid(g, frac)
        k0 = g.index_of(t0)
        lad = []
        for eps in _ladder(mdl.delta, levels, eps0):
            ue = spike_control(u, u_alt, t0, eps, g)
            k1 = min(k0 + int(round(eps / g.dt)), g.n_steps)
            vals, Z = [], []
            for W in noise:
                J = coefficient_jumps(star, ue, W.n_paths)
                x1 = solve_x1(star, ue, W=W, jumps=J)
                x2 = solve_x2(star, x1, ue, W=W, jumps=J)
                vals.append(duality_terms(star, lifted(x1, g, mdl.kappa), lifted(x2, g, mdl.kappa), ue, pq, sp,
                                          star.Gamma, t0))
                Z.append(window_controls(W, k0, k1))
            mean, se = cv_mean(np.concatenate(vals), np.concatenate(Z), antithetic=True)
            lad.append((eps, abs(mean), se))
            rows.append(("|duality bracket|", t0, eps, abs(mean), se, n_paths))
        rep, v = _fit_verdict(lad, "o(eps)", extra=lambda r: r.slope - r.halfwidth > 1.0)
        if rep is not None and v == "inconclusive" and rep.slope - rep.halfwidth <= 1.0:
            v = "fail" if rep.slope <= 1.0 else "inconclusive"
        verdicts.append(v)
        slopes.append((round(rep.slope, 2), round(rep.halfwidth, 2)) if rep is not None else None)
    fin = majority(verdicts)
    return Outcome(10, "duality residual", fin,
                   f"(slope, 95% half-width) per t0 {slopes} -> {verdicts}; need slope >= 1.1 and lower bound > 1",
                   rows)


# ------------------------------------------------------------------ 11. maximum principle

def _scan_rows(case, res, grid):
    return [(case, r.t_index * grid.dt, *r.candidate, r.mean, r.p05, r.stderr) for r in res.rows]


@_timed
def maximum_principle(shift=0.5, delayed_paths=2000, classical_paths=10_000, seed=0):
    """Scans at the oracle optimum (no violation) and at the shifted control (strong violation)."""
    out, rows = [], []
    mdl = get_model("lq_delay_linear")
    g = build_grid(mdl.T, mdl.delta, 32)
    opt = delayed_linear_cost_optimum(mdl, g)
    W = sample_brownian(g, delayed_paths, mdl.d, seed, antithetic=True)
    for s in (0.0, shift):
        vals = np.concatenate([mdl.gamma_path(g), (opt.u + s)[:, None]])[None]
        u = ControlProcess(vals, g.m_delay, "oracle" if s == 0 else "shifted")
        star = star_data(mdl, u, W, g)
        pq = assemble_pq(solve_first_order(star, mode="exact"))
        sp = assemble_script_p(solve_second_order(star, pq), star.Gamma, mdl, g)
        res = mp_scan(star, pq, sp)
        out.append(("delayed", s, res))
        rows += _scan_rows(f"delayed shift={s:g}", res, g)
    mdl = get_model("lq_nodelay")
    g = build_grid(mdl.T, mdl.delta, 25)
    p = mdl.params
    lq = lq_closed_form(p["Ab"][0, 0], p["Bu"][0, 0], p["Sx"][0, 0, 0], p["Su"][0, 0, 0], p["Q"][0, 0],
                        p["R"][0, 0], p["G"][0, 0], mdl.T, p["s0"][0, 0], float(mdl.xi(0.0)[0]), dt=g.dt)
    W = sample_brownian(g, classical_paths, mdl.d, seed + 1)
    for s in (0.0, shift):
        x, u = simulate_feedback(mdl, lambda k, t, X, s=s: lq.feedback(t, X[:, :1]) + s, W, g)
        star = star_data(mdl, u, W, g, x=x)
        res = mp_scan(star, classical_adjoints(star), None)
        out.append(("delay-free", s, res))
        rows += _scan_rows(f"delay-free shift={s:g}", res, g)
    ok, parts = True, []
    for case, s, res in out:
        if s == 0.0:
            good = res.verdict == "pass"
            parts.append(f"{case} optimum: worst p05/tol {np.min(res.margins()):.2f} ({res.verdict})")
        else:
            nst = len(res.strong_violations(10.0))
            good = nst >= 1
            parts.append(f"{case} +{s:g}: {nst} cells below -10 tol_mp")
        ok &= good
    return Outcome(11, "maximum principle", "pass" if ok else "fail", "; ".join(parts), mp_rows=rows)


# ------------------------------------------------------------------ 12. degeneration

@_timed
def degeneration(n_paths=2000, seed=3):
    """Gamma = 1 when f_y = f_z = 0; no-delay runs against the classical adjoints; Gamma transform rate."""
    parts, ok = [], True
    # (a) Gamma forced to one
    mdl = get_model("lq_delay")
    g = build_grid(mdl.T, mdl.delta, 16)
    W = sample_brownian(g, 4, mdl.d, seed)
    mdl0 = get_model("lq_delay", sigma0=0.0, D=0.0)
    star = star_data(mdl0, constant_control(mdl0, g, 0.3), W, g)
    one = GammaPath(np.ones_like(star.Gamma.values), np.zeros_like(star.Gamma.values),
                    np.zeros_like(star.Gamma.values))
    a = solve_first_order(star)
    b = solve_first_order(star, gamma=one)
    same_gamma = bool(np.all(star.Gamma.values == 1.0))
    same = same_gamma and all(np.array_equal(getattr(a, k), getattr(b, k)) for k in ("eta", "p", "q", "p_hat"))
    so_a = solve_second_order(star, assemble_pq(a))
    so_b = solve_second_order(star, assemble_pq(b), gamma=one)
    same &= all(np.array_equal(getattr(so_a, k), getattr(so_b, k)) for k in ("P1", "P2", "P3", "P4"))
    ok &= same
    parts.append(f"Gamma == 1 and bit-identical adjoints: {same}")
    # (b) delayed pipeline without delay against the classical scheme
    worst = 0.0
    basis = RegressionBasis(ridge_scale=0.0)
    for kw, P in (({"sigma0": 0.0, "C": 0.4, "x0": 0.0}, 4), ({"C": 0.4}, n_paths)):
        mdl = get_model("lq_nodelay", **kw)
        g = build_grid(mdl.T, mdl.delta, 16)
        u0 = 0.0 if P == 4 else 0.2
        st = star_data(mdl, constant_control(mdl, g, u0), sample_brownian(g, P, mdl.d, seed), g, basis=basis)
        adj = solve_first_order(st)
        ca = classical_adjoints(st)
        Pc = ca.p.shape[0]
        worst = max(worst, float(np.max(np.abs(adj.p[:Pc] - ca.p))), float(np.max(np.abs(adj.q[:Pc] - ca.q))))
        if st.deterministic:
            so = solve_second_order(st, assemble_pq(adj))
            sp = assemble_script_p(so, st.Gamma, mdl, g)
            worst = max(worst, float(np.max(np.abs(sp.values[:, 0, 0] - ca.P[0, :, 0, 0]))))
    ok &= worst <= 1e-8
    parts.append(f"no-delay vs classical max diff {worst:.1e} (<= 1e-8)")
    # (c) Gamma transform defect under refinement
    mdl = affine_quadratic_model("transform", T=1.0, delta=0.25, Ab=[0.3, 0, 0], Bu=[1.0], Sx=[0.4, 0, 0],
                                 s0=[[0.3]], fy=-0.3, Q=np.diag([1.0, 0, 0]), R=[[1.0]], G=np.diag([1.0, 0, 0]),
                                 xi=1.0, regime="affine")
    lad = []
    for m in (4, 8, 16, 32, 64):
        g = build_grid(mdl.T, mdl.delta, m)
        st = star_data(mdl, constant_control(mdl, g, 0.2), sample_brownian(g, n_paths, mdl.d, seed + 2), g)
        lad.append((g.dt, gamma_transform_check(classical_adjoints(st), st).residual, 0.0))
    rep = rate_fit(lad)
    good = 0.85 <= rep.slope <= 1.25
    ok &= good
    parts.append(f"transform residual slope {rep.slope:.3f} (band [0.85, 1.25])")
    rows = [("gamma transform residual", 0.0, e, r, 0.0, n_paths) for e, r, _ in lad]
    return Outcome(12, "degeneration checks", "pass" if ok else "fail", "; ".join(parts), rows)


# ------------------------------------------------------------------ suite

def full_suite(quick=False):
    """Every criterion in order. ``quick`` shrinks path counts for smoke runs."""
    s = 0.1 if quick else 1.0
    n = lambda v: max(2000, int(v * s) // 2 * 2)
    out = [forward_convergence(n_paths=n(10_000)), deterministic_drift(), picard_equivalence(),
           bsde_oracle(n_paths=n(100_000)), spike_rates(n_paths=n(20_000))]
    out += list(backward_rates(n_paths=n(10_000)))
    out += [adjoint_quadrature(), expansion(n_paths=max(20_000, n(40_000))), duality(n_paths=n(20_000)),
            maximum_principle(), degeneration()]
    return out
