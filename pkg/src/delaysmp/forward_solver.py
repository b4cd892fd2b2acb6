"""Pathwise solvers for the controlled delay SDE and strong-error measurement."""
import numpy as np

from .errors import DimensionMismatch, NoConvergence, NonFinite
from .grid_paths import PathMatrix, delay_weights
from .model_spec import ControlProcess


def _initial_block(model, grid, n_paths):
    m, n = grid.m_delay, grid.n_steps
    x = np.empty((n_paths, m + n + 1, model.n))
    x[:, :m + 1] = model.xi_path(grid)[None]
    return x


def _check_inputs(model, W, grid):
    if W.n_steps != grid.n_steps or abs(W.dt - grid.dt) > 1e-12 * max(1.0, grid.dt):
        raise DimensionMismatch(f"noise has {W.n_steps} steps of {W.dt}, grid has {grid.n_steps} of {grid.dt}")
    if W.d != model.d:
        raise DimensionMismatch(f"noise dimension {W.d} differs from model d={model.d}")


def _features(x, k, m, w, dt):
    """Stacked (x_k, x_{k-m}, x_tilde_k) from the raw array (index offset m)."""
    c = k + m
    xt = np.einsum("j,pjn->pn", w, x[:, c - m:c]) * dt
    return np.concatenate([x[:, c], x[:, c - m], xt], axis=1)


def euler_step(model, x, k, u, mu, dW, grid, w):
    """x_{k+1} from left-point features; x is the raw (P, m+n+1, n) array."""
    X = _features(x, k, grid.m_delay, w, grid.dt)
    t = k * grid.dt
    drift = model.b_at(t, X, u, mu)
    vol = model.sigma_at(t, X, u, mu)
    return x[:, k + grid.m_delay] + drift * grid.dt + np.einsum("pnd,pd->pn", vol, dW)


def simulate_sdde(model, u, W, grid):
    """Euler-Maruyama for the controlled delay SDE under an open-loop control process."""
    _check_inputs(model, W, grid)
    P, m = W.n_paths, grid.m_delay
    if u.values.shape[0] not in (1, P):
        raise DimensionMismatch("control has a path count different from the noise")
    x = _initial_block(model, grid, P)
    w = delay_weights(grid, model.kappa)
    ub = u.expand(P)
    for k in range(grid.n_steps):
        x[:, k + m + 1] = euler_step(model, x, k, ub.at(k), ub.mu_at(k), W.increments[:, k], grid, w)
        if not np.all(np.isfinite(x[:, k + m + 1])):
            raise NonFinite(f"state became non-finite at grid index {k + 1}", index=k + 1)
    return PathMatrix(x, -m)


def simulate_feedback(model, policy, W, grid):
    """Euler-Maruyama under a feedback law u_k = policy(k, t_k, X_k).

    Returns the state and the realized control as a per-path ControlProcess.
    """
    _check_inputs(model, W, grid)
    P, m = W.n_paths, grid.m_delay
    x = _initial_block(model, grid, P)
    w = delay_weights(grid, model.kappa)
    uvals = np.empty((P, m + grid.n_steps, model.k))
    uvals[:, :m] = model.gamma_path(grid)[None]
    for k in range(grid.n_steps):
        X = _features(x, k, m, w, grid.dt)
        uk = model.control_set.project(np.asarray(policy(k, k * grid.dt, X), float).reshape(P, model.k))
        uvals[:, k + m] = uk
        x[:, k + m + 1] = euler_step(model, x, k, uk, uvals[:, k], W.increments[:, k], grid, w)
        if not np.all(np.isfinite(x[:, k + m + 1])):
            raise NonFinite(f"state became non-finite at grid index {k + 1}", index=k + 1)
    return PathMatrix(x, -m), ControlProcess(uvals, m, "feedback")


def contraction_factor(k1, eps0, beta=2.0):
    """2^beta 3^(beta+1) k1^beta (eps0^beta + eps0^(beta/2))."""
    return 2.0 ** beta * 3.0 ** (beta + 1) * k1 ** beta * (eps0 ** beta + eps0 ** (beta / 2))


def admissible_window(k1, dt, beta=2.0, max_steps=None):
    """Largest grid multiple eps0 whose contraction factor stays below one."""
    L = 0
    while contraction_factor(k1, (L + 1) * dt, beta) < 1.0 and (max_steps is None or L + 1 <= max_steps):
        L += 1
        if L > 10 ** 6:
            break
    if L == 0:
        raise NoConvergence(f"no window of at least one step satisfies the contraction bound (k1={k1}, dt={dt})")
    return L * dt


def picard_splice_solve(model, u, W, grid, eps0, max_iter=100, tol=1e-12, beta=2.0, check_bound=True):
    """Fixed point of the discrete Picard map on consecutive windows of length eps0.

    On each window the iterate is x_{a+j} = x_a + sum_{i<a+j} [b_i dt + sigma_i dW_i]
    with features read from the current guess; windows are spliced end to end.
    """
    _check_inputs(model, W, grid)
    L_float = eps0 / grid.dt
    L = int(round(L_float))
    if L < 1 or abs(L - L_float) > 1e-7:
        raise ValueError(f"eps0={eps0} must be a positive multiple of dt={grid.dt}")
    if check_bound:
        c = contraction_factor(model.k1, eps0, beta)
        if not c < 1.0:
            raise NoConvergence(f"contraction estimate {c:.3g} >= 1 for eps0={eps0}, k1={model.k1}", max_iter)
    P, m, n = W.n_paths, grid.m_delay, grid.n_steps
    x = _initial_block(model, grid, P)
    w = delay_weights(grid, model.kappa)
    ub = u.expand(P)
    a = 0
    iterations = []
    while a < n:
        b_end = min(a + L, n)
        x[:, a + m + 1:b_end + m + 1] = x[:, a + m][:, None]
        for it in range(1, max_iter + 1):
            incr = np.empty((P, b_end - a, model.n))
            for j, k in enumerate(range(a, b_end)):
                X = _features(x, k, m, w, grid.dt)
                t = k * grid.dt
                drift = model.b_at(t, X, ub.at(k), ub.mu_at(k))
                vol = model.sigma_at(t, X, ub.at(k), ub.mu_at(k))
                incr[:, j] = drift * grid.dt + np.einsum("pnd,pd->pn", vol, W.increments[:, k])
            new = x[:, a + m][:, None] + np.cumsum(incr, axis=1)
            if not np.all(np.isfinite(new)):
                raise NonFinite(f"Picard iterate became non-finite on window starting at {a}", index=a)
            change = float(np.max(np.abs(new - x[:, a + m + 1:b_end + m + 1])))
            x[:, a + m + 1:b_end + m + 1] = new
            if change < tol:
                iterations.append(it)
                break
        else:
            raise NoConvergence(f"window starting at index {a} did not converge in {max_iter} iterations", max_iter)
        a = b_end
    return PathMatrix(x, -m), iterations


def restrict(fine, coarse_len, factor):
    """Fine path sampled at coarse nodes (both store indices from -m)."""
    return fine.values[:, ::factor][:, :coarse_len]


def strong_error_samples(x_coarse, x_fine, beta=2.0):
    """Per-path sup_t |x_c - x_f|^beta over coarse nodes."""
    Lc = x_coarse.values.shape[1]
    Lf = x_fine.values.shape[1]
    if (Lf - 1) % (Lc - 1):
        raise DimensionMismatch("fine grid is not a refinement of the coarse grid")
    factor = (Lf - 1) // (Lc - 1)
    diff = x_coarse.values - x_fine.values[:, ::factor]
    return np.max(np.linalg.norm(diff, axis=2), axis=1) ** beta


def strong_error(x_coarse, x_fine, beta=2.0):
    """Monte Carlo estimate of E sup_t |x_c - x_f|^beta."""
    return float(np.mean(strong_error_samples(x_coarse, x_fine, beta)))
