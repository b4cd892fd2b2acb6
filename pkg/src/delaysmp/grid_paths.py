"""Time grids on [-delta, T], Brownian increments and delay features."""
from dataclasses import dataclass

import numpy as np

from .errors import IndexUnderflow, InvalidDelay, NonAlignedHorizon

ALIGN_TOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    T: float
    delta: float
    m_delay: int
    dt: float
    n_steps: int

    @property
    def pre_steps(self):
        return self.m_delay

    @property
    def times(self):
        """Grid times t_k for k = -m_delay..n_steps."""
        return np.arange(-self.m_delay, self.n_steps + 1) * self.dt

    def t(self, k):
        return k * self.dt

    def index_of(self, t, what="time"):
        """Grid index of a time that must sit on the grid."""
        r = t / self.dt
        k = int(round(r))
        if abs(r - k) > 1e-7:
            raise NonAlignedHorizon(f"{what} {t} is not a grid point (dt={self.dt})")
        return k

    def refine(self, factor):
        return build_grid(self.T, self.delta, self.m_delay * int(factor))


def build_grid(T, delta, m_delay):
    if not (0.0 < delta < T):
        raise InvalidDelay(f"delay must lie in (0, T); got delta={delta}, T={T}")
    m_delay = int(m_delay)
    if m_delay < 1:
        raise InvalidDelay("m_delay must be a positive integer")
    dt = delta / m_delay
    ratio = T / dt
    n = int(round(ratio))
    if abs(ratio - n) > ALIGN_TOL:
        raise NonAlignedHorizon(f"T/dt = {ratio!r} is not an integer (T={T}, dt={dt})")
    return TimeGrid(T=float(T), delta=float(delta), m_delay=m_delay, dt=dt, n_steps=n)


@dataclass(frozen=True)
class BrownianBundle:
    increments: np.ndarray  # (n_paths, n_steps, d)
    dt: float
    seed: int
    antithetic: bool = False

    @property
    def n_paths(self):
        return self.increments.shape[0]

    @property
    def d(self):
        return self.increments.shape[2]

    @property
    def n_steps(self):
        return self.increments.shape[1]

    def path(self):
        """Cumulative W(t_k) for k = 0..n_steps, shape (n_paths, n_steps + 1, d)."""
        W = np.zeros((self.n_paths, self.n_steps + 1, self.d))
        np.cumsum(self.increments, axis=1, out=W[:, 1:])
        return W

    def coarsen(self, factor):
        """Sum increments over blocks of `factor` steps (same noise, coarser grid)."""
        factor = int(factor)
        P, n, d = self.increments.shape
        if n % factor:
            raise NonAlignedHorizon(f"cannot coarsen {n} steps by {factor}")
        inc = self.increments.reshape(P, n // factor, factor, d).sum(axis=2)
        return BrownianBundle(inc, self.dt * factor, self.seed, self.antithetic)

    def subset(self, idx):
        return BrownianBundle(self.increments[idx], self.dt, self.seed, self.antithetic)


def path_stream(seed, index):
    """Counter-based generator for one scenario: keyed by (seed, index) only."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def sample_brownian(grid, n_paths, d, seed, antithetic=False):
    """I.i.d. N(0, dt) increments; path i is drawn from its own stream.

    With ``antithetic=True`` paths come in pairs (2j, 2j+1) sharing stream j
    with opposite signs, so ``n_paths`` must be even.
    """
    n_paths, d, n = int(n_paths), int(d), grid.n_steps
    if n_paths < 1 or d < 1:
        raise ValueError("n_paths and d must be >= 1")
    sd = np.sqrt(grid.dt)
    if antithetic:
        if n_paths % 2:
            raise ValueError("antithetic sampling needs an even path count")
        half = n_paths // 2
        base = np.empty((half, n, d))
        for j in range(half):
            base[j] = path_stream(seed, j).standard_normal((n, d))
        inc = np.empty((n_paths, n, d))
        inc[0::2] = base
        inc[1::2] = -base
    else:
        inc = np.empty((n_paths, n, d))
        for i in range(n_paths):
            inc[i] = path_stream(seed, i).standard_normal((n, d))
    return BrownianBundle(inc * sd, grid.dt, int(seed), antithetic)


@dataclass(frozen=True)
class PathMatrix:
    values: np.ndarray  # (n_paths, n_stored, dim)
    first_index: int

    @property
    def last_index(self):
        return self.first_index + self.values.shape[1] - 1

    def col(self, k):
        return k - self.first_index

    def at(self, k):
        c = k - self.first_index
        if c < 0 or k > self.last_index:
            raise IndexUnderflow(f"index {k} outside stored range [{self.first_index}, {self.last_index}]")
        return self.values[:, c]

    def window(self, k0, k1):
        """Values for grid indices k0..k1-1."""
        if k0 < self.first_index:
            raise IndexUnderflow(f"index {k0} below stored range start {self.first_index}")
        return self.values[:, k0 - self.first_index:k1 - self.first_index]


def delay_weights(grid, kappa):
    theta = -grid.delta + np.arange(grid.m_delay) * grid.dt
    return np.exp(kappa * theta)


def distributed_delay(path, k, kappa, grid):
    """Left-rectangle sum over theta_j = -delta + j dt of e^{kappa theta_j} x(t_k + theta_j) dt."""
    if k < 0:
        raise IndexUnderflow("distributed delay needs k >= 0")
    m = grid.m_delay
    if k - m < path.first_index:
        raise IndexUnderflow(f"history too short at k={k}: need index {k - m}, have {path.first_index}")
    w = delay_weights(grid, kappa)
    seg = path.window(k - m, k)
    return np.einsum("j,pjn->pn", w, seg) * grid.dt


def distributed_delay_all(path, kappa, grid, k_max=None):
    """x_tilde for every k = 0..k_max (vectorized sliding window)."""
    m = grid.m_delay
    if k_max is None:
        k_max = path.last_index
    if -m < path.first_index:
        raise IndexUnderflow("history shorter than m_delay")
    w = delay_weights(grid, kappa)
    seg = path.window(-m, k_max)  # indices -m..k_max-1
    win = np.lib.stride_tricks.sliding_window_view(seg, m, axis=1)  # (P, k_max+1, n, m)
    return np.einsum("pknj,j->pkn", win, w) * grid.dt


def delay_features(x, k, grid, kappa):
    """(x(t_k), x(t_k - delta), x_tilde(t_k))."""
    return x.at(k), x.at(k - grid.m_delay), distributed_delay(x, k, kappa, grid)


def features_all(x, grid, kappa):
    """Stacked (x, x_delta, x_tilde) at k = 0..n_steps, shape (P, n_steps+1, 3n)."""
    n = grid.n_steps
    m = grid.m_delay
    xs = x.window(0, n + 1)
    xd = x.window(-m, n + 1 - m)
    xt = distributed_delay_all(x, kappa, grid, n)
    return np.concatenate([xs, xd, xt], axis=2)
