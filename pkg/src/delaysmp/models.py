"""Built-in model instances and the affine-quadratic model builder."""
import numpy as np

from .model_spec import ModelSpec, box


def _mat(a, shape):
    if a is None:
        return np.zeros(shape)
    return np.array(a, dtype=float).reshape(shape)


def affine_quadratic_model(name, n=1, d=1, k=1, T=1.0, delta=0.5, kappa=0.0,
                           Ab=None, Bu=None, Bmu=None, b0=None,
                           Sx=None, Su=None, Smu=None, s0=None, Sxu=None,
                           fy=0.0, Q=None, q=None, R=None, r=None, Rmu=None, rmu=None,
                           G=None, g=None, xi=1.0, gamma=0.0, U=(-1.0, 1.0),
                           regime="affine", k1=None, L1=None, L2=None):
    """Linear state dynamics with quadratic running and terminal costs.

    With X = (x, x_delta, x_tilde) in R^{3n}:
      b       = Ab X + Bu u + Bmu mu + b0
      sigma^i = Sx[i] X + Su[i] u + Smu[i] mu + s0[:, i] + sum_l u_l Sxu[i, :, l, :] x
      f       = fy y + X'QX + q'X + u'Ru + r'u + mu'Rmu mu + rmu'mu
      h       = X'GX + g'X
    """
    q3 = 3 * n
    Ab = _mat(Ab, (n, q3))
    Bu = _mat(Bu, (n, k))
    Bmu = _mat(Bmu, (n, k))
    b0 = _mat(b0, (n,))
    Sx = _mat(Sx, (d, n, q3))
    Su = _mat(Su, (d, n, k))
    Smu = _mat(Smu, (d, n, k))
    s0 = _mat(s0, (n, d))
    Sxu = _mat(Sxu, (d, n, k, n))
    Q = _mat(Q, (q3, q3))
    Q = 0.5 * (Q + Q.T)
    q = _mat(q, (q3,))
    R = _mat(R, (k, k))
    R = 0.5 * (R + R.T)
    r = _mat(r, (k,))
    Rmu = _mat(Rmu, (k, k))
    rmu = _mat(rmu, (k,))
    G = _mat(G, (q3, q3))
    G = 0.5 * (G + G.T)
    g = _mat(g, (q3,))
    fy = float(fy)

    def X_of(x, xd, xt):
        return np.concatenate([x, xd, xt], axis=1)

    def b(t, x, xd, xt, u, mu):
        X = X_of(x, xd, xt)
        return X @ Ab.T + u @ Bu.T + mu @ Bmu.T + b0

    def sigma(t, x, xd, xt, u, mu):
        X = X_of(x, xd, xt)
        out = (np.einsum("inq,pq->pni", Sx, X) + np.einsum("ink,pk->pni", Su, u)
               + np.einsum("ink,pk->pni", Smu, mu) + s0[None])
        return out + np.einsum("inlr,pl,pr->pni", Sxu, u, x)

    def f(t, x, xd, xt, y, z, u, mu):
        X = X_of(x, xd, xt)
        return (fy * y + np.einsum("pi,ij,pj->p", X, Q, X) + X @ q
                + np.einsum("pi,ij,pj->p", u, R, u) + u @ r
                + np.einsum("pi,ij,pj->p", mu, Rmu, mu) + mu @ rmu)

    def h(x, xd, xt):
        X = X_of(x, xd, xt)
        return np.einsum("pi,ij,pj->p", X, G, X) + X @ g

    def b_X(t, X, u, mu):
        return np.broadcast_to(Ab, (X.shape[0], n, q3)).copy()

    def b_XX(t, X, u, mu):
        return np.zeros((X.shape[0], n, q3, q3))

    def sigma_X(t, X, u, mu):
        P = X.shape[0]
        out = np.broadcast_to(np.transpose(Sx, (1, 0, 2)), (P, n, d, q3)).copy()
        bil = np.einsum("inlr,pl->pnir", Sxu, u)
        out[..., :n] += bil
        return out

    def sigma_XX(t, X, u, mu):
        return np.zeros((X.shape[0], n, d, q3, q3))

    def f_X(t, X, y, z, u, mu):
        return 2.0 * X @ Q + q

    def f_XX(t, X, y, z, u, mu):
        return np.broadcast_to(2.0 * Q, (X.shape[0], q3, q3)).copy()

    def f_y(t, X, y, z, u, mu):
        return np.full(X.shape[0], fy)

    def f_z(t, X, y, z, u, mu):
        return np.zeros((X.shape[0], d))

    def h_X(X):
        return 2.0 * X @ G + g

    def h_XX(X):
        return np.broadcast_to(2.0 * G, (X.shape[0], q3, q3)).copy()

    xi_fn = xi if callable(xi) else (lambda t, v=np.atleast_1d(np.asarray(xi, float)): v)
    gam_fn = gamma if callable(gamma) else (lambda t, v=np.atleast_1d(np.asarray(gamma, float)): v)
    lo, hi = U
    if k1 is None:
        k1 = max(np.abs(Ab).max(), np.abs(Sx).max(), np.abs(Sxu).max() * max(abs(lo), abs(hi)), 1e-12)
    if L1 is None:
        L1 = np.abs(b0).sum() + np.abs(s0).sum() + np.abs(Bu).sum() + np.abs(Bmu).sum() + \
            np.abs(Su).sum() + np.abs(Smu).sum() + 1e-12
    if L2 is None:
        L2 = np.inf
    return ModelSpec(
        name=name, n=n, d=d, k=k, T=T, delta=delta, kappa=kappa,
        b=b, sigma=sigma, f=f, h=h, xi=xi_fn, gamma_init=gam_fn,
        control_set=box(np.full(k, lo), np.full(k, hi)), regime=regime,
        derivs=dict(b_X=b_X, b_XX=b_XX, sigma_X=sigma_X, sigma_XX=sigma_XX, f_X=f_X, f_XX=f_XX,
                    f_y=f_y, f_z=f_z, h_X=h_X, h_XX=h_XX),
        L1=float(L1), L2=float(L2), k1=float(k1),
        params=dict(Ab=Ab, Bu=Bu, Bmu=Bmu, b0=b0, Sx=Sx, Su=Su, Smu=Smu, s0=s0, Sxu=Sxu,
                    fy=fy, Q=Q, q=q, R=R, r=r, Rmu=Rmu, rmu=rmu, G=G, g=g),
    )


# ------------------------------------------------------------------ built-ins

def linear_delay(a=-0.5, a_delay=0.4, a_tilde=0.3, s=0.4, s0=0.0, kappa=0.5, T=1.0, delta=0.5, x0=1.0):
    """Linear delay SDE with multiplicative noise (forward convergence tests)."""
    return affine_quadratic_model(
        "linear_delay", T=T, delta=delta, kappa=kappa,
        Ab=[a, a_delay, a_tilde], Bu=[1.0], Sx=[s, 0.0, 0.0], s0=[[s0]],
        Q=np.diag([1.0, 0.0, 0.0]), G=np.diag([1.0, 0.0, 0.0]), xi=x0, regime="affine")


def delay_drift(a=1.0, T=1.0, delta=0.5, x0=1.0):
    """dx = a x(t - delta) dt with constant history: the method-of-steps test case."""
    return affine_quadratic_model(
        "delay_drift", T=T, delta=delta, kappa=0.0, Ab=[0.0, a, 0.0], xi=x0,
        regime="deterministic-affine", k1=abs(a))


def lq_nodelay(A=0.3, B=1.0, C=0.0, D=0.0, sigma0=0.3, Q=1.0, R=1.0, G=1.0, T=1.0, delta=0.25,
               x0=1.0, U=(-4.0, 4.0)):
    """Delay-free scalar LQ: b = A x + B u, sigma = sigma0 + C x + D u, f = Q x^2 + R u^2, h = G x^2."""
    return affine_quadratic_model(
        "lq_nodelay", T=T, delta=delta, kappa=0.0,
        Ab=[A, 0.0, 0.0], Bu=[B], Sx=[C, 0.0, 0.0], Su=[D], s0=[[sigma0]],
        Q=np.diag([Q, 0.0, 0.0]), R=[[R]], G=np.diag([G, 0.0, 0.0]), xi=x0, U=U,
        regime="affine" if (C != 0.0 or sigma0 != 0.0 or D != 0.0) else "deterministic-affine")


def lq_delay(a=-0.3, a_delay=0.5, a_tilde=0.4, beta=1.0, beta_mu=0.6, sigma0=0.3, D=0.4,
             q=1.0, q_delay=0.5, r=0.5, r_mu=0.2, g=1.0, g_cross=0.4, g_delay=0.3, kappa=0.0,
             T=1.0, delta=0.5, x0=1.0, U=(-2.0, 2.0)):
    """Scalar delayed LQ with quadratic costs and control in the diffusion.

    h = g x^2 + g_cross x x_delta + g_delay x_delta^2 so that the delay-gated
    second-order terms are active.
    """
    Qm = np.diag([q, q_delay, 0.0])
    Gm = np.array([[g, 0.5 * g_cross, 0.0], [0.5 * g_cross, g_delay, 0.0], [0.0, 0.0, 0.0]])
    return affine_quadratic_model(
        "lq_delay", T=T, delta=delta, kappa=kappa,
        Ab=[a, a_delay, a_tilde], Bu=[beta], Bmu=[beta_mu], Su=[D], s0=[[sigma0]],
        Q=Qm, R=[[r]], Rmu=[[r_mu]], G=Gm, xi=x0, U=U, regime="affine")


def lq_delay_linear(a=-0.3, a_delay=0.5, a_tilde=0.4, beta=1.0, beta_mu=0.6, sigma0=0.3, D=0.4,
                    q_lin=1.0, r=0.5, g_lin=1.0, g_delay_lin=0.5, kappa=0.0, T=1.0, delta=0.5,
                    x0=1.0, U=(-2.0, 2.0)):
    """Delayed LQ whose state cost is linear: the optimal control is deterministic."""
    return affine_quadratic_model(
        "lq_delay_linear", T=T, delta=delta, kappa=kappa,
        Ab=[a, a_delay, a_tilde], Bu=[beta], Bmu=[beta_mu], Su=[D], s0=[[sigma0]],
        q=[q_lin, 0.0, 0.0], R=[[r]], g=[g_lin, g_delay_lin, 0.0], xi=x0, U=U,
        regime="deterministic-affine")


def duality_affine(a=-0.4, a_delay=0.5, a_tilde=0.3, beta=1.0, beta_mu=0.5, s_u=0.6, s_mu=0.3,
                   s_xu=0.5, fy=-0.3, q=0.8, q_delay=0.3, r=0.4, g=1.0, g_cross=0.5, g_tilde=0.2,
                   kappa=0.0, T=1.0, delta=0.5, x0=1.0, U=(-1.0, 1.0)):
    """Deterministic-coefficient instance for the duality experiment.

    The reference control is u* = 0 with zero history, so sigma vanishes
    along the reference trajectory and every adjoint is deterministic, while
    spikes inject noise through s_u, s_mu and the bilinear s_xu x u term.
    """
    Qm = np.diag([q, q_delay, 0.0])
    Gm = np.array([[g, 0.5 * g_cross, 0.0], [0.5 * g_cross, 0.0, 0.0], [0.0, 0.0, 0.0]])
    return affine_quadratic_model(
        "duality_affine", T=T, delta=delta, kappa=kappa,
        Ab=[a, a_delay, a_tilde], Bu=[beta], Bmu=[beta_mu], Su=[s_u], Smu=[s_mu],
        Sxu=np.array(s_xu).reshape(1, 1, 1, 1), fy=fy, Q=Qm, R=[[r]], G=Gm,
        g=[0.0, 0.0, g_tilde], xi=x0, gamma=0.0, U=U, regime="deterministic-affine")


def nonlinear_delay(T=1.0, delta=0.5, kappa=0.8, b_u=0.3, s_u=1.0, c_z=0.2):
    """General-regime scalar model with bounded first and second derivatives.

      b     = -0.5 x + 0.4 sin(x_d) + 0.3 x_t + b_u u + 0.5 mu
      sigma = 0.2 + 0.3 sin(x) + s_u u (1 + 0.25 cos(x_d)) + 0.2 mu
      f     = (-0.2 + 0.3 tanh x) y + 0.1 sin y + c_z sin z + 0.4 sin(x + x_d)
              + 0.5 cos(x_t) + 0.25 u^2 + 0.1 mu^2
      h     = log(1 + x^2) + 0.3 sin(x_d) + 0.2 x_t
    """
    def b(t, x, xd, xt, u, mu):
        return -0.5 * x + 0.4 * np.sin(xd) + 0.3 * xt + b_u * u + 0.5 * mu

    def sigma(t, x, xd, xt, u, mu):
        return (0.2 + 0.3 * np.sin(x) + s_u * u * (1 + 0.25 * np.cos(xd)) + 0.2 * mu)[:, :, None]

    def f(t, x, xd, xt, y, z, u, mu):
        x, xd, xt, u, mu = x[:, 0], xd[:, 0], xt[:, 0], u[:, 0], mu[:, 0]
        return ((-0.2 + 0.3 * np.tanh(x)) * y + 0.1 * np.sin(y) + c_z * np.sin(z[:, 0])
                + 0.4 * np.sin(x + xd) + 0.5 * np.cos(xt) + 0.25 * u ** 2 + 0.1 * mu ** 2)

    def h(x, xd, xt):
        return np.log1p(x[:, 0] ** 2) + 0.3 * np.sin(xd[:, 0]) + 0.2 * xt[:, 0]

    def b_X(t, X, u, mu):
        P = X.shape[0]
        out = np.zeros((P, 1, 3))
        out[:, 0, 0] = -0.5
        out[:, 0, 1] = 0.4 * np.cos(X[:, 1])
        out[:, 0, 2] = 0.3
        return out

    def b_XX(t, X, u, mu):
        out = np.zeros((X.shape[0], 1, 3, 3))
        out[:, 0, 1, 1] = -0.4 * np.sin(X[:, 1])
        return out

    def sigma_X(t, X, u, mu):
        out = np.zeros((X.shape[0], 1, 1, 3))
        out[:, 0, 0, 0] = 0.3 * np.cos(X[:, 0])
        out[:, 0, 0, 1] = -0.25 * s_u * u[:, 0] * np.sin(X[:, 1])
        return out

    def sigma_XX(t, X, u, mu):
        out = np.zeros((X.shape[0], 1, 1, 3, 3))
        out[:, 0, 0, 0, 0] = -0.3 * np.sin(X[:, 0])
        out[:, 0, 0, 1, 1] = -0.25 * s_u * u[:, 0] * np.cos(X[:, 1])
        return out

    def f_X(t, X, y, z, u, mu):
        x, xd, xt = X[:, 0], X[:, 1], X[:, 2]
        c = 0.4 * np.cos(x + xd)
        return np.stack([0.3 * (1 - np.tanh(x) ** 2) * y + c, c, -0.5 * np.sin(xt)], axis=1)

    def f_XX(t, X, y, z, u, mu):
        x, xd, xt = X[:, 0], X[:, 1], X[:, 2]
        s = -0.4 * np.sin(x + xd)
        th = np.tanh(x)
        out = np.zeros((X.shape[0], 3, 3))
        out[:, 0, 0] = -0.6 * th * (1 - th ** 2) * y + s
        out[:, 0, 1] = out[:, 1, 0] = s
        out[:, 1, 1] = s
        out[:, 2, 2] = -0.5 * np.cos(xt)
        return out

    def f_y(t, X, y, z, u, mu):
        return -0.2 + 0.3 * np.tanh(X[:, 0]) + 0.1 * np.cos(y)

    def f_z(t, X, y, z, u, mu):
        return c_z * np.cos(z)

    def h_X(X):
        x = X[:, 0]
        return np.stack([2 * x / (1 + x ** 2), 0.3 * np.cos(X[:, 1]), np.full_like(x, 0.2)], axis=1)

    def h_XX(X):
        x = X[:, 0]
        out = np.zeros((X.shape[0], 3, 3))
        out[:, 0, 0] = 2 * (1 - x ** 2) / (1 + x ** 2) ** 2
        out[:, 1, 1] = -0.3 * np.sin(X[:, 1])
        return out

    return ModelSpec(
        name="nonlinear_delay", n=1, d=1, k=1, T=T, delta=delta, kappa=kappa,
        b=b, sigma=sigma, f=f, h=h,
        xi=lambda t: np.array([0.5 + 0.2 * t]), gamma_init=lambda t: np.array([0.0]),
        control_set=box([-1.0], [1.0]), regime="general",
        derivs=dict(b_X=b_X, b_XX=b_XX, sigma_X=sigma_X, sigma_XX=sigma_XX, f_X=f_X, f_XX=f_XX,
                    f_y=f_y, f_z=f_z, h_X=h_X, h_XX=h_XX),
        L1=2.0, L2=1.0, k1=0.5)


BUILTINS = {
    "linear_delay": linear_delay,
    "delay_drift": delay_drift,
    "lq_nodelay": lq_nodelay,
    "lq_delay": lq_delay,
    "lq_delay_linear": lq_delay_linear,
    "duality_affine": duality_affine,
    "nonlinear_delay": nonlinear_delay,
}


def get_model(name, **overrides):
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise KeyError(f"unknown built-in model {name!r}; choose from {sorted(BUILTINS)}") from None
    return factory(**overrides)
