"""Signal-observation models and their augmented, noise-decorrelated form.

The original system has an initial condition correlated with the observation
noise ``N``.  Augmenting the signal to ``U = (X, Xbar, N)`` with
``Xbar_t = X_0 + int_0^t p(s) N_s ds`` turns it into a standard system

    dU = b(t, U) dt + c dNtilde + sigma dW,
    dZ = k(t, U) dt + dNtilde,

driven by Brownian motions ``(W, Ntilde)`` that are independent of ``X_0``.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ._validation import as_time_function, check_grid, check_matrix, tabulate
from .corrkernel import (
    KernelTable,
    build_kernel_table,
    bump_correlation,
    correlation_from_dict,
    linear_correlation,
    radar_correlation,
)
from .errors import ModelError


@dataclass(frozen=True)
class LinearModel:
    """``dX = a(t) X dt + sigma0 dW``, ``dZ = h(t) X dt + dN``.

    ``a`` and ``h`` are constant matrices or callables of time.
    """

    a: object
    sigma0: np.ndarray
    h: object
    corr: object
    init_mean: Optional[np.ndarray] = None

    def __post_init__(self):
        m, n = self.corr.dim_signal, self.corr.dim_obs
        object.__setattr__(self, "a", as_time_function(self.a))
        object.__setattr__(self, "h", as_time_function(self.h))
        sigma0 = check_matrix(self.sigma0, (m, None), "sigma0")
        object.__setattr__(self, "sigma0", sigma0)
        mean = np.zeros(m) if self.init_mean is None else np.asarray(self.init_mean, float).reshape(m)
        object.__setattr__(self, "init_mean", mean)
        check_matrix(self.a(0.0), (m, m), "a(t)")
        check_matrix(self.h(0.0), (n, m), "h(t)")

    @property
    def dim_signal(self):
        return self.corr.dim_signal

    @property
    def dim_obs(self):
        return self.corr.dim_obs

    @property
    def dim_noise(self):
        return self.sigma0.shape[1]

    @property
    def horizon(self):
        return self.corr.horizon

    def drift(self, t, x):
        return x @ self.a(t).T

    def obs(self, t, x):
        return x @ self.h(t).T


@dataclass(frozen=True)
class NonlinearModel:
    """``dX = a(X) dt + sigma0 dW``, ``dZ = h(X) dt + dN``.

    ``drift_a`` and ``obs_h`` must accept arrays of shape ``(..., m)`` and act
    row-wise.  ``lipschitz`` is an optional user estimate used only for
    step-size advice.
    """

    drift_a: Callable
    obs_h: Callable
    corr: object
    sigma0: Optional[np.ndarray] = None
    init_mean: Optional[np.ndarray] = None
    lipschitz: Optional[float] = None

    def __post_init__(self):
        m = self.corr.dim_signal
        sigma0 = np.eye(m) if self.sigma0 is None else check_matrix(self.sigma0, (m, None), "sigma0")
        object.__setattr__(self, "sigma0", sigma0)
        mean = np.zeros(m) if self.init_mean is None else np.asarray(self.init_mean, float).reshape(m)
        object.__setattr__(self, "init_mean", mean)
        probe = np.zeros((1, m))
        if np.shape(self.drift_a(probe)) != (1, m):
            raise ModelError("drift_a must map (P, m) arrays to (P, m)")
        if np.shape(self.obs_h(probe)) != (1, self.corr.dim_obs):
            raise ModelError("obs_h must map (P, m) arrays to (P, n)")

    dim_signal = LinearModel.dim_signal
    dim_obs = LinearModel.dim_obs
    dim_noise = LinearModel.dim_noise
    horizon = LinearModel.horizon

    def drift(self, t, x):
        return self.drift_a(x)

    def obs(self, t, x):
        return self.obs_h(x)

    def max_step(self):
        """Suggested Euler step, ``0.1 / L`` when a Lipschitz bound is known."""
        return None if not self.lipschitz else 0.1 / self.lipschitz


@dataclass(frozen=True)
class AugmentedCoefficients:
    """Coefficients of a linear-Gaussian (or augmented nonlinear) system.

    The augmented state is ``U = (X, Xbar, N)`` with ``Xbar`` built from the
    centered initial condition ``X_0 - init_mean``.

    For linear systems ``b`` has shape ``(K+1, d, d)`` and ``k`` shape
    ``(K+1, n, d)``, tabulated on ``grid``; entry ``j`` is used on the step
    ``[t_j, t_{j+1}]``.  For nonlinear systems ``b`` and ``k`` are ``None`` and
    ``drift_fn(j, U)`` / ``obs_fn(j, U)`` act on particle arrays ``(P, d)``.
    """

    grid: np.ndarray
    sigma: np.ndarray
    c: np.ndarray
    b: Optional[np.ndarray] = None
    k: Optional[np.ndarray] = None
    kernel_table: Optional[KernelTable] = None
    drift_fn: Optional[Callable] = field(default=None, repr=False)
    obs_fn: Optional[Callable] = field(default=None, repr=False)
    blocks: tuple = ()

    @property
    def dim_u(self):
        return self.sigma.shape[0]

    @property
    def dim_obs(self):
        return self.c.shape[1]

    @property
    def is_linear(self):
        return self.b is not None

    def drift(self, j, u):
        if self.drift_fn is not None:
            return self.drift_fn(j, u)
        return u @ self.b[j].T

    def obs_drift(self, j, u):
        if self.obs_fn is not None:
            return self.obs_fn(j, u)
        return u @ self.k[j].T


def _constant_blocks(m, n, l, sigma0):
    d = 2 * m + n
    sigma = np.zeros((d, l))
    sigma[:m] = sigma0
    c = np.zeros((d, n))
    c[2 * m:] = np.eye(n)
    return sigma, c


def build_augmented_linear(model, grid, table=None):
    """Tabulate ``b(t)`` and ``k(t)`` of the augmented linear system.

    ``b = [[a, 0, 0], [0, 0, p], [0, g', r]]`` and ``k = [h, g', r]`` in the
    block order ``(X, Xbar, N)``.
    """
    grid = check_grid(grid)
    m, n, l = model.dim_signal, model.dim_obs, model.dim_noise
    if table is None:
        table = build_kernel_table(model.corr, grid)
    elif not np.array_equal(table.grid, grid):
        raise ModelError("kernel table grid differs from the requested grid")
    d = 2 * m + n
    K = len(grid)
    a = tabulate(model.a, grid)
    h = tabulate(model.h, grid)
    b = np.zeros((K, d, d))
    b[:, :m, :m] = a
    b[:, m:2 * m, 2 * m:] = table.p
    b[:, 2 * m:, m:2 * m] = table.g_prime
    b[:, 2 * m:, 2 * m:] = table.r
    k = np.zeros((K, n, d))
    k[:, :, :m] = h
    k[:, :, m:2 * m] = table.g_prime
    k[:, :, 2 * m:] = table.r
    sigma, c = _constant_blocks(m, n, l, model.sigma0)
    for arr in (b, k, sigma, c):
        arr.setflags(write=False)
    return AugmentedCoefficients(grid, sigma, c, b=b, k=k, kernel_table=table, blocks=(m, m, n))


def build_augmented_nonlinear(model, grid, table=None):
    """Augmented drift ``b(U) = (a(X), p N, g' Xbar + r N)`` and ``k(U) = h(X) + g' Xbar + r N``."""
    grid = check_grid(grid)
    m, n, l = model.dim_signal, model.dim_obs, model.dim_noise
    if table is None:
        table = build_kernel_table(model.corr, grid)
    gp, r, p = table.g_prime, table.r, table.p

    def drift_fn(j, u):
        x, xb, nn = u[..., :m], u[..., m:2 * m], u[..., 2 * m:]
        t = grid[j]
        anticip = xb @ gp[j].T + nn @ r[j].T
        return np.concatenate([model.drift(t, x), nn @ p[j].T, anticip], axis=-1)

    def obs_fn(j, u):
        x, xb, nn = u[..., :m], u[..., m:2 * m], u[..., 2 * m:]
        return model.obs(grid[j], x) + xb @ gp[j].T + nn @ r[j].T

    sigma, c = _constant_blocks(m, n, l, model.sigma0)
    return AugmentedCoefficients(
        grid, sigma, c, kernel_table=table, drift_fn=drift_fn, obs_fn=obs_fn, blocks=(m, m, n)
    )


def build_augmented(model, grid, table=None):
    if isinstance(model, LinearModel):
        return build_augmented_linear(model, grid, table)
    return build_augmented_nonlinear(model, grid, table)


def classical_coefficients(model, grid):
    """Coefficients of the filter that ignores the anticipation (state ``X`` only)."""
    grid = check_grid(grid)
    m, n = model.dim_signal, model.dim_obs
    b = tabulate(model.a, grid)
    k = tabulate(model.h, grid)
    return AugmentedCoefficients(grid, model.sigma0.copy(), np.zeros((m, n)), b=b, k=k, blocks=(m,))


def augmented_initial_state(model):
    """Mean and covariance of ``U_0 = (X_0, X_0 - mean, 0)``.

    The middle block starts from the centered initial condition: only the
    centered part is correlated with the (zero-mean) observation noise, so
    only it enters the noise transform.
    """
    m, n = model.dim_signal, model.dim_obs
    mu, cov = model.init_mean, model.corr.sigma0_cov
    u0 = np.concatenate([mu, np.zeros(m), np.zeros(n)])
    p0 = np.zeros((2 * m + n, 2 * m + n))
    p0[:m, :m] = p0[:m, m:2 * m] = p0[m:2 * m, :m] = p0[m:2 * m, m:2 * m] = cov
    return u0, p0


def xbar_path(corr, n_path, x0, grid):
    """``Xbar_t = X_0 + int_0^t rho''(s)^T N_s ds`` by cumulative trapezoid.

    ``n_path`` has shape ``(K+1, n)`` or ``(P, K+1, n)``; ``x0`` ``(m,)`` or
    ``(P, m)``.  Pass the centered initial condition to obtain the middle
    block of the augmented state.
    """
    grid = check_grid(grid)
    n_path = np.asarray(n_path, dtype=float)
    p_right = np.stack([corr.rho_second_at(t, +1).T for t in grid])
    p_left = np.stack([corr.rho_second_at(t, -1).T for t in grid])
    integrand_r = np.einsum("kmn,...kn->...km", p_right, n_path)
    integrand_l = np.einsum("kmn,...kn->...km", p_left, n_path)
    dt = np.diff(grid)[:, None]
    steps = 0.5 * dt * (integrand_r[..., :-1, :] + integrand_l[..., 1:, :])
    out = np.zeros(n_path.shape[:-1] + (corr.dim_signal,))
    out[..., 1:, :] = np.cumsum(steps, axis=-2)
    return out + np.asarray(x0, dtype=float)[..., None, :]


# -- named scenarios and model files ----------------------------------------------

RADAR_KAPPA = 0.5
RADAR_SIGMA1 = 103.0 / 3.0
RADAR_SIGMA2 = 1.3
RADAR_SIGMA_THETA = 0.017


def radar_model(gamma, horizon=1.0, kappa=RADAR_KAPPA, sigma1=RADAR_SIGMA1,
                sigma2=RADAR_SIGMA2, sigma_theta=RADAR_SIGMA_THETA):
    """Range/bearing tracking model with initial condition ``xi + gamma M N_1``.

    State ``(r, r', u1, theta, theta', u2)``; range and bearing are observed
    with gain ``1 / sigma_theta``.
    """
    if gamma < 0:
        raise ModelError("gamma must be nonnegative")
    a = np.zeros((6, 6))
    a[0, 1] = a[1, 2] = a[3, 4] = a[4, 5] = 1.0
    a[2, 2] = a[5, 5] = kappa - 1.0
    sigma0 = np.zeros((6, 2))
    sigma0[2, 0] = sigma1
    sigma0[5, 1] = sigma2
    h = np.zeros((2, 6))
    h[0, 0] = h[1, 3] = 1.0 / sigma_theta
    return LinearModel(a, sigma0, h, radar_correlation(gamma, horizon), np.zeros(6))


def scalar_demo_model(horizon=0.9, init_mean=1.0):
    """Scalar ``a = 0``, ``h = 1``, ``Sigma = 1``, ``rho(t) = t``."""
    corr = linear_correlation([[1.0]], [[1.0]], horizon)
    return LinearModel([[0.0]], [[1.0]], [[1.0]], corr, [init_mean])


def scalar_bump_model(horizon=20.0, strength=1.0, support=0.5):
    """Scalar ``a = 0``, ``h = 1`` with ``rho'`` a bump supported on ``[0, support]``."""
    corr = bump_correlation([[strength]], support, [[1.0]], horizon)
    return LinearModel([[0.0]], [[1.0]], [[1.0]], corr, [0.0])


SCENARIOS = ("radar", "scalar-demo", "scalar-bump")


def scenario(name, gamma=1.0, horizon=None):
    """Built-in model addressed by string id, one of ``SCENARIOS``.

    ``gamma`` is the anticipation strength of the radar model and the bump
    amplitude of ``"scalar-bump"``; the scalar demo ignores it.
    """
    kw = {} if horizon is None else {"horizon": horizon}
    if name == "radar":
        return radar_model(gamma, **kw)
    if name == "scalar-demo":
        return scalar_demo_model(**kw)
    if name == "scalar-bump":
        return scalar_bump_model(strength=gamma, **kw)
    raise ModelError(f"unknown scenario {name!r}")


def model_from_dict(d):
    """Linear model from a JSON description.

    ``{"type": "linear", "a": [[...]], "h": [[...]], "sigma0": [[...]],
    "init_mean": [...], "corr": {"family": ..., ...}}``
    """
    if d.get("type", "linear") != "linear":
        raise ModelError("only linear model files are supported")
    try:
        corr = correlation_from_dict(d["corr"])
        return LinearModel(d["a"], d["sigma0"], d["h"], corr, d.get("init_mean"))
    except KeyError as exc:
        raise ModelError(f"model description is missing field {exc}") from None


def model_to_dict(model):
    t0 = 0.0
    return {
        "type": "linear",
        "a": model.a(t0).tolist(),
        "h": model.h(t0).tolist(),
        "sigma0": model.sigma0.tolist(),
        "init_mean": model.init_mean.tolist(),
        "corr": model.corr.to_dict(),
    }


def load_model(path):
    with open(Path(path)) as fh:
        return model_from_dict(json.load(fh))
