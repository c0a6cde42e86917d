"""Kalman-Bucy filtering of the augmented linear system.

The covariance ``P`` does not depend on the data, so it is computed once per
model and grid and shared by every observation path.  Two time-stepping
schemes are offered for the mean:

``"euler"``
    Euler-Maruyama on the continuous filter equation, driven by the observed
    increments, with ``P`` from a fourth-order Runge-Kutta Riccati solver.
``"discrete"``
    The exact Kalman filter of the Euler-discretized augmented system.  It is
    unconditionally stable, which matters when the observation gain is large
    compared with the grid step.

Both produce an update ``U_{k+1} = A_k U_k + G_k dZ_k`` with deterministic
``A_k`` and ``G_k``; :class:`FilterGains` stores them.
"""

import csv
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._validation import check_grid, check_matrix, check_paths
from .corrkernel import COND_MAX, TOL_PSD
from .errors import GridMismatch, ModelError, PSDViolation, RiccatiBlowup, SingularConditioning
from .models import augmented_initial_state, build_augmented_linear, classical_coefficients

BLOWUP_CAP = 1e12
SCHEMES = ("euler", "discrete")


# -- Riccati equation -------------------------------------------------------------


def _riccati_rhs(P, F, Q, k):
    Pk = P @ k.T
    return F @ P + P @ F.T + Q - Pk @ Pk.T


def _closed_loop_radius(P, F, k):
    return max(np.abs(np.linalg.eigvals(F - P @ k.T @ k)).max(), 1e-300)


def _check_psd(P, t, tol_psd, blowup_cap):
    norm = np.abs(P).max()
    if not np.isfinite(norm) or norm > blowup_cap:
        raise RiccatiBlowup(f"|P| exceeded {blowup_cap:g} at t={t:.6g}")
    lo = np.linalg.eigvalsh(P)[0]
    if lo < -tol_psd * max(1.0, norm):
        raise PSDViolation(f"P has eigenvalue {lo:.3e} at t={t:.6g}")


def riccati_integrate(coeffs, p0, grid=None, *, blowup_cap=BLOWUP_CAP, tol_psd=TOL_PSD,
                      stability_factor=0.5):
    """Integrate ``P' = P b^T + b P + A - (c + P k^T)(c + P k^T)^T``, ``A = cc^T + sigma sigma^T``.

    Coefficients are held at their grid-point value over each step.  Each
    step is split into classical RK4 substeps no longer than
    ``stability_factor / rho``, with ``rho`` the spectral radius of the
    closed-loop matrix ``b - c k - P k^T k``; on non-stiff problems this is a
    single substep per grid step.  ``P`` is symmetrized after every substep.

    Parameters
    ----------
    coeffs : AugmentedCoefficients
        Linear coefficients tabulated on ``grid``.
    p0 : ndarray
        Symmetric positive semidefinite initial covariance.
    grid : ndarray, optional
        Defaults to ``coeffs.grid``; if given it must match.

    Returns
    -------
    ndarray of shape ``(K+1, d, d)``

    Raises
    ------
    RiccatiBlowup
        If an entry of ``P`` exceeds ``blowup_cap`` or becomes non-finite.
    PSDViolation
        If an eigenvalue drops below ``-tol_psd * max(1, |P|)``.
    """
    grid = coeffs.grid if grid is None else check_grid(grid)
    if not np.array_equal(grid, coeffs.grid):
        raise GridMismatch("coefficients were tabulated on a different grid")
    if not coeffs.is_linear:
        raise ModelError("the Riccati equation needs linear coefficients")
    d = coeffs.dim_u
    P = check_matrix(p0, (d, d), "p0").copy()
    P = 0.5 * (P + P.T)
    _check_psd(P, 0.0, tol_psd, blowup_cap)
    # in the closed-loop form F = b - c k the c c^T terms cancel
    Q = coeffs.sigma @ coeffs.sigma.T
    out = np.empty((len(grid), d, d))
    out[0] = P
    for j in range(len(grid) - 1):
        F = coeffs.b[j] - coeffs.c @ coeffs.k[j]
        k = coeffs.k[j]
        left = grid[j + 1] - grid[j]
        while left > 0:
            h = min(left, stability_factor / _closed_loop_radius(P, F, k))
            if h > left * (1 - 1e-12):
                h = left
            k1 = _riccati_rhs(P, F, Q, k)
            k2 = _riccati_rhs(P + 0.5 * h * k1, F, Q, k)
            k3 = _riccati_rhs(P + 0.5 * h * k2, F, Q, k)
            k4 = _riccati_rhs(P + h * k3, F, Q, k)
            P = P + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            P = 0.5 * (P + P.T)
            left -= h
        _check_psd(P, grid[j + 1], tol_psd, blowup_cap)
        out[j + 1] = P
    return out


# -- gains ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterGains:
    """Deterministic part of a linear filter on a grid.

    ``transition[k]`` and ``gain[k]`` give ``U_{k+1} = transition[k] U_k +
    gain[k] dZ_k``; ``obs[k]`` is ``k(t_k)`` so that the innovation increment
    is ``dZ_k - obs[k] U_k dt_k``.  ``p`` is the covariance path.
    """

    grid: np.ndarray
    transition: np.ndarray
    gain: np.ndarray
    obs: np.ndarray
    p: np.ndarray
    scheme: str
    blocks: tuple = ()


def euler_gains(coeffs, p_path):
    """Gains of the Euler-Maruyama scheme for the continuous filter equation."""
    grid = coeffs.grid
    if p_path.shape[0] != len(grid):
        raise GridMismatch("covariance path and grid differ in length")
    dt = np.diff(grid)[:, None, None]
    b, k = coeffs.b[:-1], coeffs.k[:-1]
    gain = coeffs.c[None] + p_path[:-1] @ k.transpose(0, 2, 1)
    eye = np.eye(coeffs.dim_u)
    transition = eye + (b - gain @ k) * dt
    return FilterGains(grid, transition, gain, coeffs.k, p_path, "euler", coeffs.blocks)


def discrete_gains(coeffs, p0, *, tol_psd=TOL_PSD, blowup_cap=BLOWUP_CAP):
    """Exact Kalman filter for the Euler-discretized augmented system.

    The discretization is ``U_{k+1} = (I + b_k dt) U_k + c dNt_k + sigma dW_k``
    and ``dZ_k = k_k U_k dt + dNt_k``; the shared noise ``dNt_k`` makes the
    state and observation noises correlated.  ``p[k]`` is the covariance of
    ``U_k`` given the increments before ``t_k``.
    """
    grid = coeffs.grid
    d, n = coeffs.dim_u, coeffs.dim_obs
    P = check_matrix(p0, (d, d), "p0").copy()
    P = 0.5 * (P + P.T)
    K = len(grid) - 1
    dts = np.diff(grid)
    Q = coeffs.c @ coeffs.c.T + coeffs.sigma @ coeffs.sigma.T
    p_path = np.empty((K + 1, d, d))
    transition = np.empty((K, d, d))
    gain = np.empty((K, d, n))
    p_path[0] = P
    eye_d, eye_n = np.eye(d), np.eye(n)
    for j in range(K):
        dt = dts[j]
        F = eye_d + coeffs.b[j] * dt
        H = coeffs.k[j] * dt
        S = H @ P @ H.T + dt * eye_n
        cross = F @ P @ H.T + coeffs.c * dt
        G = np.linalg.solve(S, cross.T).T
        P = F @ P @ F.T + Q * dt - G @ cross.T
        P = 0.5 * (P + P.T)
        _check_psd(P, grid[j + 1], tol_psd, blowup_cap)
        p_path[j + 1] = P
        transition[j] = F - G @ H
        gain[j] = G
    return FilterGains(grid, transition, gain, coeffs.k, p_path, "discrete", coeffs.blocks)


def compute_gains(coeffs, p0, scheme="euler", **kwargs):
    if scheme == "euler":
        return euler_gains(coeffs, riccati_integrate(coeffs, p0, **kwargs))
    if scheme == "discrete":
        return discrete_gains(coeffs, p0, **kwargs)
    raise ModelError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


# -- filtering -------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterRun:
    """Conditional mean and covariance paths of a linear filter.

    ``u_hat`` and ``innovation`` have shape ``(K+1, d)`` (or ``(P, K+1, d)``
    when several observation paths were filtered at once).  When the run was
    recorded at selected grid indices only, ``record`` lists them and the
    time axis of ``u_hat`` and ``innovation`` follows that list.
    """

    grid: np.ndarray
    u_hat: np.ndarray
    p: np.ndarray
    innovation: np.ndarray
    dim_signal: int
    record: Optional[np.ndarray] = None

    @property
    def times(self):
        return self.grid if self.record is None else self.grid[self.record]

    @property
    def x_hat(self):
        return self.u_hat[..., :self.dim_signal]

    @property
    def p11(self):
        p = self.p if self.record is None else self.p[self.record]
        return p[:, :self.dim_signal, :self.dim_signal]

    def to_csv(self, path, index=0):
        """Columns ``t, x_hat_i, p11_ii, innovation_j`` for one filtered path."""
        x = self.x_hat[index] if self.x_hat.ndim == 3 else self.x_hat
        nu = self.innovation[index] if self.innovation.ndim == 3 else self.innovation
        var = np.diagonal(self.p11, axis1=1, axis2=2)
        m, n = x.shape[1], nu.shape[1]
        header = (["t"] + [f"x_hat_{i + 1}" for i in range(m)] + [f"p11_{i + 1}" for i in range(m)]
                  + [f"innovation_{j + 1}" for j in range(n)])
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            for row in np.column_stack([self.times, x, var, nu]):
                wr.writerow([repr(float(v)) for v in row])

    def summary(self, truth=None, index=0):
        """Terminal mean and covariance, plus the mean-square error against ``truth``."""
        x = self.x_hat[index] if self.x_hat.ndim == 3 else self.x_hat
        out = {
            "t_final": float(self.times[-1]),
            "terminal_mean": x[-1].tolist(),
            "terminal_cov": self.p11[-1].tolist(),
        }
        if truth is not None:
            truth = np.asarray(truth, dtype=float)
            x_all = self.x_hat if self.x_hat.ndim == 3 else self.x_hat[None]
            truth = truth if truth.ndim == 3 else truth[None]
            if self.record is not None:
                truth = truth[:, self.record]
            out["mse"] = np.mean((x_all[:, -1] - truth[:, -1]) ** 2, axis=0).tolist()
        return out

    def to_json(self, path, truth=None):
        with open(path, "w") as fh:
            json.dump(self.summary(truth), fh, indent=2)


def _dim_signal(blocks, default):
    return blocks[0] if blocks else default


def run_gains(gains, z_path, u0, record=None):
    """Filter one or several observation paths with precomputed gains."""
    grid = gains.grid
    d, n = gains.transition.shape[1], gains.gain.shape[2]
    z, batched = check_paths(z_path, grid, n)
    u0 = np.asarray(u0, dtype=float).reshape(d)
    dz = np.diff(z, axis=1)
    dts = np.diff(grid)
    K = len(grid) - 1
    idx = np.arange(K + 1) if record is None else np.asarray(record, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() > K):
        raise GridMismatch("record indices fall outside the grid")
    slot = {int(k): i for i, k in enumerate(idx)}
    Pn = z.shape[0]
    u_out = np.empty((Pn, len(idx), d))
    nu_out = np.empty((Pn, len(idx), n))
    u = np.broadcast_to(u0, (Pn, d)).copy()
    nu = np.zeros((Pn, n))
    if 0 in slot:
        u_out[:, slot[0]], nu_out[:, slot[0]] = u, nu
    At = gains.transition.transpose(0, 2, 1)
    Gt = gains.gain.transpose(0, 2, 1)
    kt = gains.obs.transpose(0, 2, 1)
    for j in range(K):
        nu = nu + dz[:, j] - (u @ kt[j]) * dts[j]
        u = u @ At[j] + dz[:, j] @ Gt[j]
        if j + 1 in slot:
            u_out[:, slot[j + 1]], nu_out[:, slot[j + 1]] = u, nu
    if not batched:
        u_out, nu_out = u_out[0], nu_out[0]
    return FilterRun(grid, u_out, gains.p, nu_out, _dim_signal(gains.blocks, d),
                     None if record is None else idx)


def filter_run(coeffs, z_path, p_path, u0, grid=None, record=None):
    """Euler-Maruyama filter ``U_{k+1} = U_k + b_k U_k dt + (c + P_k k_k^T)(dZ_k - k_k U_k dt)``.

    ``z_path`` is ``(K+1, n)`` or a stack ``(P, K+1, n)``.

    Raises
    ------
    GridMismatch
        If the observation path or ``p_path`` does not match the grid.
    """
    if grid is not None and not np.array_equal(check_grid(grid), coeffs.grid):
        raise GridMismatch("coefficients were tabulated on a different grid")
    return run_gains(euler_gains(coeffs, np.asarray(p_path, dtype=float)), z_path, u0, record)


def anticipative_gains(model, grid, scheme="euler", table=None, **kwargs):
    coeffs = build_augmented_linear(model, grid, table)
    u0, p0 = augmented_initial_state(model)
    return compute_gains(coeffs, p0, scheme, **kwargs), u0


def classical_gains(model, grid, scheme="euler", **kwargs):
    coeffs = classical_coefficients(model, grid)
    return compute_gains(coeffs, model.corr.sigma0_cov, scheme, **kwargs), model.init_mean


def anticipative_filter(model, z_path, grid, scheme="euler", record=None):
    """Filter ``z_path`` with the anticipation-aware filter."""
    gains, u0 = anticipative_gains(model, check_grid(grid), scheme)
    return run_gains(gains, z_path, u0, record)


def classical_baseline(model, z_path, grid, scheme="euler", record=None):
    """Kalman-Bucy filter for ``(X, Z)`` that ignores the correlation.

    The prior of ``X_0`` is ``N(init_mean, Sigma)`` and the observation noise
    is treated as independent of it; ``z_path`` is typically generated with
    the correlation in place.
    """
    gains, u0 = classical_gains(model, check_grid(grid), scheme)
    return run_gains(gains, z_path, u0, record)


def affine_response(gains, u0, index=-1):
    """Return ``(alpha, beta)`` with ``x_hat(t_index) = alpha + sum_k beta[k] dZ_k``.

    ``beta`` has shape ``(K, m, n)``; the filter is linear in the increments so
    this is exact.
    """
    K = len(gains.grid) - 1
    n = gains.gain.shape[2]
    t_idx = index % (K + 1)
    m = _dim_signal(gains.blocks, gains.transition.shape[1])
    beta = np.zeros((K, m, n))
    prop = np.eye(gains.transition.shape[1])
    for j in range(t_idx - 1, -1, -1):
        beta[j] = (prop @ gains.gain[j])[:m]
        prop = prop @ gains.transition[j]
    alpha = (prop @ np.asarray(u0, dtype=float))[:m]
    return alpha, beta


# -- Gaussian conditioning oracle -------------------------------------------------------


@dataclass(frozen=True)
class GaussianOracle:
    """Exact conditional law of the discretized signal given past increments.

    The signal follows the Euler scheme and the increments the trapezoid
    scheme used by :mod:`anticipative.simulate`.  At target time ``t_j`` the
    conditioning set is ``dZ_0, ..., dZ_{j-1}``.
    """

    grid: np.ndarray
    target_index: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    cov: np.ndarray
    z_mean: np.ndarray
    z_cov: np.ndarray

    def mean(self, z_path):
        """Conditional means at the targets, shape ``(T, m)`` (or ``(P, T, m)``)."""
        z, batched = check_paths(z_path, self.grid, self.z_mean.shape[1])
        dz = np.diff(z, axis=1).reshape(z.shape[0], -1)
        out = self.alpha[None] + np.einsum("tmk,pk->ptm", self.beta, dz)
        return out if batched else out[0]

    def covariance(self):
        return self.cov.copy()


def gaussian_conditioning_oracle(model, grid, target_times, cond_max=COND_MAX, max_steps=256):
    """Condition the discretized signal on observation increments by dense linear algebra.

    The primitive Gaussian vector is ``(X_0, dW_0..dW_{K-1}, dN_0..dN_{K-1})``
    with ``Cov(X_0, dN_k) = (rho(t_{k+1}) - rho(t_k))^T``.

    Raises
    ------
    SingularConditioning
        If the covariance of the conditioning increments is numerically singular.
    """
    grid = check_grid(grid)
    K = len(grid) - 1
    if K > max_steps:
        raise ModelError(f"oracle limited to {max_steps} steps, got {K}")
    m, n, l = model.dim_signal, model.dim_obs, model.dim_noise
    corr = model.corr
    target_index = []
    for t in np.atleast_1d(target_times):
        j = int(np.argmin(np.abs(grid - t)))
        if abs(grid[j] - t) > 1e-12 * max(1.0, abs(t)):
            raise GridMismatch(f"target time {t} is not a grid point")
        target_index.append(j)
    target_index = np.array(target_index)

    dim = m + K * (l + n)
    w_off, n_off = m, m + K * l
    dts = np.diff(grid)
    cov = np.zeros((dim, dim))
    cov[:m, :m] = corr.sigma0_cov
    for k in range(K):
        cov[w_off + k * l:w_off + (k + 1) * l, w_off + k * l:w_off + (k + 1) * l] = dts[k] * np.eye(l)
        sl = slice(n_off + k * n, n_off + (k + 1) * n)
        cov[sl, sl] = dts[k] * np.eye(n)
        d_rho = corr.rho_at(grid[k + 1]) - corr.rho_at(grid[k])
        cov[:m, sl] = d_rho.T
        cov[sl, :m] = d_rho
    mean = np.zeros(dim)
    mean[:m] = model.init_mean

    x_maps = np.zeros((K + 1, m, dim))
    x_maps[0][:, :m] = np.eye(m)
    z_map = np.zeros((K * n, dim))
    for k in range(K):
        a_k = model.a(grid[k])
        x_maps[k + 1] = x_maps[k] + dts[k] * a_k @ x_maps[k]
        x_maps[k + 1][:, w_off + k * l:w_off + (k + 1) * l] += model.sigma0
        rows = 0.5 * dts[k] * (model.h(grid[k]) @ x_maps[k] + model.h(grid[k + 1]) @ x_maps[k + 1])
        rows[:, n_off + k * n:n_off + (k + 1) * n] += np.eye(n)
        z_map[k * n:(k + 1) * n] = rows

    z_mean = z_map @ mean
    z_cov = z_map @ cov @ z_map.T
    alphas, betas, covs = [], [], []
    for j in target_index:
        xm = x_maps[j]
        prior_mean, prior_cov = xm @ mean, xm @ cov @ xm.T
        beta = np.zeros((m, K * n))
        if j == 0:
            alphas.append(prior_mean)
            betas.append(beta)
            covs.append(0.5 * (prior_cov + prior_cov.T))
            continue
        s22 = z_cov[:j * n, :j * n]
        eig = np.linalg.eigvalsh(s22)
        if eig[0] <= 0 or eig[-1] / eig[0] > cond_max:
            raise SingularConditioning(f"observation covariance is singular at t={grid[j]:.6g}")
        s12 = xm @ cov @ z_map[:j * n].T
        coef = np.linalg.solve(s22, s12.T).T
        beta[:, :j * n] = coef
        alphas.append(prior_mean - coef @ z_mean[:j * n])
        betas.append(beta)
        post = prior_cov - coef @ s12.T
        covs.append(0.5 * (post + post.T))
    return GaussianOracle(grid, target_index, np.array(alphas), np.array(betas), np.array(covs),
                          z_mean.reshape(K, n), z_cov)


def affine_rms_gap(alpha_f, beta_f, oracle, target=-1):
    """Root-mean-square gap between a linear filter and the oracle at one target.

    The gap is averaged over the law of the observation increments, so no
    sampling is involved.  Returns ``(gap, oracle_rms)``: the RMS of
    ``filter - oracle`` and the RMS of the oracle mean itself.
    """
    K = len(oracle.grid) - 1
    m = oracle.alpha.shape[1]
    n = oracle.z_mean.shape[1]
    da = alpha_f - oracle.alpha[target]
    db = beta_f.transpose(1, 0, 2).reshape(m, K * n) - oracle.beta[target]
    mu = oracle.z_mean.ravel()
    gap_mean = da + db @ mu
    gap2 = gap_mean @ gap_mean + np.trace(db @ oracle.z_cov @ db.T)
    o_mean = oracle.alpha[target] + oracle.beta[target] @ mu
    o2 = o_mean @ o_mean + np.trace(oracle.beta[target] @ oracle.z_cov @ oracle.beta[target].T)
    return float(np.sqrt(gap2)), float(np.sqrt(o2))
