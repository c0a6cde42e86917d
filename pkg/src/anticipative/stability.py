"""Long-time behaviour of the linear filter.

Once the correlation kernel has left its support, the signal block of the
augmented covariance follows the classical Riccati equation and converges to
the stabilizing solution of the algebraic Riccati equation.  This module
computes that limit, the closed-loop spectral margin, and tools to measure the
convergence of the anticipative filter towards the classical one.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import check_matrix, check_psd, psd_sqrt
from .corrkernel import TOL_PSD, TOL_ZERO
from .errors import (
    DifferenceBelowFloor,
    NoConvergence,
    NonPositiveMargin,
    NotDetectable,
    NotStabilizable,
    WindowTooShort,
)

RANK_TOL = 1e-10
DIFF_FLOOR = 1e-13


def _hautus(a, other, stacked):
    """Rank test of ``[mu I - a; other]`` (or side by side) for every unstable mode."""
    m = a.shape[0]
    for mu in np.linalg.eigvals(a):
        if mu.real < 0:
            continue
        pencil = mu * np.eye(m) - a
        mat = np.vstack([pencil, other]) if stacked else np.hstack([pencil, other])
        sv = np.linalg.svd(mat, compute_uv=False)
        if np.sum(sv > RANK_TOL * sv[0]) < m:
            return False
    return True


def detectable(a, h):
    """Every mode of ``a`` with nonnegative real part is seen by ``h``."""
    a = check_matrix(a, name="a")
    h = check_matrix(h, (None, a.shape[0]), "h")
    return _hautus(a, h.astype(complex), stacked=True)


def stabilizable(a, b_in):
    """Every mode of ``a`` with nonnegative real part is reached by ``b_in``."""
    a = check_matrix(a, name="a")
    b_in = check_matrix(b_in, (a.shape[0], None), "b_in")
    return _hautus(a, b_in.astype(complex), stacked=False)


def are_residual(gamma, a, h, noise_cov=None):
    """``gamma a^T + a gamma + Q - gamma h^T h gamma`` with ``Q = I`` by default."""
    q = np.eye(a.shape[0]) if noise_cov is None else noise_cov
    return gamma @ a.T + a @ gamma + q - gamma @ h.T @ h @ gamma


def _rk4_step(p, a, q, hh, dt):
    def rhs(x):
        return x @ a.T + a @ x + q - x @ hh @ x
    k1 = rhs(p)
    k2 = rhs(p + 0.5 * dt * k1)
    k3 = rhs(p + 0.5 * dt * k2)
    k4 = rhs(p + dt * k3)
    out = p + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return 0.5 * (out + out.T)


def _flow_step(p, a, hh):
    # the quadratic term limits the step even when the closed loop is marginal
    radius = max(np.abs(np.linalg.eigvals(a - p @ hh)).max(),
                 np.linalg.norm(p @ hh, 2), np.linalg.norm(a, 2), 1.0)
    return 0.25 / radius


def solve_are(a, h, noise_cov=None, tol=1e-10, t_max=200.0):
    """Stabilizing solution of ``g a^T + a g + Q - g h^T h g = 0``.

    The differential Riccati equation is integrated from the identity with
    RK4 until the right-hand side falls below ``tol``; integration then
    continues until the residual stops decreasing, so the returned fixed
    point is accurate to rounding level.

    Raises
    ------
    NotDetectable, NotStabilizable
        If the pair ``(a, h)`` or ``(a, Q^{1/2})`` fails the Hautus test.
    NoConvergence
        If the residual is still above ``tol`` at ``t_max``.
    """
    a = check_matrix(a, name="a")
    m = a.shape[0]
    h = check_matrix(h, (None, m), "h")
    q = np.eye(m) if noise_cov is None else check_psd(noise_cov, TOL_PSD, "noise_cov")
    if not detectable(a, h):
        raise NotDetectable("(a, h) is not detectable")
    if not stabilizable(a, psd_sqrt(q)):
        raise NotStabilizable("(a, Q^1/2) is not stabilizable")
    hh = h.T @ h
    p = np.eye(m)
    t = 0.0
    res = np.linalg.norm(are_residual(p, a, h, q))
    dt = _flow_step(p, a, hh)
    while res >= tol:
        dt = _flow_step(p, a, hh)
        p = _rk4_step(p, a, q, hh, dt)
        t += dt
        res = np.linalg.norm(are_residual(p, a, h, q))
        if t > t_max or not np.isfinite(res):
            raise NoConvergence(f"Riccati flow not settled by t={t_max} (residual {res:.3e})")
    for _ in range(10_000):
        nxt = _rk4_step(p, a, q, hh, dt)
        new_res = np.linalg.norm(are_residual(nxt, a, h, q))
        if new_res >= res:
            break
        p, res = nxt, new_res
    return p


def spectral_margin(a, h, gamma_inf):
    """``min -Re(mu)`` over the eigenvalues ``mu`` of ``a - gamma_inf h^T h``.

    Raises
    ------
    NonPositiveMargin
        If the closed loop is not strictly stable.
    """
    a = check_matrix(a, name="a")
    h = check_matrix(h, (None, a.shape[0]), "h")
    lam = float(np.min(-np.linalg.eigvals(a - gamma_inf @ h.T @ h).real))
    if lam <= TOL_ZERO:
        raise NonPositiveMargin(f"closed-loop margin {lam:.3e} is not positive")
    return lam


@dataclass(frozen=True)
class DecayFit:
    rate: float
    prefactor: float
    residual: float
    n_points: int


def decay_fit(p11_path, grid, gamma_inf, window, floor=DIFF_FLOOR):
    """Fit ``|P11_t - gamma_inf|_F ~ prefactor * exp(-rate t)`` on ``window``.

    Points where the difference is below ``floor`` carry no information and
    are left out of the fit.

    Raises
    ------
    WindowTooShort
        If fewer than 10 grid points lie in the window.
    DifferenceBelowFloor
        If fewer than 10 points in the window are above ``floor``.
    """
    grid = np.asarray(grid, dtype=float)
    p11_path = np.asarray(p11_path, dtype=float)
    if p11_path.ndim == 1:
        p11_path = p11_path[:, None, None]
    t_a, t_b = window
    sel = (grid >= t_a) & (grid <= t_b)
    if sel.sum() < 10:
        raise WindowTooShort(f"only {sel.sum()} grid points in [{t_a}, {t_b}]")
    diff = np.linalg.norm(p11_path[sel] - np.asarray(gamma_inf, dtype=float), axis=(1, 2))
    keep = diff > floor
    if keep.sum() < 10:
        raise DifferenceBelowFloor("difference below the floor across the window; converged")
    t = grid[sel][keep]
    y = np.log(diff[keep])
    coef, res, *_ = np.polyfit(t, y, 1, full=True)
    resid = float(np.sqrt(res[0] / len(t))) if len(res) else 0.0
    return DecayFit(float(-coef[0]), float(np.exp(coef[1])), resid, int(keep.sum()))


def wasserstein_gaussian(mean1, cov1, mean2, cov2):
    """2-Wasserstein distance between two Gaussian laws (Bures formula)."""
    mean1 = np.atleast_1d(np.asarray(mean1, dtype=float))
    mean2 = np.atleast_1d(np.asarray(mean2, dtype=float))
    c1 = check_psd(np.atleast_2d(cov1), TOL_PSD, "cov1")
    c2 = check_psd(np.atleast_2d(cov2), TOL_PSD, "cov2")
    r1 = psd_sqrt(c1)
    cross = psd_sqrt(r1 @ c2 @ r1)
    w2 = float(np.sum((mean1 - mean2) ** 2) + np.trace(c1 + c2 - 2 * cross))
    return float(np.sqrt(max(w2, 0.0)))


def wasserstein_path(mean1, cov1, mean2, cov2):
    """Distance between two Gaussian paths, one value per time point."""
    return np.array([wasserstein_gaussian(m1, p1, m2, p2)
                     for m1, p1, m2, p2 in zip(mean1, cov1, mean2, cov2)])


@dataclass(frozen=True)
class StabilityReport:
    gamma_inf: np.ndarray
    lambda0: float
    detectable: bool
    stabilizable: bool
    are_residual: float
    decay_fit: object = None
    wasserstein_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    wasserstein_path: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_dict(self):
        return {
            "gamma_inf": np.asarray(self.gamma_inf).tolist(),
            "lambda0": self.lambda0,
            "detectable": self.detectable,
            "stabilizable": self.stabilizable,
            "are_residual": self.are_residual,
            "decay_fit": None if self.decay_fit is None else asdict(self.decay_fit),
            "wasserstein_times": np.asarray(self.wasserstein_times).tolist(),
            "wasserstein_path": np.asarray(self.wasserstein_path).tolist(),
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    def table(self):
        lines = [
            f"detectable      {self.detectable}",
            f"stabilizable    {self.stabilizable}",
            f"lambda0         {self.lambda0:.10g}",
            f"ARE residual    {self.are_residual:.3e}",
            "gamma_inf       " + np.array2string(np.asarray(self.gamma_inf), precision=8),
        ]
        if self.decay_fit is not None:
            lines.append(f"decay rate      {self.decay_fit.rate:.6g} "
                         f"(prefactor {self.decay_fit.prefactor:.3g}, "
                         f"fit residual {self.decay_fit.residual:.2e})")
        if len(self.wasserstein_path):
            lines.append(f"W2 first/last   {self.wasserstein_path[0]:.6g} / "
                         f"{self.wasserstein_path[-1]:.6g}")
        return "\n".join(lines)


def stability_report(model, grid=None, window=None, z_path=None, scheme="euler"):
    """Algebraic Riccati limit, margin and, given a grid, convergence diagnostics.

    With ``grid`` the anticipative Riccati equation is integrated and its
    signal block fitted on ``window``.  With ``z_path`` as well, both the
    anticipative and the classical filter run on it and the Wasserstein
    distance between their Gaussian laws is recorded along the grid.
    """
    from .kalman import anticipative_gains, classical_gains, run_gains

    a = model.a(0.0)
    h = model.h(0.0)
    q = model.sigma0 @ model.sigma0.T
    det = detectable(a, h)
    stab = stabilizable(a, model.sigma0)
    gamma = solve_are(a, h, q)
    lam = spectral_margin(a, h, gamma)
    fit = None
    times = np.zeros(0)
    w_path = np.zeros(0)
    if grid is not None:
        gains, u0 = anticipative_gains(model, grid, scheme)
        p11 = gains.p[:, :model.dim_signal, :model.dim_signal]
        if window is not None:
            fit = decay_fit(p11, grid, gamma, window)
        if z_path is not None:
            cgains, c0 = classical_gains(model, grid, scheme)
            ra = run_gains(gains, z_path, u0)
            rc = run_gains(cgains, z_path, c0)
            times = np.asarray(grid)
            w_path = wasserstein_path(ra.x_hat, ra.p11, rc.x_hat, rc.p11)
    res = float(np.linalg.norm(are_residual(gamma, a, h, q)))
    return StabilityReport(gamma, lam, det, stab, res, fit, times, w_path)
