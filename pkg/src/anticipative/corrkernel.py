"""Deterministic coefficients of the drift transform that decorrelates the noise.

Given the covariance ``Sigma`` of the initial condition and the cross
covariance ``rho(t) = E[N_t X_0^T]`` with the observation noise, this module
tabulates on a time grid

* the Gram matrix ``Sigma - int_0^t rho'(u)^T rho'(u) du``,
* ``g'(t) = rho'(t) Gram(t)^{-1}`` (zero past the support endpoint ``T0``) and
  its integral ``g`` with ``g(0) = 0``,
* ``p(s) = rho''(s)^T`` and ``r(t) = -g'(t) rho'(t)^T``,

and evaluates the two-time kernel ``lambda(t, s) = g(t) p(s) + q(s)`` with
``q(s) = -g(s) rho''(s)^T - g'(s) rho'(s)^T``.

Quadrature is the composite trapezoid rule on the caller's grid.  Correlation
functions may have finitely many kinks (listed in ``breakpoints``); at those
points the trapezoid rule uses one-sided limits, so a grid that contains the
kinks integrates piecewise-smooth kernels without a first-order error.
"""

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._validation import check_grid, check_matrix, check_psd, make_grid
from .errors import DomainOrder, GramSingular, ModelError, QuadratureDomain

TOL_ZERO = 1e-12
TOL_RESIDUAL = 1e-8
COND_MAX = 1e12
TOL_PSD = 1e-10

# One-sided limits at a kink are evaluated this far (relative) from it.
_SIDE_OFFSET = 1e-10


@dataclass(frozen=True)
class CorrelationSpec:
    """Correlation between the initial condition and the observation noise.

    ``rho``, ``rho_prime`` and ``rho_second`` map a time to an ``(n, m)``
    matrix.  ``family`` and ``params`` record how a built-in spec was made so
    that it can be written to and read from JSON.
    """

    dim_signal: int
    dim_obs: int
    sigma0_cov: np.ndarray
    rho: Callable
    rho_prime: Callable
    rho_second: Callable
    horizon: float
    breakpoints: tuple = ()
    family: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        m, n = int(self.dim_signal), int(self.dim_obs)
        if m < 1 or n < 1:
            raise ModelError("dimensions must be positive")
        if not self.horizon > 0:
            raise ModelError("horizon must be positive")
        cov = check_psd(check_matrix(self.sigma0_cov, (m, m), "sigma0_cov"), TOL_PSD, "sigma0_cov")
        cov.setflags(write=False)
        object.__setattr__(self, "sigma0_cov", cov)
        object.__setattr__(self, "breakpoints", tuple(float(b) for b in self.breakpoints))
        rho0 = np.atleast_2d(np.asarray(self.rho(0.0), dtype=float))
        if rho0.shape != (n, m):
            raise ModelError(f"rho(t) has shape {rho0.shape}, expected {(n, m)}")
        if np.abs(rho0).max() > TOL_ZERO:
            raise ModelError("rho(0) must vanish")

    def _side(self, fn, t, side):
        t = float(t)
        for b in self.breakpoints:
            if abs(t - b) <= 1e-12 * max(1.0, abs(b)):
                t = b + side * _SIDE_OFFSET * max(1.0, abs(b))
                break
        return np.atleast_2d(np.asarray(fn(t), dtype=float))

    def rho_at(self, t):
        return np.atleast_2d(np.asarray(self.rho(float(t)), dtype=float))

    def rho_prime_at(self, t, side=1):
        """``rho'(t)``; at a breakpoint the right (``side=1``) or left limit."""
        return self._side(self.rho_prime, t, side)

    def rho_second_at(self, t, side=1):
        return self._side(self.rho_second, t, side)

    def derivative_errors(self, times, eps=1e-6):
        """Forward-difference mismatch of ``rho'`` and ``rho''`` at ``times``.

        Returns two arrays of Frobenius norms; both should shrink with ``eps``
        away from breakpoints.
        """
        e1, e2 = [], []
        for t in times:
            d1 = (self.rho_at(t + eps) - self.rho_at(t)) / eps
            d2 = (self.rho_prime_at(t + eps) - self.rho_prime_at(t)) / eps
            e1.append(np.linalg.norm(d1 - self.rho_prime_at(t)))
            e2.append(np.linalg.norm(d2 - self.rho_second_at(t)))
        return np.array(e1), np.array(e2)

    def to_dict(self):
        if self.family == "custom":
            raise ModelError("custom correlation evaluators cannot be serialized")
        out = {"family": self.family, "sigma0_cov": self.sigma0_cov.tolist(), "horizon": self.horizon}
        for key, val in self.params.items():
            out[key] = val.tolist() if isinstance(val, np.ndarray) else val
        return out


# -- built-in families --------------------------------------------------------


def zero_correlation(dim_signal, dim_obs, sigma0_cov, horizon):
    """Independent initial condition and noise: ``rho = 0``."""
    zero = np.zeros((dim_obs, dim_signal))
    zero.setflags(write=False)
    return CorrelationSpec(
        dim_signal, dim_obs, sigma0_cov, lambda t: zero, lambda t: zero, lambda t: zero,
        horizon, family="zero", params={"dim_signal": dim_signal, "dim_obs": dim_obs},
    )


def linear_correlation(C, sigma0_cov, horizon):
    """``rho(t) = t C``."""
    C = check_matrix(C, name="C")
    zero = np.zeros_like(C)
    return CorrelationSpec(
        C.shape[1], C.shape[0], sigma0_cov, lambda t: t * C, lambda t: C, lambda t: zero,
        horizon, family="linear", params={"C": C},
    )


def power_correlation(C, power, sigma0_cov, horizon):
    """``rho(t) = t**power C`` with ``power >= 1``."""
    C = check_matrix(C, name="C")
    power = float(power)
    if power < 1:
        raise ModelError("power must be at least 1")

    def d1(t):
        return power * t ** (power - 1) * C

    def d2(t):
        if power == 1:
            return np.zeros_like(C)
        return power * (power - 1) * t ** (power - 2) * C

    return CorrelationSpec(
        C.shape[1], C.shape[0], sigma0_cov, lambda t: t**power * C, d1, d2,
        horizon, family="power", params={"C": C, "power": power},
    )


def ramp_correlation(C, cutoff, sigma0_cov, horizon):
    """``rho(t) = min(t, cutoff) C``; ``rho'`` jumps to zero after ``cutoff``."""
    C = check_matrix(C, name="C")
    cutoff = float(cutoff)
    zero = np.zeros_like(C)
    return CorrelationSpec(
        C.shape[1], C.shape[0], sigma0_cov,
        lambda t: min(t, cutoff) * C,
        lambda t: C if t <= cutoff else zero,
        lambda t: zero,
        horizon, breakpoints=(cutoff,), family="ramp", params={"C": C, "cutoff": cutoff},
    )


def bump_correlation(C, support, sigma0_cov, horizon):
    """Compactly supported ``rho' = C sin(pi t / support)**2`` on ``[0, support]``.

    ``rho`` is twice continuously differentiable and constant after ``support``.
    """
    C = check_matrix(C, name="C")
    s = float(support)
    w = np.pi / s

    def rho(t):
        t = min(t, s)
        return (t / 2 - np.sin(2 * w * t) / (4 * w)) * C

    def d1(t):
        return np.sin(w * t) ** 2 * C if t <= s else 0.0 * C

    def d2(t):
        return w * np.sin(2 * w * t) * C if t <= s else 0.0 * C

    return CorrelationSpec(
        C.shape[1], C.shape[0], sigma0_cov, rho, d1, d2,
        horizon, breakpoints=(s,), family="bump", params={"C": C, "support": s},
    )


RADAR_SELECTOR = np.array(
    [[1.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 1.0]]
)
RADAR_SELECTOR.setflags(write=False)


def radar_correlation(gamma, horizon=1.0, selector=RADAR_SELECTOR):
    """Initial condition ``xi + gamma M N_1`` with ``xi`` standard normal.

    Gives ``rho(t) = gamma min(t, 1) M^T`` and ``Sigma = I + gamma**2 M M^T``.
    """
    M = np.asarray(selector, dtype=float)
    if gamma < 0:
        raise ModelError("gamma must be nonnegative")
    cov = np.eye(M.shape[0]) + gamma**2 * M @ M.T
    spec = ramp_correlation(gamma * M.T, 1.0, cov, horizon)
    if gamma == 0:
        return zero_correlation(M.shape[0], M.shape[1], cov, horizon)
    return spec


_FAMILIES = {
    "zero": lambda d: zero_correlation(d["dim_signal"], d["dim_obs"], d["sigma0_cov"], d["horizon"]),
    "linear": lambda d: linear_correlation(d["C"], d["sigma0_cov"], d["horizon"]),
    "power": lambda d: power_correlation(d["C"], d["power"], d["sigma0_cov"], d["horizon"]),
    "ramp": lambda d: ramp_correlation(d["C"], d["cutoff"], d["sigma0_cov"], d["horizon"]),
    "bump": lambda d: bump_correlation(d["C"], d["support"], d["sigma0_cov"], d["horizon"]),
}


def correlation_from_dict(d):
    """Build a built-in correlation family from its JSON description."""
    family = d.get("family")
    if family == "radar":
        return radar_correlation(d["gamma"], d.get("horizon", 1.0))
    if family not in _FAMILIES:
        raise ModelError(f"unknown correlation family {family!r}")
    try:
        return _FAMILIES[family](d)
    except KeyError as exc:
        raise ModelError(f"correlation family {family!r} is missing field {exc}") from None


# -- Gram matrix and support ---------------------------------------------------


def _quadrature_nodes(spec, a, b, n_steps):
    nodes = np.linspace(a, b, n_steps + 1)
    inner = [x for x in spec.breakpoints if a < x < b]
    if inner:
        nodes = np.union1d(nodes, inner)
    return nodes


def _rho_prime_sides(spec, grid):
    right = np.stack([spec.rho_prime_at(t, +1) for t in grid])
    left = np.stack([spec.rho_prime_at(t, -1) for t in grid])
    left[0] = right[0]
    return right, left


def gram_path(spec, grid):
    """Gram matrix at every grid point by cumulative trapezoid quadrature."""
    grid = check_grid(grid)
    right, left = _rho_prime_sides(spec, grid)
    sq_r = np.einsum("kni,knj->kij", right, right)
    sq_l = np.einsum("kni,knj->kij", left, left)
    incr = 0.5 * np.diff(grid)[:, None, None] * (sq_r[:-1] + sq_l[1:])
    out = np.empty((len(grid),) + spec.sigma0_cov.shape)
    out[0] = spec.sigma0_cov
    out[1:] = spec.sigma0_cov - np.cumsum(incr, axis=0)
    return 0.5 * (out + out.transpose(0, 2, 1))


def gram(spec, t, n_steps=1024):
    """``Sigma - int_0^t rho'(s)^T rho'(s) ds`` by the composite trapezoid rule."""
    if not 0.0 <= t <= spec.horizon:
        raise QuadratureDomain(f"t={t} outside [0, {spec.horizon}]")
    if t == 0.0:
        return spec.sigma0_cov.copy()
    return gram_path(spec, _quadrature_nodes(spec, 0.0, float(t), n_steps))[-1]


def support_endpoint(spec, grid=None, tol_zero=TOL_ZERO):
    """Largest grid point at which ``rho'`` is nonzero (0 if there is none)."""
    if grid is None:
        grid = _quadrature_nodes(spec, 0.0, spec.horizon, 1000)
    grid = check_grid(grid)
    for k in range(len(grid) - 1, -1, -1):
        side = -1 if k > 0 else 1
        if np.linalg.norm(spec.rho_prime_at(grid[k], side)) > tol_zero:
            return float(grid[k])
    return 0.0


# -- kernel table ----------------------------------------------------------------


def _readonly(*arrays):
    for a in arrays:
        a.setflags(write=False)


@dataclass(frozen=True)
class KernelTable:
    """Tabulated transform coefficients on a grid.

    Arrays carrying a ``_left`` suffix hold left limits at each grid point
    (they differ from the plain values only at ``T0`` and at kinks); the plain
    values are right limits, with ``g'`` and ``r`` set to zero from ``T0`` on.
    """

    grid: np.ndarray
    g: np.ndarray
    g_prime: np.ndarray
    g_prime_left: np.ndarray
    gram: np.ndarray
    r: np.ndarray
    r_left: np.ndarray
    p: np.ndarray
    p_left: np.ndarray
    T0: float

    def __post_init__(self):
        _readonly(self.grid, self.g, self.g_prime, self.g_prime_left, self.gram,
                  self.r, self.r_left, self.p, self.p_left)

    def _locate(self, t):
        grid = self.grid
        if not grid[0] <= t <= grid[-1]:
            raise QuadratureDomain(f"t={t} outside the tabulated range [0, {grid[-1]}]")
        k = int(np.searchsorted(grid, t, side="right")) - 1
        k = min(k, len(grid) - 2)
        h = grid[k + 1] - grid[k]
        return k, h, (t - grid[k]) / h

    def g_at(self, t):
        """Cubic Hermite interpolation of ``g`` using the tabulated slopes."""
        k, h, s = self._locate(float(t))
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return (h00 * self.g[k] + h10 * h * self.g_prime[k]
                + h01 * self.g[k + 1] + h11 * h * self.g_prime_left[k + 1])

    def g_prime_at(self, t, side=1):
        """Linear interpolation of ``g'``; at a grid point, the one-sided value."""
        t = float(t)
        k, _, s = self._locate(t)
        if s == 0.0:
            if side > 0 or k == 0:
                return self.g_prime[k].copy()
            return self.g_prime_left[k].copy()
        if side < 0 and s == 1.0:
            return self.g_prime_left[k + 1].copy()
        return (1 - s) * self.g_prime[k] + s * self.g_prime_left[k + 1]

    def to_dict(self):
        return {
            "grid": self.grid.tolist(),
            "T0": self.T0,
            "g": self.g.tolist(),
            "g_prime": self.g_prime.tolist(),
            "g_prime_left": self.g_prime_left.tolist(),
            "gram": self.gram.tolist(),
            "r": self.r.tolist(),
            "r_left": self.r_left.tolist(),
            "p": self.p.tolist(),
            "p_left": self.p_left.tolist(),
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d):
        arr = {k: np.array(v, dtype=float) for k, v in d.items() if k != "T0"}
        return cls(T0=float(d["T0"]), **arr)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def build_kernel_table(spec, grid, cond_max=COND_MAX, tol_psd=TOL_PSD):
    """Tabulate ``gram``, ``g``, ``g'``, ``p`` and ``r`` on ``grid``.

    Raises
    ------
    GramSingular
        If the Gram matrix is numerically singular (condition number above
        ``cond_max``) or indefinite at a grid point before ``T0``.
    """
    grid = check_grid(grid)
    if grid[-1] > spec.horizon * (1 + 1e-12):
        raise QuadratureDomain("grid extends beyond the correlation horizon")
    K = len(grid)
    n, m = spec.dim_obs, spec.dim_signal
    gram_k = gram_path(spec, grid)
    rp_right, rp_left = _rho_prime_sides(spec, grid)
    T0 = support_endpoint(spec, grid)

    gp = np.zeros((K, n, m))
    gp_left = np.zeros((K, n, m))
    for k, t in enumerate(grid):
        if t > T0:
            continue
        G = gram_k[k]
        eig = np.linalg.eigvalsh(G)
        scale = max(1.0, np.abs(G).max())
        cond = np.inf if eig[0] <= 0 else eig[-1] / eig[0]
        if eig[0] < -tol_psd * scale or cond > cond_max:
            if t < T0 or np.linalg.norm(rp_left[k]) > TOL_ZERO:
                raise GramSingular(t, cond)
            continue
        if t < T0:
            gp[k] = np.linalg.solve(G, rp_right[k].T).T
        if k > 0:
            gp_left[k] = np.linalg.solve(G, rp_left[k].T).T
    gp_left[0] = gp[0]

    g = np.zeros((K, n, m))
    g[1:] = np.cumsum(0.5 * np.diff(grid)[:, None, None] * (gp[:-1] + gp_left[1:]), axis=0)

    r = -np.einsum("knm,kjm->knj", gp, rp_right)
    r_left = -np.einsum("knm,kjm->knj", gp_left, rp_left)
    p = np.stack([spec.rho_second_at(t, +1).T for t in grid])
    p_left = np.stack([spec.rho_second_at(t, -1).T for t in grid])
    p_left[0] = p[0]
    return KernelTable(grid.copy(), g, gp, gp_left, gram_k, r, r_left, p, p_left, T0)


g_and_gprime = build_kernel_table


def kernel_table(spec, n_steps=1000, grid=None):
    """Convenience wrapper building a table on a uniform grid over the horizon."""
    if grid is None:
        grid = make_grid(spec.horizon, n_steps)
    return build_kernel_table(spec, grid)


# -- kernels -----------------------------------------------------------------------


def _lambda(table, spec, t, s, side=1):
    g_t = table.g_at(t)
    g_s = table.g_at(s)
    gp_s = table.g_prime_at(s, side)
    p_s = spec.rho_second_at(s, side).T
    rp_s = spec.rho_prime_at(s, side)
    return g_t @ p_s - g_s @ p_s - gp_s @ rp_s.T


def lambda_kernel(table, spec, t, s):
    """Two-time kernel ``lambda(t, s) = g(t) p(s) + q(s)`` for ``s <= t``."""
    if s > t:
        raise DomainOrder(f"lambda(t, s) needs s <= t, got s={s} > t={t}")
    if s < 0 or t > spec.horizon:
        raise QuadratureDomain(f"(t, s)=({t}, {s}) outside [0, {spec.horizon}]")
    return _lambda(table, spec, t, s)


def r_coeff(table, spec, t):
    """Diagonal coefficient ``r(t) = lambda(t, t) = -g'(t) rho'(t)^T``."""
    if not 0.0 <= t <= spec.horizon:
        raise QuadratureDomain(f"t={t} outside [0, {spec.horizon}]")
    return -table.g_prime_at(t) @ spec.rho_prime_at(t).T


# -- identities used as numerical checks ------------------------------------------


def drift_equation_residual(table, spec):
    """Max over grid points before ``T0`` of ``|g'(t) Gram(t) - rho'(t)|_F``."""
    worst = 0.0
    for k, t in enumerate(table.grid):
        if t >= table.T0:
            break
        res = table.g_prime[k] @ table.gram[k] - spec.rho_prime_at(t)
        worst = max(worst, float(np.linalg.norm(res)))
    return worst


def _piecewise_trapezoid(fn, spec, table, a, b, n_steps):
    """Integrate ``fn(u, side)`` over ``[a, b]`` splitting at kinks and ``T0``."""
    cuts = sorted({a, b, *[x for x in (*spec.breakpoints, table.T0) if a < x < b]})
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        nodes = np.linspace(lo, hi, n_steps + 1)
        vals = [fn(nodes[0], 1)] + [fn(u, 1) for u in nodes[1:-1]] + [fn(nodes[-1], -1)]
        vals = np.stack(vals)
        h = nodes[1] - nodes[0]
        total = total + h * (0.5 * vals[0] + vals[1:-1].sum(axis=0) + 0.5 * vals[-1])
    return total


def lambda_integral_residual(table, spec, r, t, n_steps=400):
    """``|int_r^t lambda(t,u) du + g(t) rho'(r)^T - g(r) rho'(r)^T|_F``."""
    if r > t:
        raise DomainOrder("need r <= t")
    integral = _piecewise_trapezoid(
        lambda u, side: _lambda(table, spec, t, u, side), spec, table, r, t, n_steps
    ) if t > r else 0.0
    rp = spec.rho_prime_at(r)
    res = integral + table.g_at(t) @ rp.T - table.g_at(r) @ rp.T
    return float(np.linalg.norm(res))


def decorrelation_residual(table, spec, t, n_steps=400):
    """``|rho(t) - int_0^t lambda(t,u) rho(u) du - g(t) Sigma|_F``."""
    integral = _piecewise_trapezoid(
        lambda u, side: _lambda(table, spec, t, u, side) @ spec.rho_at(u), spec, table, 0.0, t, n_steps
    ) if t > 0 else 0.0
    res = spec.rho_at(t) - integral - table.g_at(t) @ spec.sigma0_cov
    return float(np.linalg.norm(res))


def lambda_by_differences(table, spec, t, s, eps=1e-5):
    """``d/ds (g(t) rho'(s)^T - g(s) rho'(s)^T)`` by central differences."""

    def f(u):
        rp = spec.rho_prime_at(u)
        return (table.g_at(t) - table.g_at(u)) @ rp.T

    return (f(s + eps) - f(s - eps)) / (2 * eps)
