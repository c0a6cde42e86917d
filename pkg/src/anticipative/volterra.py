"""Finite filters for observations with a separable Volterra drift.

The observation is ``Z_t = int_0^t H(t, s) X_s ds + N_t`` with a finite-rank
kernel ``H(t, s) = sum_i p_i(t) q_i(s)``.  Two filters are provided:

* :func:`highdim_filter` augments the signal with ``X^i_t = int_0^t q_i X ds``
  and runs the standard Kalman-Bucy machinery on the enlarged state.  It is
  exact for finite rank and serves as the reference.
* :func:`reduced_filter` works with the pair ``V_{r,t} = (X_t, int_0^t L(r, s)
  X_s ds)``, ``L = dH/dt``, and a two-parameter covariance table
  ``P[r, t]`` for ``r >= t``.  The covariance equation can be read in two
  ways (see :data:`READINGS`); both are implemented and compared with the
  reference by :func:`compare_readings`.
"""

import ast
import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.polynomial import Polynomial

from ._validation import as_time_function, check_grid, check_matrix, check_paths, tabulate
from .errors import DomainOrder, ModelError, QuadratureDomain
from .kalman import compute_gains, run_gains
from .models import AugmentedCoefficients
from .simulate import stream_rng

READINGS = ("row", "literal")
"""``"row"``: each row ``r`` follows its own Riccati equation in ``t`` with
the coefficient ``B_r`` and the quadratic term ``P[r, s] J P[r, s]^T``.
``"literal"``: the integral equation with ``B_t(s)`` and ``P[t, s]`` indexed
by the column time ``t`` rather than the row ``r``, solved column by column."""

DEFAULT_MAX_STEPS = 2048


# -- kernel expressions --------------------------------------------------------------


_ALLOWED_BINOPS = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Pow: "^"}


def parse_polynomial(expr, var):
    """Parse ``expr`` (constants, ``var``, ``+ - *``, ``^`` integer powers) into a Polynomial."""

    def walk(node):
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return Polynomial([float(node.value)])
        if isinstance(node, ast.Name):
            if node.id != var:
                raise ModelError(f"unknown symbol {node.id!r} in {expr!r}; expected {var!r}")
            return Polynomial([0.0, 1.0])
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            inner = walk(node.operand)
            return -inner if isinstance(node.op, ast.USub) else inner
        if isinstance(node, ast.BinOp) and type(node.op) in _ALLOWED_BINOPS:
            left = walk(node.left)
            if isinstance(node.op, ast.Pow):
                exp = node.right
                if isinstance(exp, ast.Constant) and isinstance(exp.value, int) and exp.value >= 0:
                    return left ** exp.value
                raise ModelError(f"exponent in {expr!r} must be a nonnegative integer")
            right = walk(node.right)
            if isinstance(node.op, ast.Add):
                return left + right
            if isinstance(node.op, ast.Sub):
                return left - right
            return left * right
        raise ModelError(f"unsupported construct in kernel expression {expr!r}")

    try:
        tree = ast.parse(str(expr).replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ModelError(f"cannot parse kernel expression {expr!r}") from exc
    return walk(tree)


@dataclass(frozen=True)
class VolterraKernel:
    """Finite-rank kernel ``H(t, s) = sum_i p_i(t) q_i(s)``.

    ``p_terms``, ``p_prime_terms`` and ``q_terms`` are scalar functions.
    Kernels built from expressions keep them in ``expressions`` for JSON.
    """

    p_terms: tuple
    p_prime_terms: tuple
    q_terms: tuple
    horizon: float = 1.0
    expressions: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self):
        if not (len(self.p_terms) == len(self.p_prime_terms) == len(self.q_terms)):
            raise ModelError("p, p' and q must have the same number of terms")
        if len(self.p_terms) == 0:
            raise ModelError("kernel rank must be positive")

    @property
    def rank(self):
        return len(self.p_terms)

    @classmethod
    def from_expressions(cls, p, q, horizon=1.0):
        """Kernel from string expressions in ``t`` (for ``p``) and ``s`` (for ``q``)."""
        if len(p) != len(q):
            raise ModelError("p and q must have the same number of terms")
        pp = [parse_polynomial(e, "t") for e in p]
        qq = [parse_polynomial(e, "s") for e in q]
        return cls(tuple(pp), tuple(x.deriv() for x in pp), tuple(qq), float(horizon),
                   {"p": [str(e) for e in p], "q": [str(e) for e in q]})

    @classmethod
    def from_dict(cls, d):
        try:
            p, q = d["p"], d["q"]
        except KeyError as exc:
            raise ModelError(f"kernel description is missing field {exc}") from None
        if "rank" in d and int(d["rank"]) != len(p):
            raise ModelError("declared rank does not match the number of terms")
        return cls.from_expressions(p, q, d.get("horizon", 1.0))

    def to_dict(self):
        if self.expressions is None:
            raise ModelError("kernels built from callables cannot be serialized")
        return {"rank": self.rank, **self.expressions, "horizon": self.horizon}

    def padded(self, extra=1):
        """Same kernel with ``extra`` zero terms appended."""
        zero = Polynomial([0.0])
        exprs = None
        if self.expressions is not None:
            exprs = {"p": self.expressions["p"] + ["0"] * extra,
                     "q": self.expressions["q"] + ["0"] * extra}
        return VolterraKernel(self.p_terms + (zero,) * extra, self.p_prime_terms + (zero,) * extra,
                              self.q_terms + (zero,) * extra, self.horizon, exprs)

    def p(self, t):
        return np.array([float(f(t)) for f in self.p_terms])

    def p_prime(self, t):
        return np.array([float(f(t)) for f in self.p_prime_terms])

    def q(self, s):
        return np.array([float(f(s)) for f in self.q_terms])

    def H(self, t, s):
        return float(self.p(t) @ self.q(s))

    def L(self, t, s):
        return float(self.p_prime(t) @ self.q(s))


def kernel_eval(kernel, t, s):
    """``(H(t, s), L(t, s))`` for ``0 <= s <= t <= T``."""
    if s > t:
        raise DomainOrder(f"kernel needs s <= t, got s={s} > t={t}")
    if s < 0 or t > kernel.horizon:
        raise QuadratureDomain(f"(t, s)=({t}, {s}) outside [0, {kernel.horizon}]")
    return kernel.H(t, s), kernel.L(t, s)


def load_kernel(path):
    with open(path) as fh:
        return VolterraKernel.from_dict(json.load(fh))


# -- model and simulation ----------------------------------------------------------------


@dataclass(frozen=True)
class VolterraModel:
    """``dX = a(t) X dt + sigma0 dW`` observed through ``int_0^t H(t, s) X_s ds + N_t``.

    The initial condition ``N(init_mean, init_cov)`` is independent of the
    noises; the observation has the signal's dimension.
    """

    a: object
    kernel: VolterraKernel
    sigma0: Optional[np.ndarray] = None
    init_mean: Optional[np.ndarray] = None
    init_cov: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "a", as_time_function(self.a))
        m = self.a(0.0).shape[0]
        sigma0 = np.eye(m) if self.sigma0 is None else check_matrix(self.sigma0, (m, None), "sigma0")
        mean = np.zeros(m) if self.init_mean is None else np.asarray(self.init_mean, float).reshape(m)
        cov = np.eye(m) if self.init_cov is None else check_matrix(self.init_cov, (m, m), "init_cov")
        object.__setattr__(self, "sigma0", sigma0)
        object.__setattr__(self, "init_mean", mean)
        object.__setattr__(self, "init_cov", cov)

    @property
    def dim_signal(self):
        return self.sigma0.shape[0]

    @property
    def horizon(self):
        return self.kernel.horizon


@dataclass(frozen=True)
class VolterraPaths:
    grid: np.ndarray
    x: np.ndarray
    z: np.ndarray
    integrals: np.ndarray


def simulate_volterra(model, grid, seed, stream_ids):
    """Euler signal paths and observations ``Z_t = sum_i p_i(t) X^i_t + N_t``.

    ``X^i_t = int_0^t q_i(s) X_s ds`` uses the trapezoid rule.  Draw order per
    stream: signal noise, observation noise, initial condition.
    """
    grid = check_grid(grid)
    stream_ids = np.atleast_1d(np.asarray(stream_ids, dtype=np.int64))
    m, l = model.dim_signal, model.sigma0.shape[1]
    K = len(grid) - 1
    dt = np.diff(grid)
    sq = np.sqrt(dt)[:, None]
    P = len(stream_ids)
    dw = np.empty((P, K, l))
    dn = np.empty((P, K, m))
    xi = np.empty((P, m))
    for i, sid in enumerate(stream_ids):
        rng = stream_rng(seed, sid)
        dw[i] = rng.standard_normal((K, l)) * sq
        dn[i] = rng.standard_normal((K, m)) * sq
        xi[i] = rng.standard_normal(m)
    w, v = np.linalg.eigh(model.init_cov)
    root = v * np.sqrt(np.clip(w, 0.0, None))
    x = np.empty((P, K + 1, m))
    x[:, 0] = model.init_mean + xi @ root.T
    drive = dw @ model.sigma0.T
    for k in range(K):
        x[:, k + 1] = x[:, k] + x[:, k] @ model.a(grid[k]).T * dt[k] + drive[:, k]
    kern = model.kernel
    q = np.stack([kern.q(t) for t in grid])
    p = np.stack([kern.p(t) for t in grid])
    qx = q[None, :, :, None] * x[:, :, None, :]
    integrals = np.zeros(qx.shape)
    integrals[:, 1:] = np.cumsum(0.5 * dt[None, :, None, None] * (qx[:, :-1] + qx[:, 1:]), axis=1)
    npath = np.zeros((P, K + 1, m))
    npath[:, 1:] = np.cumsum(dn, axis=1)
    z = np.einsum("ki,pkim->pkm", p, integrals) + npath
    return VolterraPaths(grid, x, z, integrals)


# -- high-dimensional filter ------------------------------------------------------------------


def volterra_coefficients(model, grid):
    """Coefficients on ``U = (X, X^1, ..., X^n)``.

    Drift ``[[a, 0], [q_i(t) I, 0]]``, observation ``[H(t, t) I, p_1'(t) I, ..., p_n'(t) I]``.
    """
    grid = check_grid(grid)
    m, n = model.dim_signal, model.kernel.rank
    d = m * (n + 1)
    K = len(grid)
    eye = np.eye(m)
    a = tabulate(model.a, grid)
    b = np.zeros((K, d, d))
    k = np.zeros((K, m, d))
    for j, t in enumerate(grid):
        b[j, :m, :m] = a[j]
        qs = model.kernel.q(t)
        pp = model.kernel.p_prime(t)
        k[j, :, :m] = model.kernel.H(t, t) * eye
        for i in range(n):
            b[j, m * (i + 1):m * (i + 2), :m] = qs[i] * eye
            k[j, :, m * (i + 1):m * (i + 2)] = pp[i] * eye
    sigma = np.zeros((d, model.sigma0.shape[1]))
    sigma[:m] = model.sigma0
    return AugmentedCoefficients(grid, sigma, np.zeros((d, m)), b=b, k=k, blocks=(m,) * (n + 1))


def highdim_initial_state(model):
    m, n = model.dim_signal, model.kernel.rank
    d = m * (n + 1)
    u0 = np.zeros(d)
    u0[:m] = model.init_mean
    p0 = np.zeros((d, d))
    p0[:m, :m] = model.init_cov
    return u0, p0


def highdim_filter(model, z_path, grid, scheme="euler", record=None):
    """Kalman-Bucy filter on the enlarged state; ``x_hat`` is the signal block."""
    coeffs = volterra_coefficients(model, grid)
    u0, p0 = highdim_initial_state(model)
    return run_gains(compute_gains(coeffs, p0, scheme), z_path, u0, record)


# -- reduced filter --------------------------------------------------------------------------


@dataclass(frozen=True)
class ReducedRun:
    """Output of :func:`reduced_filter`.

    ``cov_table[r, t]`` holds the two-parameter covariance for ``r >= t``
    (NaN above the diagonal).  ``v_diag`` is the diagonal ``V[t, t]`` of the
    conditional mean, whose first block is ``x_hat``.
    """

    grid: np.ndarray
    x_hat: np.ndarray
    v_diag: np.ndarray
    cov_table: np.ndarray
    reading: str

    def diagonal_cov(self):
        idx = np.arange(len(self.grid))
        return self.cov_table[idx, idx]


def _reduced_tables(model, grid):
    kern = model.kernel
    K = len(grid)
    m = model.dim_signal
    a = tabulate(model.a, grid)
    p_prime = np.stack([kern.p_prime(t) for t in grid])
    q = np.stack([kern.q(t) for t in grid])
    L = p_prime @ q.T
    Hd = np.array([kern.H(t, t) for t in grid])
    eye = np.eye(m)
    obs = np.concatenate([Hd[:, None, None] * eye, np.broadcast_to(eye, (K, m, m))], axis=2)
    J = obs.transpose(0, 2, 1) @ obs
    return a, L, obs, J


def _b_rows(a_s, L_rows, m):
    """``B_r(s) = [a(s); L(r, s)] [I 0]`` for a vector of ``L(r, s)`` values."""
    R = len(L_rows)
    out = np.zeros((R, 2 * m, 2 * m))
    out[:, :m, :m] = a_s
    out[:, m:, :m] = L_rows[:, None, None] * np.eye(m)
    return out


def _row_reading(model, grid, a, L, J, p0, q_noise, stability_factor=0.5):
    K = len(grid) - 1
    m = model.dim_signal
    table = np.full((K + 1, K + 1, 2 * m, 2 * m), np.nan)
    Y = np.broadcast_to(p0, (K + 1, 2 * m, 2 * m)).copy()
    table[:, 0] = Y
    for k in range(K):
        rows = np.arange(k + 1, K + 1)
        B = _b_rows(a[k], L[rows, k], m)
        Yr = Y[rows]

        def rhs(y):
            return B @ y + y @ B.transpose(0, 2, 1) + q_noise - y @ J[k] @ y.transpose(0, 2, 1)

        radius = max(np.abs(np.linalg.eigvals(B - Yr @ J[k])).max(), 1e-300)
        dt = grid[k + 1] - grid[k]
        n_sub = max(1, int(np.ceil(dt * radius / stability_factor)))
        h = dt / n_sub
        for _ in range(n_sub):
            k1 = rhs(Yr)
            k2 = rhs(Yr + 0.5 * h * k1)
            k3 = rhs(Yr + 0.5 * h * k2)
            k4 = rhs(Yr + h * k3)
            Yr = Yr + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            Yr = 0.5 * (Yr + Yr.transpose(0, 2, 1))
        Y[rows] = Yr
        table[rows, k + 1] = Yr
    return table


def _literal_reading(model, grid, a, L, J, p0, q_noise):
    K = len(grid) - 1
    m = model.dim_signal
    dts = np.diff(grid)
    table = np.full((K + 1, K + 1, 2 * m, 2 * m), np.nan)
    table[:, 0] = p0
    a_full = np.broadcast_to(a, (K + 1, m, m))

    def integrand(P_rs, P_ts, r_idx, t_idx, s_idx):
        # P_rs: (R, S, 2m, 2m) for rows r and times s; P_ts: (S, 2m, 2m)
        R, S = len(r_idx), len(s_idx)
        B_r = np.zeros((R, S, 2 * m, 2 * m))
        B_r[..., :m, :m] = a_full[s_idx]
        B_r[..., m:, :m] = L[np.ix_(r_idx, s_idx)][..., None, None] * np.eye(m)
        B_t = np.zeros((S, 2 * m, 2 * m))
        B_t[:, :m, :m] = a_full[s_idx]
        B_t[:, m:, :m] = L[t_idx, s_idx][:, None, None] * np.eye(m)
        P_rs_T = P_rs.transpose(0, 1, 3, 2)
        return (P_rs_T @ B_t.transpose(0, 2, 1)[None] + B_r @ P_rs + q_noise
                - P_rs @ J[s_idx][None] @ P_ts.transpose(0, 2, 1)[None])

    w_trap = None
    for j in range(1, K + 1):
        r_idx = np.arange(j, K + 1)
        s_prev = np.arange(0, j)
        # weights of the composite trapezoid on [0, t_j]
        w_trap = np.zeros(j + 1)
        w_trap[:-1] += 0.5 * dts[:j]
        w_trap[1:] += 0.5 * dts[:j]
        known = integrand(table[np.ix_(r_idx, s_prev)], table[j, s_prev], r_idx, j, s_prev)
        base = p0 + np.einsum("s,rsij->rij", w_trap[:-1], known)
        # predictor: endpoint values from the previous column
        pred_rows = table[r_idx, j - 1]
        pred_diag = table[j, j - 1]
        for _ in range(2):
            end = integrand(pred_rows[:, None], pred_diag[None], r_idx, j, np.array([j]))[:, 0]
            new_rows = base + w_trap[-1] * end
            pred_rows = new_rows
            pred_diag = new_rows[0]
        table[r_idx, j] = pred_rows
    return table


def reduced_filter(model, z_path, grid, reading="row", max_steps=DEFAULT_MAX_STEPS):
    """Filter with the two-parameter covariance table.

    The conditional mean rows ``V[r]`` (``r`` on the grid) advance by

        V[r] += [a X_hat; L(r, t_k) X_hat] dt + P[r, k] [H(t_k, t_k) I]^T dnu_k

    for ``r > k``, where the innovation ``dnu_k = dZ_k - [H I] V[k] dt`` uses
    the diagonal row so that ``x_hat`` only depends on past observations.
    ``reading`` selects how the covariance table is computed (:data:`READINGS`).
    """
    grid = check_grid(grid)
    K = len(grid) - 1
    if K > max_steps:
        raise ModelError(f"reduced filter limited to {max_steps} steps, got {K}")
    if reading not in READINGS:
        raise ModelError(f"unknown reading {reading!r}; expected one of {READINGS}")
    m = model.dim_signal
    z, batched = check_paths(z_path, grid, m)
    a, L, obs, J = _reduced_tables(model, grid)
    p0 = np.zeros((2 * m, 2 * m))
    p0[:m, :m] = model.init_cov
    sig = np.zeros((2 * m, model.sigma0.shape[1]))
    sig[:m] = model.sigma0
    q_noise = sig @ sig.T
    if reading == "row":
        table = _row_reading(model, grid, a, L, J, p0, q_noise)
    else:
        table = _literal_reading(model, grid, a, L, J, p0, q_noise)

    Pn = z.shape[0]
    dz = np.diff(z, axis=1)
    dts = np.diff(grid)
    V = np.zeros((Pn, K + 1, 2 * m))
    V[:, :, :m] = model.init_mean
    v_diag = np.empty((Pn, K + 1, 2 * m))
    for k in range(K):
        vk = V[:, k].copy()
        v_diag[:, k] = vk
        x_hat = vk[:, :m]
        dnu = dz[:, k] - vk @ obs[k].T * dts[k]
        rows = slice(k + 1, K + 1)
        gain = table[rows, k] @ obs[k].T
        drift_x = x_hat @ a[k].T
        V[:, rows, :m] += drift_x[:, None, :] * dts[k]
        V[:, rows, m:] += L[rows, k][None, :, None] * x_hat[:, None, :] * dts[k]
        V[:, rows] += np.einsum("rij,pj->pri", gain, dnu)
    v_diag[:, K] = V[:, K]
    if not batched:
        v_diag = v_diag[0]
    return ReducedRun(grid, v_diag[..., :m], v_diag, table, reading)


# -- comparison ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscrepancyReport:
    """Deviation of each reduced-filter reading from the high-dimensional filter."""

    deviations: dict
    best_reading: str
    tol_xcheck: float
    exceeded: dict

    @property
    def best_deviation(self):
        return self.deviations[self.best_reading]

    def to_dict(self):
        return {"deviations": self.deviations, "best_reading": self.best_reading,
                "tol_xcheck": self.tol_xcheck, "exceeded": self.exceeded}

    def lines(self):
        out = []
        for name in READINGS:
            flag = "EXCEEDS" if self.exceeded[name] else "within"
            out.append(f"reading {name:8s} max |x_hat - oracle| = {self.deviations[name]:.3e} "
                       f"({flag} tolerance {self.tol_xcheck:g})")
        out.append(f"better-matching reading: {self.best_reading}")
        return out


def compare_readings(model, z_path, grid, tol_xcheck=1e-3, readings=READINGS):
    """Run both readings and the high-dimensional filter on the same data."""
    ref = highdim_filter(model, z_path, grid).x_hat
    dev = {}
    for name in readings:
        red = reduced_filter(model, z_path, grid, reading=name).x_hat
        dev[name] = float(np.max(np.abs(red - ref)))
    best = min(dev, key=dev.get)
    return DiscrepancyReport(dev, best, tol_xcheck, {k: v > tol_xcheck for k, v in dev.items()})


def write_xhat_csv(grid, x_hat, path):
    x_hat = np.asarray(x_hat)
    m = x_hat.shape[1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t"] + [f"x_hat_{i + 1}" for i in range(m)])
        for t, row in zip(grid, x_hat):
            wr.writerow([repr(float(t))] + [repr(float(v)) for v in row])
