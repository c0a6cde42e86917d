"""Monte Carlo realizations of the correlated signal-observation system.

Every bundle is drawn from its own counter-based stream keyed by
``(seed, stream_id)``, so a bundle does not depend on which other bundles were
drawn or in which order.  Within a stream the draws are, in this order: the
signal noise increments ``(K, l)``, the observation noise increments ``(K, n)``
and the residual initial-condition noise ``(m,)``.

The initial condition is built from the observation noise increments,

    X_0 = mean + sum_k (Delta rho_k)^T / Delta_k  Delta N_k + xi,

which reproduces ``E[N_t X_0^T] = rho(t)`` exactly at the grid points; ``xi``
carries the remaining covariance ``Sigma - sum_k Delta rho_k^T Delta rho_k / Delta_k``.
"""

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_grid
from .corrkernel import TOL_PSD
from .errors import GridMismatch, ModelError, ResidualCovNotPSD


def stream_rng(seed, stream_id):
    """Independent generator for the substream ``stream_id`` of ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class PathBundle:
    """One realization, or a stack of realizations along a leading axis.

    Path arrays have shape ``(K+1, dim)`` for a single bundle and
    ``(P, K+1, dim)`` for a stack; ``stream_id`` is then an array of ``P`` ids.
    """

    grid: np.ndarray
    x0: np.ndarray
    w: np.ndarray
    n: np.ndarray
    x: np.ndarray
    z: np.ndarray
    seed: int
    stream_id: object

    @property
    def batched(self):
        return self.x.ndim == 3

    def __len__(self):
        return self.x.shape[0] if self.batched else 1

    def __getitem__(self, i):
        if not self.batched:
            raise IndexError("bundle is not batched")
        sid = np.asarray(self.stream_id)[i]
        return PathBundle(self.grid, self.x0[i], self.w[i], self.n[i], self.x[i], self.z[i],
                          self.seed, sid if np.ndim(sid) else int(sid))

    @property
    def increments(self):
        return np.diff(self.z, axis=-2)


def _initial_weights(corr, grid):
    """Per-step loadings ``(Delta rho_k)^T / Delta_k`` and the residual covariance."""
    rho = np.stack([corr.rho_at(t) for t in grid])
    d_rho = np.diff(rho, axis=0)
    dt = np.diff(grid)
    loadings = d_rho.transpose(0, 2, 1) / dt[:, None, None]
    resid = corr.sigma0_cov - np.einsum("knm,knj->mj", d_rho, d_rho / dt[:, None, None])
    resid = 0.5 * (resid + resid.T)
    w, v = np.linalg.eigh(resid)
    if w[0] < -TOL_PSD * max(1.0, np.abs(resid).max()):
        raise ResidualCovNotPSD(
            f"residual covariance of the initial condition has eigenvalue {w[0]:.3e}"
        )
    root = v * np.sqrt(np.clip(w, 0.0, None))
    return loadings, root


def sample_noise(corr, grid, seed, stream_ids, dim_noise):
    """Draw ``(x0, dW, dN)`` for each stream without evolving the signal.

    Returns arrays of shape ``(P, m)``, ``(P, K, l)`` and ``(P, K, n)``;
    ``x0`` excludes the mean.
    """
    grid = check_grid(grid)
    if grid[-1] > corr.horizon * (1 + 1e-12):
        raise ModelError("grid extends beyond the correlation horizon")
    stream_ids = np.atleast_1d(np.asarray(stream_ids, dtype=np.int64))
    K = len(grid) - 1
    m, n = corr.dim_signal, corr.dim_obs
    sqdt = np.sqrt(np.diff(grid))[:, None]
    loadings, root = _initial_weights(corr, grid)
    P = len(stream_ids)
    dw = np.empty((P, K, dim_noise))
    dn = np.empty((P, K, n))
    xi = np.empty((P, m))
    for i, sid in enumerate(stream_ids):
        rng = stream_rng(seed, sid)
        dw[i] = rng.standard_normal((K, dim_noise)) * sqdt
        dn[i] = rng.standard_normal((K, n)) * sqdt
        xi[i] = rng.standard_normal(m)
    x0 = np.einsum("kmn,pkn->pm", loadings, dn) + xi @ root.T
    return x0, dw, dn


def sample_bundles(model, grid, seed, stream_ids):
    """Stacked bundles for ``stream_ids``; row ``i`` equals ``sample_bundle(..., stream_ids[i])``."""
    grid = check_grid(grid)
    stream_ids = np.atleast_1d(np.asarray(stream_ids, dtype=np.int64))
    x0, dw, dn = sample_noise(model.corr, grid, seed, stream_ids, model.dim_noise)
    x0 = x0 + model.init_mean
    P, K = dw.shape[0], dw.shape[1]
    m, n = model.dim_signal, model.dim_obs
    dt = np.diff(grid)
    x = np.empty((P, K + 1, m))
    x[:, 0] = x0
    drive = dw @ model.sigma0.T
    for k in range(K):
        x[:, k + 1] = x[:, k] + model.drift(grid[k], x[:, k]) * dt[k] + drive[:, k]
    hx = np.stack([model.obs(grid[k], x[:, k]) for k in range(K + 1)], axis=1)
    z = np.zeros((P, K + 1, n))
    z[:, 1:] = np.cumsum(0.5 * dt[None, :, None] * (hx[:, :-1] + hx[:, 1:]) + dn, axis=1)
    w = np.zeros((P, K + 1, dw.shape[2]))
    w[:, 1:] = np.cumsum(dw, axis=1)
    npath = np.zeros((P, K + 1, n))
    npath[:, 1:] = np.cumsum(dn, axis=1)
    return PathBundle(grid, x0, w, npath, x, z, int(seed), stream_ids)


def sample_bundle(model, grid, seed, stream_id=0):
    """One realization of ``(X_0, W, N, X, Z)``.

    The signal follows an Euler-Maruyama scheme and the observation drift is
    integrated with the trapezoid rule.

    Raises
    ------
    ResidualCovNotPSD
        If the correlation asks for more covariance than ``Sigma`` provides.
    """
    return sample_bundles(model, grid, seed, [stream_id])[0]


def _apply(mats, vecs):
    """``mats[k] @ vecs[..., k, :]`` for every grid index ``k``."""
    return np.matmul(mats, vecs[..., None])[..., 0]


def _q_sides(table, spec):
    """Right and left limits of ``q(s) = -g(s) p(s) + r(s)`` on the grid."""
    q_r = -np.einsum("knm,kmj->knj", table.g, table.p) + table.r
    q_l = -np.einsum("knm,kmj->knj", table.g, table.p_left) + table.r_left
    return q_r, q_l


def tilde_n_path(bundle_or_n, table, spec, x0=None, method="separable", mean=None):
    """Transformed noise ``N_t - int_0^t lambda(t, u) N_u du - g(t) (X_0 - mean)``.

    Accepts a :class:`PathBundle` or an ``N`` path (``(K+1, n)`` or
    ``(P, K+1, n)``) together with ``x0``.  ``mean`` is the mean of ``X_0``
    (zero by default).  Both methods use the trapezoid
    rule on the table's grid with one-sided kernel values at the ends of each
    step.  ``"separable"`` exploits ``lambda(t, u) = g(t) p(u) + q(u)`` and
    costs O(K); ``"direct"`` sums the kernel row by row in O(K^2).
    """
    if isinstance(bundle_or_n, PathBundle):
        if not np.array_equal(bundle_or_n.grid, table.grid):
            raise GridMismatch("bundle and kernel table use different grids")
        n_path, x0 = bundle_or_n.n, bundle_or_n.x0
    else:
        n_path = np.asarray(bundle_or_n, dtype=float)
        if x0 is None:
            raise ModelError("x0 is required when passing a raw noise path")
    if n_path.shape[-2] != len(table.grid):
        raise GridMismatch("noise path and kernel table use different grids")
    x0 = np.asarray(x0, dtype=float)
    if mean is not None:
        x0 = x0 - np.asarray(mean, dtype=float)
    grid = table.grid
    dt = np.diff(grid)
    q_r, q_l = _q_sides(table, spec)
    if method == "separable":
        pn_r = _apply(table.p, n_path)
        pn_l = _apply(table.p_left, n_path)
        qn_r = _apply(q_r, n_path)
        qn_l = _apply(q_l, n_path)
        xbar = np.zeros(pn_r.shape)
        xbar[..., 1:, :] = np.cumsum(0.5 * dt[:, None] * (pn_r[..., :-1, :] + pn_l[..., 1:, :]), axis=-2)
        xbar += x0[..., None, :]
        qint = np.zeros(qn_r.shape)
        qint[..., 1:, :] = np.cumsum(0.5 * dt[:, None] * (qn_r[..., :-1, :] + qn_l[..., 1:, :]), axis=-2)
        return n_path - _apply(table.g, xbar) - qint
    if method != "direct":
        raise ModelError(f"unknown method {method!r}")
    out = np.empty(n_path.shape)
    for j in range(len(grid)):
        lam_r = np.einsum("nm,kmj->knj", table.g[j], table.p[:j + 1]) + q_r[:j + 1]
        lam_l = np.einsum("nm,kmj->knj", table.g[j], table.p_left[:j + 1]) + q_l[:j + 1]
        f_r = np.einsum("kij,...kj->...ki", lam_r, n_path[..., :j + 1, :])
        f_l = np.einsum("kij,...kj->...ki", lam_l, n_path[..., :j + 1, :])
        integral = np.sum(0.5 * dt[:j, None] * (f_r[..., :-1, :] + f_l[..., 1:, :]), axis=-2)
        out[..., j, :] = n_path[..., j, :] - integral - x0 @ table.g[j].T
    return out


# -- export ----------------------------------------------------------------------

_MAGIC = b"APB1"
_HEADER = struct.Struct("<4sHHHHIQQ")


def write_csv(bundle, path):
    """Columns ``t, x_1..x_m, z_1..z_n``; one row per grid point."""
    if bundle.batched:
        raise ModelError("write_csv takes a single bundle")
    m, n = bundle.x.shape[1], bundle.z.shape[1]
    header = ["t"] + [f"x_{i + 1}" for i in range(m)] + [f"z_{i + 1}" for i in range(n)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for k, t in enumerate(bundle.grid):
            wr.writerow([repr(float(v)) for v in (t, *bundle.x[k], *bundle.z[k])])


def read_csv(path):
    """Return ``(t, x, z)`` arrays from a file written by :func:`write_csv`."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    m = sum(1 for h in header if h.startswith("x_"))
    return body[:, 0], body[:, 1:1 + m], body[:, 1 + m:]


def write_binary(bundle, path):
    """Little-endian float64 dump preceded by a 32-byte header.

    Header: magic ``APB1``, ``m``, ``n``, ``l`` and a reserved field (uint16
    each), the number of grid points (uint32), the seed and the stream id
    (uint64 each).  Body: ``x0`` followed by rows ``(t, x, z, w, N)`` in
    row-major order.
    """
    if bundle.batched:
        raise ModelError("write_binary takes a single bundle")
    m, n, l = bundle.x.shape[1], bundle.z.shape[1], bundle.w.shape[1]
    head = _HEADER.pack(_MAGIC, m, n, l, 0, len(bundle.grid),
                        int(bundle.seed) & (2**64 - 1), int(bundle.stream_id) & (2**64 - 1))
    rows = np.column_stack([bundle.grid, bundle.x, bundle.z, bundle.w, bundle.n])
    body = np.concatenate([bundle.x0, rows.ravel()]).astype("<f8")
    Path(path).write_bytes(head + body.tobytes())


def read_binary(path):
    """Inverse of :func:`write_binary`."""
    raw = Path(path).read_bytes()
    magic, m, n, l, _, points, seed, sid = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ModelError(f"{path}: not a path bundle dump")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(float)
    x0, rows = body[:m], body[m:].reshape(points, 1 + m + n + l + n)
    t = rows[:, 0]
    x = rows[:, 1:1 + m]
    z = rows[:, 1 + m:1 + m + n]
    w = rows[:, 1 + m + n:1 + m + n + l]
    npath = rows[:, 1 + m + n + l:]
    return PathBundle(t, x0, w, npath, x, z, seed, sid)
