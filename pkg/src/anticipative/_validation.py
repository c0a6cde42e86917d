"""Input validation helpers shared by the numerical modules and estimators."""

import numpy as np

from .errors import GridMismatch, ModelError, NotPSD


def make_grid(horizon, n_steps):
    """Uniform grid ``0 = t_0 < ... < t_K = horizon`` with ``K = n_steps``."""
    if n_steps < 1:
        raise ModelError("grid needs at least one step")
    if not horizon > 0:
        raise ModelError("horizon must be positive")
    return np.linspace(0.0, float(horizon), int(n_steps) + 1)


def check_grid(grid):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise ModelError("time grid must be a 1-d array with at least two points")
    if grid[0] != 0.0:
        raise ModelError("time grid must start at 0")
    if np.any(np.diff(grid) <= 0):
        raise ModelError("time grid must be strictly increasing")
    return grid


def check_matrix(x, shape=None, name="matrix"):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if shape is not None:
        want = tuple(s if s is not None else x.shape[i] for i, s in enumerate(shape))
        if x.shape != want:
            raise ModelError(f"{name} has shape {x.shape}, expected {want}")
    if not np.all(np.isfinite(x)):
        raise ModelError(f"{name} contains non-finite entries")
    return x


def check_psd(x, tol=1e-10, name="matrix"):
    x = check_matrix(x, name=name)
    if x.shape[0] != x.shape[1]:
        raise ModelError(f"{name} must be square")
    if not np.allclose(x, x.T, atol=1e-12 * max(1.0, np.abs(x).max())):
        raise NotPSD(f"{name} is not symmetric")
    x = 0.5 * (x + x.T)
    if x.size and np.linalg.eigvalsh(x)[0] < -tol * max(1.0, np.abs(x).max()):
        raise NotPSD(f"{name} is not positive semidefinite")
    return x


def as_time_function(value):
    """Wrap a constant matrix as ``t -> matrix``; callables pass through."""
    if callable(value):
        return value
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    arr.setflags(write=False)
    return lambda t: arr


def tabulate(fn, grid):
    """Evaluate a matrix-valued time function on every grid point."""
    return np.stack([np.atleast_2d(np.asarray(fn(t), dtype=float)) for t in grid])


def check_paths(z, grid, dim, name="observation path"):
    """Return ``(paths, batched)`` with paths shaped ``(P, K+1, dim)``."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    batched = z.ndim == 3
    if not batched:
        z = z[None]
    if z.shape[1] != len(grid):
        raise GridMismatch(f"{name} has {z.shape[1]} time points, grid has {len(grid)}")
    if z.shape[2] != dim:
        raise ModelError(f"{name} has dimension {z.shape[2]}, expected {dim}")
    return z, batched


def psd_sqrt(x):
    """Symmetric square root with negative eigenvalues clamped to zero."""
    w, v = np.linalg.eigh(0.5 * (x + x.T))
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T
