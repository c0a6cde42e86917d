"""Bootstrap particle filter on the augmented state ``U = (X, Xbar, N)``.

The transformed noise drives both the state (through ``c``) and the
observation, so once an observation increment ``dz`` is known the noise
increment of each particle is fixed: ``dNt = dz - k(U) dt``.  The assimilation
step therefore weights particles by the likelihood of ``dz`` and then moves
them with that increment plus fresh signal noise.
"""

import csv
import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from ._validation import check_grid, check_paths
from .errors import AllWeightsZero
from .models import build_augmented

RESAMPLE_FRACTION = 0.5


@dataclass(frozen=True)
class Ensemble:
    """Weighted particles; ``weights`` sum to one."""

    particles: np.ndarray
    weights: np.ndarray
    time: int = 0
    log_mass: float = 0.0

    @property
    def size(self):
        return len(self.weights)

    @property
    def ess(self):
        return float(1.0 / np.sum(self.weights ** 2))

    def mean(self):
        return self.weights @ self.particles

    def cov(self):
        centered = self.particles - self.mean()
        return (centered * self.weights[:, None]).T @ centered


def initial_ensemble(model, n_part, rng):
    """Particles ``(X_0, X_0 - mean, 0)`` with ``X_0`` drawn from its prior."""
    m, n = model.dim_signal, model.dim_obs
    cov = model.corr.sigma0_cov
    x0 = rng.multivariate_normal(np.zeros(m), cov, size=n_part, method="eigh")
    parts = np.concatenate([x0 + model.init_mean, x0, np.zeros((n_part, n))], axis=1)
    return Ensemble(parts, np.full(n_part, 1.0 / n_part))


def propagate(ensemble, coeffs, dt, rng, dz=None):
    """Euler-Maruyama step ``U += b(U) dt + c dNt + sigma dW``.

    Without ``dz`` the transformed-noise increment ``dNt`` is drawn
    independently (prior dynamics).  With ``dz`` it is the increment implied
    by the observation, ``dz - k(U) dt``.  Weights are unchanged.
    """
    u = ensemble.particles
    j = ensemble.time
    n_part = len(u)
    l = coeffs.sigma.shape[1]
    n = coeffs.c.shape[1]
    dw = rng.standard_normal((n_part, l)) * np.sqrt(dt)
    if dz is None:
        dnt = rng.standard_normal((n_part, n)) * np.sqrt(dt)
    else:
        dnt = np.asarray(dz, dtype=float) - coeffs.obs_drift(j, u) * dt
    new = u + coeffs.drift(j, u) * dt + dnt @ coeffs.c.T + dw @ coeffs.sigma.T
    return replace(ensemble, particles=new, time=j + 1)


def reweight(ensemble, coeffs, dz, dt):
    """Multiply weights by ``exp(k(u)^T dz - |k(u)|^2 dt / 2)`` and renormalize.

    Raises
    ------
    AllWeightsZero
        If no particle has a finite positive weight.
    """
    k = coeffs.obs_drift(ensemble.time, ensemble.particles)
    dz = np.asarray(dz, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        logw = np.log(ensemble.weights) + k @ dz - 0.5 * np.sum(k * k, axis=1) * dt
    if not np.isfinite(np.max(logw)):
        raise AllWeightsZero(f"all particle weights vanished at step {ensemble.time}")
    total = logsumexp(logw)
    w = np.exp(logw - total)
    w /= w.sum()
    return replace(ensemble, weights=w, log_mass=ensemble.log_mass + float(total))


def systematic_indices(weights, u):
    """Offspring indices for systematic resampling with offset ``u`` in [0, 1)."""
    n = len(weights)
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, (u + np.arange(n)) / n, side="right")


def resample_systematic(ensemble, rng):
    """Equal-weight ensemble; particle ``i`` gets ``floor`` or ``ceil`` of ``N w_i`` copies."""
    idx = systematic_indices(ensemble.weights, rng.uniform())
    n = ensemble.size
    return replace(ensemble, particles=ensemble.particles[idx], weights=np.full(n, 1.0 / n))


@dataclass(frozen=True)
class ParticleRun:
    grid: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    ess: np.ndarray
    log_mass: np.ndarray
    innovation: np.ndarray
    n_resample: int
    dim_signal: int

    @property
    def x_hat(self):
        return self.mean[:, :self.dim_signal]

    @property
    def p11(self):
        m = self.dim_signal
        return self.cov[:, :m, :m]

    def to_csv(self, path):
        """Columns ``t, x_hat_i, p11_ii, innovation_j, ess``."""
        m, n = self.dim_signal, self.innovation.shape[1]
        var = np.diagonal(self.p11, axis1=1, axis2=2)
        header = (["t"] + [f"x_hat_{i + 1}" for i in range(m)] + [f"p11_{i + 1}" for i in range(m)]
                  + [f"innovation_{j + 1}" for j in range(n)] + ["ess"])
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            for row in np.column_stack([self.grid, self.x_hat, var, self.innovation, self.ess]):
                wr.writerow([repr(float(v)) for v in row])

    def summary(self, truth=None):
        out = {
            "t_final": float(self.grid[-1]),
            "terminal_mean": self.x_hat[-1].tolist(),
            "terminal_cov": self.p11[-1].tolist(),
            "n_resample": self.n_resample,
            "min_ess": float(self.ess.min()),
            "log_mass": float(self.log_mass[-1]),
        }
        if truth is not None:
            truth = np.asarray(truth, dtype=float).reshape(len(self.grid), -1)
            out["mse"] = ((self.x_hat[-1] - truth[-1]) ** 2).tolist()
        return out

    def to_json(self, path, truth=None):
        with open(path, "w") as fh:
            json.dump(self.summary(truth), fh, indent=2)


def run_particle_filter(model, z_path, n_part, seed, grid, threshold=RESAMPLE_FRACTION, coeffs=None):
    """Assimilate one observation path; returns weighted moments per grid point.

    Loop per step ``k``: reweight with ``dz_k``, resample systematically if
    the effective sample size is below ``threshold * n_part``, then
    propagate.  The innovation uses the weighted mean observation drift
    before reweighting.  ``mean[k]`` and ``cov[k]`` describe the law of ``U_{t_k}``
    given the increments before ``t_k``.  ``log_mass`` accumulates the log of
    the unnormalized weight sums.
    """
    grid = check_grid(grid)
    if coeffs is None:
        coeffs = build_augmented(model, grid)
    z, batched = check_paths(z_path, grid, model.dim_obs)
    if batched and z.shape[0] != 1:
        raise ValueError("run_particle_filter takes a single observation path")
    dz = np.diff(z[0], axis=0)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    ens = initial_ensemble(model, int(n_part), rng)
    K = len(grid) - 1
    d = ens.particles.shape[1]
    means = np.empty((K + 1, d))
    covs = np.empty((K + 1, d, d))
    ess = np.empty(K + 1)
    mass = np.empty(K + 1)
    nu = np.zeros((K + 1, model.dim_obs))
    means[0], covs[0], ess[0], mass[0] = ens.mean(), ens.cov(), ens.ess, 0.0
    n_res = 0
    for k in range(K):
        dt = grid[k + 1] - grid[k]
        nu[k + 1] = nu[k] + dz[k] - ens.weights @ coeffs.obs_drift(k, ens.particles) * dt
        ens = reweight(ens, coeffs, dz[k], dt)
        if ens.ess < threshold * ens.size:
            ens = resample_systematic(ens, rng)
            n_res += 1
        ens = propagate(ens, coeffs, dt, rng, dz[k])
        means[k + 1], covs[k + 1], ess[k + 1], mass[k + 1] = ens.mean(), ens.cov(), ens.ess, ens.log_mass
    return ParticleRun(grid, means, covs, ess, mass, nu, n_res, model.dim_signal)
