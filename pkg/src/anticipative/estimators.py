"""scikit-learn style wrappers around the filters.

Filtering learns nothing from data: ``fit`` only tabulates gains (or other
coefficient tables) on the configured grid, and ``transform`` maps observation
paths to conditional-mean paths.  Observation input is ``(K+1, n)`` for one
path or ``(P, K+1, n)`` for several; output is ``(K+1, m)`` or ``(P, K+1, m)``
accordingly.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import make_grid
from .kalman import anticipative_gains, classical_gains, run_gains
from .models import scenario
from .particle import run_particle_filter
from .volterra import VolterraKernel, VolterraModel, highdim_filter, reduced_filter


def _resolve_model(model, gamma, horizon):
    if model is None or isinstance(model, str):
        return scenario(model or "scalar-demo", gamma, horizon)
    return model


class _GridFilter(TransformerMixin, BaseEstimator):
    def _grid(self, model):
        horizon = model.horizon if self.horizon is None else self.horizon
        return make_grid(horizon, self.n_steps)

    def _paths(self, Z):
        Z = np.asarray(Z, dtype=float)
        if Z.ndim not in (2, 3):
            raise ValueError("Z must be (K+1, n) or (P, K+1, n)")
        return Z


class AnticipativeKalmanBucy(_GridFilter):
    """Linear filter that accounts for an initial condition correlated with the noise.

    Parameters
    ----------
    model : LinearModel or str, default="scalar-demo"
        Model, or a built-in scenario id.
    gamma : float
        Anticipation strength for built-in scenarios that take one.
    horizon : float or None
        Overrides the model horizon.
    n_steps : int
        Number of grid steps ``K``.
    scheme : {"euler", "discrete"}
    """

    def __init__(self, model="scalar-demo", gamma=1.0, horizon=None, n_steps=64, scheme="euler"):
        self.model = model
        self.gamma = gamma
        self.horizon = horizon
        self.n_steps = n_steps
        self.scheme = scheme

    def _gains(self, model, grid):
        return anticipative_gains(model, grid, self.scheme)

    def fit(self, Z=None, y=None):
        model = _resolve_model(self.model, self.gamma, self.horizon)
        self.model_ = model
        self.grid_ = self._grid(model)
        self.gains_, self.u0_ = self._gains(model, self.grid_)
        self.n_features_in_ = model.dim_obs
        return self

    def transform(self, Z):
        check_is_fitted(self, "gains_")
        return run_gains(self.gains_, self._paths(Z), self.u0_).x_hat

    def covariance(self):
        """Signal-block covariance path ``(K+1, m, m)``."""
        check_is_fitted(self, "gains_")
        m = self.model_.dim_signal
        return self.gains_.p[:, :m, :m]


class ClassicalKalmanBucy(AnticipativeKalmanBucy):
    """Kalman-Bucy filter that treats the initial condition as independent of the noise."""

    def _gains(self, model, grid):
        return classical_gains(model, grid, self.scheme)


class VolterraFilter(_GridFilter):
    """Filter for a scalar signal observed through a finite-rank Volterra kernel.

    Parameters
    ----------
    p, q : sequence of str
        Kernel factors ``H(t, s) = sum_i p_i(t) q_i(s)`` as polynomial expressions.
    drift : float
        Signal drift coefficient.
    method : {"highdim", "row", "literal"}
        High-dimensional augmented filter or one reading of the reduced filter.
    """

    def __init__(self, p=("t",), q=("s",), drift=0.0, horizon=1.0, n_steps=256, method="highdim"):
        self.p = p
        self.q = q
        self.drift = drift
        self.horizon = horizon
        self.n_steps = n_steps
        self.method = method

    def fit(self, Z=None, y=None):
        if self.method not in ("highdim", "row", "literal"):
            raise ValueError(f"unknown method {self.method!r}")
        kernel = VolterraKernel.from_expressions(list(self.p), list(self.q), self.horizon)
        self.model_ = VolterraModel([[float(self.drift)]], kernel)
        self.grid_ = make_grid(self.horizon, self.n_steps)
        self.n_features_in_ = 1
        return self

    def transform(self, Z):
        check_is_fitted(self, "model_")
        Z = self._paths(Z)
        if self.method == "highdim":
            return highdim_filter(self.model_, Z, self.grid_).x_hat
        return reduced_filter(self.model_, Z, self.grid_, self.method).x_hat


class ParticleFilter(_GridFilter):
    """Bootstrap particle filter on the augmented state.

    Parameters
    ----------
    model : LinearModel, NonlinearModel or str
    n_part : int
        Ensemble size.
    seed : int
        Each observation path ``i`` uses seed ``seed + i``.
    """

    def __init__(self, model="scalar-demo", gamma=1.0, horizon=None, n_steps=64,
                 n_part=1000, seed=0):
        self.model = model
        self.gamma = gamma
        self.horizon = horizon
        self.n_steps = n_steps
        self.n_part = n_part
        self.seed = seed

    def fit(self, Z=None, y=None):
        self.model_ = _resolve_model(self.model, self.gamma, self.horizon)
        self.grid_ = self._grid(self.model_)
        self.n_features_in_ = self.model_.dim_obs
        return self

    def transform(self, Z):
        check_is_fitted(self, "model_")
        Z = self._paths(Z)
        single = Z.ndim == 2
        Z = Z[None] if single else Z
        out = np.stack([run_particle_filter(self.model_, z, self.n_part, self.seed + i, self.grid_).x_hat
                        for i, z in enumerate(Z)])
        return out[0] if single else out
