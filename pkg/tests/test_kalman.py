import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from anticipative._validation import make_grid
from anticipative.corrkernel import linear_correlation, zero_correlation
from anticipative.errors import GridMismatch, ModelError, RiccatiBlowup
from anticipative.experiments import ScenarioConfig, monte_carlo_ratios
from anticipative.kalman import (
    affine_response,
    anticipative_filter,
    anticipative_gains,
    classical_baseline,
    compute_gains,
    filter_run,
    gaussian_conditioning_oracle,
    riccati_integrate,
    run_gains,
)
from anticipative.models import (
    AugmentedCoefficients,
    LinearModel,
    augmented_initial_state,
    build_augmented_linear,
    classical_coefficients,
    scalar_demo_model,
)
from anticipative.simulate import sample_bundles


def _classical(a, h, sigma0, cov, mean, horizon=1.0):
    a = np.atleast_2d(a)
    corr = zero_correlation(a.shape[0], np.atleast_2d(h).shape[0], cov, horizon)
    return LinearModel(a, sigma0, h, corr, mean)


# -- Riccati -------------------------------------------------------------------------


def test_riccati_tanh():
    model = _classical(0.0, [[1.0]], [[1.0]], [[0.0]], [0.0])
    grid = make_grid(1.0, 100)
    p = riccati_integrate(classical_coefficients(model, grid), [[0.0]])
    np.testing.assert_allclose(p[:, 0, 0], np.tanh(grid), atol=1e-9)


def test_riccati_from_two():
    model = _classical(0.0, [[1.0]], [[1.0]], [[2.0]], [0.0])
    grid = make_grid(1.0, 100)
    p = riccati_integrate(classical_coefficients(model, grid), [[2.0]])
    # coth(1 + acoth 2), 30-digit mpmath value
    assert p[-1, 0, 0] == pytest.approx(1.09448594974808773, abs=1e-9)


def test_riccati_zero_correlation_blocks_match_classical():
    a = np.array([[0.0, 1.0], [-2.0, -0.3]])
    h = np.array([[1.0, 0.0]])
    cov = np.array([[1.0, 0.2], [0.2, 0.5]])
    model = _classical(a, h, np.eye(2), cov, [0.0, 0.0])
    grid = make_grid(1.0, 200)
    _, p0 = augmented_initial_state(model)
    aug = riccati_integrate(build_augmented_linear(model, grid), p0)
    cls = riccati_integrate(classical_coefficients(model, grid), cov)
    np.testing.assert_allclose(aug[:, :2, :2], cls, atol=1e-10)

    def rhs(t, y):
        P = y.reshape(2, 2)
        return (a @ P + P @ a.T + np.eye(2) - P @ h.T @ h @ P).ravel()

    ref = solve_ivp(rhs, (0, 1), cov.ravel(), rtol=1e-12, atol=1e-12, t_eval=grid)
    np.testing.assert_allclose(cls.reshape(len(grid), 4), ref.y.T, atol=1e-8)


def test_riccati_constant_without_dynamics():
    grid = make_grid(1.0, 10)
    coeffs = AugmentedCoefficients(grid, np.zeros((2, 1)), np.zeros((2, 1)),
                                   b=np.zeros((11, 2, 2)), k=np.zeros((11, 1, 2)))
    p0 = np.array([[2.0, 0.5], [0.5, 1.0]])
    p = riccati_integrate(coeffs, p0)
    np.testing.assert_array_equal(p, np.broadcast_to(p0, p.shape))


def test_riccati_blowup():
    model = _classical(50.0, [[0.0]], [[1.0]], [[1.0]], [0.0])
    grid = make_grid(1.0, 50)
    with pytest.raises(RiccatiBlowup):
        riccati_integrate(classical_coefficients(model, grid), [[1.0]])


def test_riccati_grid_mismatch():
    model = scalar_demo_model()
    coeffs = build_augmented_linear(model, make_grid(0.9, 10))
    with pytest.raises(GridMismatch):
        riccati_integrate(coeffs, np.eye(3), make_grid(0.9, 20))


@settings(max_examples=15, deadline=None)
@given(st.floats(0.05, 3.0), st.floats(-0.9, 0.9), st.floats(0.05, 3.0), st.floats(0.0, 0.8))
def test_riccati_stays_psd(v1, c, v2, strength):
    cov = np.array([[v1, c * np.sqrt(v1 * v2)], [c * np.sqrt(v1 * v2), v2]])
    limit = np.linalg.eigvalsh(cov)[0]
    corr = linear_correlation([[strength * np.sqrt(limit), 0.0]], cov, 0.5)
    model = LinearModel([[0.0, 1.0], [-1.0, 0.0]], np.eye(2), [[1.0, 0.0]], corr)
    grid = make_grid(0.5, 50)
    _, p0 = augmented_initial_state(model)
    path = riccati_integrate(build_augmented_linear(model, grid), p0)
    np.testing.assert_allclose(path, path.transpose(0, 2, 1), atol=0)
    assert min(np.linalg.eigvalsh(p)[0] for p in path) >= -1e-10 * max(1.0, np.abs(path).max())


# -- filtering -----------------------------------------------------------------------


def test_zero_correlation_filter_is_classical():
    a = np.array([[0.0, 1.0], [-1.0, -0.5]])
    model = _classical(a, [[1.0, 0.0]], np.eye(2), np.eye(2), [0.5, -0.5])
    grid = make_grid(1.0, 200)
    b = sample_bundles(model, grid, 3, np.arange(5))
    for scheme in ("euler", "discrete"):
        ant = anticipative_filter(model, b.z, grid, scheme)
        cls = classical_baseline(model, b.z, grid, scheme)
        np.testing.assert_array_equal(ant.x_hat, cls.x_hat)
        np.testing.assert_array_equal(ant.p11, cls.p11)


def test_prior_propagation_without_observation():
    model = _classical(-1.0, [[0.0]], [[1.0]], [[1.0]], [1.0])
    grid = make_grid(1.0, 50)
    z = np.random.default_rng(0).standard_normal((51, 1)).cumsum(axis=0)
    ant = anticipative_filter(model, z, grid)
    np.testing.assert_allclose(ant.x_hat[:, 0], (1 - 0.02) ** np.arange(51), rtol=1e-12)
    cls = classical_baseline(model, z, grid)
    np.testing.assert_array_equal(cls.x_hat, ant.x_hat)


def test_filter_run_matches_gains_path(demo_model):
    grid = make_grid(0.9, 64)
    coeffs = build_augmented_linear(demo_model, grid)
    u0, p0 = augmented_initial_state(demo_model)
    p = riccati_integrate(coeffs, p0)
    z = sample_bundles(demo_model, grid, 1, [0]).z[0]
    direct = filter_run(coeffs, z, p, u0)
    via = anticipative_filter(demo_model, z, grid)
    np.testing.assert_allclose(direct.u_hat, via.u_hat, rtol=1e-13)


def test_record_subset_matches_full(demo_model):
    grid = make_grid(0.9, 64)
    gains, u0 = anticipative_gains(demo_model, grid)
    z = sample_bundles(demo_model, grid, 1, [0, 1]).z
    full = run_gains(gains, z, u0)
    part = run_gains(gains, z, u0, record=[0, 32, 64])
    np.testing.assert_array_equal(part.u_hat, full.u_hat[:, [0, 32, 64]])
    alpha, beta = affine_response(gains, u0)
    dz = np.diff(z, axis=1)
    np.testing.assert_allclose(alpha + np.einsum("kmn,pkn->pm", beta, dz), full.x_hat[:, -1], rtol=1e-12)


def test_unknown_scheme(demo_model):
    coeffs = build_augmented_linear(demo_model, make_grid(0.9, 8))
    with pytest.raises(ModelError):
        compute_gains(coeffs, np.eye(3), "implicit")


def test_filter_exports(tmp_path, demo_model):
    grid = make_grid(0.9, 16)
    b = sample_bundles(demo_model, grid, 1, [0])[0]
    run = anticipative_filter(demo_model, b.z, grid)
    run.to_csv(tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "t,x_hat_1,p11_1,innovation_1"
    assert len(lines) == 18
    run.to_json(tmp_path / "f.json", truth=b.x)
    doc = json.loads((tmp_path / "f.json").read_text())
    assert doc["terminal_mean"] == [run.x_hat[-1, 0]]
    assert doc["mse"][0] == pytest.approx((run.x_hat[-1, 0] - b.x[-1, 0]) ** 2)


# -- Monte Carlo properties -----------------------------------------------------------


@pytest.fixture(scope="module")
def demo_runs():
    model = scalar_demo_model()
    grid = make_grid(0.9, 128)
    b = sample_bundles(model, grid, 2024, np.arange(1000))
    run = anticipative_filter(model, b.z, grid, "discrete")
    return model, grid, b, run


def test_innovation_whiteness(demo_runs):
    _, grid, _, run = demo_runs
    dnu = np.diff(run.innovation[:, :, 0], axis=1)
    dt = grid[1]
    for k in (0, 40, 80, 127):
        v = dnu[:, k] ** 2
        se = v.std(ddof=1) / np.sqrt(len(v))
        assert abs(v.mean() - dt) <= 3 * se + 0.05 * dt


def test_orthogonality_and_consistency(demo_runs):
    _, grid, b, run = demo_runs
    for k in (64, 128):
        err = b.x[:, k, 0] - run.x_hat[:, k, 0]
        prod = err * run.x_hat[:, k, 0]
        assert abs(prod.mean()) <= 3 * prod.std(ddof=1) / np.sqrt(len(prod))
        sq = err ** 2
        assert abs(sq.mean() - run.p11[k, 0, 0]) <= 3 * sq.std(ddof=1) / np.sqrt(len(sq)) + 0.02


# -- Gaussian conditioning oracle ----------------------------------------------------


def test_oracle_without_observations():
    model = _classical(-0.5, [[0.0]], [[1.0]], [[2.0]], [1.0])
    grid = make_grid(1.0, 10)
    oracle = gaussian_conditioning_oracle(model, grid, [1.0])
    z = np.random.default_rng(1).standard_normal((11, 1))
    assert oracle.mean(z)[0, 0] == pytest.approx(0.95 ** 10, rel=1e-12)
    prior_var = 2.0 * 0.95 ** 20 + sum(0.1 * 0.95 ** (2 * j) for j in range(10))
    assert oracle.covariance()[0, 0, 0] == pytest.approx(prior_var, rel=1e-12)


def test_oracle_classical_variance_near_tanh():
    model = _classical(0.0, [[1.0]], [[1.0]], [[0.0]], [0.0])
    oracle = gaussian_conditioning_oracle(model, make_grid(1.0, 64), [1.0])
    assert abs(oracle.covariance()[0, 0, 0] - np.tanh(1.0)) <= 2.0 / 64


def test_oracle_matches_monte_carlo_regression():
    # independent check: least-squares regression of X_T on the increments
    model = scalar_demo_model()
    grid = make_grid(0.9, 6)
    oracle = gaussian_conditioning_oracle(model, grid, [0.9])
    b = sample_bundles(model, grid, 77, np.arange(200_000))
    dz = np.diff(b.z[:, :, 0], axis=1)
    design = np.column_stack([np.ones(len(dz)), dz])
    coef, *_ = np.linalg.lstsq(design, b.x[:, -1, 0], rcond=None)
    resid = b.x[:, -1, 0] - design @ coef
    np.testing.assert_allclose(coef[1:], oracle.beta[0, 0], atol=0.02)
    assert resid.var() == pytest.approx(oracle.covariance()[0, 0, 0], rel=0.02)


def test_oracle_rejects_large_grid(demo_model):
    with pytest.raises(ModelError):
        gaussian_conditioning_oracle(demo_model, make_grid(0.9, 300), [0.9])


# -- radar -----------------------------------------------------------------------------


def test_radar_strong_anticipation_beats_baseline():
    reports = monte_carlo_ratios(ScenarioConfig(gamma=100.0, n_paths=2000, eval_times=(1.0,)))
    r = reports[0]
    # the anticipative filter is the conditional mean, so its MSE cannot exceed the baseline's
    assert np.all(r.ratios <= 1 + 3 * r.se)
    assert r.ratios[0] < 1 and r.ratios[3] < 1
