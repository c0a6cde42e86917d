import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from anticipative._validation import make_grid
from anticipative.corrkernel import (
    RADAR_SELECTOR,
    KernelTable,
    bump_correlation,
    correlation_from_dict,
    decorrelation_residual,
    drift_equation_residual,
    gram,
    gram_path,
    kernel_table,
    lambda_by_differences,
    lambda_integral_residual,
    lambda_kernel,
    linear_correlation,
    r_coeff,
    radar_correlation,
    ramp_correlation,
    support_endpoint,
    zero_correlation,
)
from anticipative.errors import DomainOrder, GramSingular, ModelError, QuadratureDomain

M = np.asarray(RADAR_SELECTOR)


# -- gram ---------------------------------------------------------------------------


def test_gram_linear_closed_form():
    spec = linear_correlation([[1.0]], [[1.0]], 0.9)
    assert gram(spec, 0.5)[0, 0] == pytest.approx(0.5, abs=1e-14)


def test_gram_zero_correlation_is_sigma():
    cov = np.array([[2.0, 0.3], [0.3, 1.0]])
    spec = zero_correlation(2, 1, cov, 1.0)
    for t in (0.0, 0.4, 1.0):
        np.testing.assert_array_equal(gram(spec, t), cov)


def test_gram_radar_at_one_is_identity():
    spec = radar_correlation(1.0)
    np.testing.assert_allclose(gram(spec, 1.0), np.eye(6), atol=1e-13)
    # closed form I + (1 - t) M M^T, checked against adaptive quadrature
    t = 0.37
    closed = np.eye(6) + (1 - t) * M @ M.T
    np.testing.assert_allclose(gram(spec, t), closed, atol=1e-13)
    entry = spec.sigma0_cov[0, 0] - quad(lambda s: (spec.rho_prime_at(s).T @ spec.rho_prime_at(s))[0, 0], 0, t)[0]
    assert closed[0, 0] == pytest.approx(entry, abs=1e-12)


def test_gram_bump_matches_quadrature():
    spec = bump_correlation([[1.0]], 0.5, [[1.0]], 2.0)
    # 1 - int_0^0.5 sin(2 pi u)^4 du = 13/16 (mpmath oracle)
    assert gram(spec, 0.5, n_steps=4096)[0, 0] == pytest.approx(0.8125, abs=1e-9)


def test_gram_rejects_time_outside_horizon():
    spec = linear_correlation([[1.0]], [[1.0]], 0.9)
    with pytest.raises(QuadratureDomain):
        gram(spec, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 2.0))
def test_gram_loewner_monotone(gamma):
    spec = radar_correlation(gamma, horizon=2.0)
    path = gram_path(spec, make_grid(2.0, 40))
    for a, b in zip(path[:-1], path[1:]):
        assert np.linalg.eigvalsh(a - b)[0] >= -1e-12


# -- g and g' ------------------------------------------------------------------------


def test_g_linear_closed_form():
    spec = linear_correlation([[1.0]], [[1.0]], 0.9)
    table = kernel_table(spec, 2000)
    k = np.searchsorted(table.grid, 0.45)
    assert table.g_prime[k, 0, 0] == pytest.approx(1 / (1 - table.grid[k]), rel=1e-12)
    assert table.g_at(0.5)[0, 0] == pytest.approx(np.log(2.0), abs=1e-7)


def test_g_zero_correlation_vanishes():
    spec = zero_correlation(2, 1, np.eye(2), 1.0)
    table = kernel_table(spec, 50)
    assert not table.g.any() and not table.g_prime.any() and not table.r.any()
    assert table.T0 == 0.0


def test_g_prime_radar_closed_form():
    spec = radar_correlation(1.0)
    table = kernel_table(spec, 1000)
    for t in (0.0, 0.2, 0.5, 0.8, 0.999):
        k = int(round(t * 1000))
        closed = M.T @ np.linalg.inv(np.eye(6) + (1 - table.grid[k]) * M @ M.T)
        np.testing.assert_allclose(table.g_prime[k], closed, atol=1e-12)


def test_g_prime_vanishes_from_support_endpoint():
    spec = radar_correlation(1.0, horizon=2.0)
    table = kernel_table(spec, 200)
    assert table.T0 == 1.0
    assert not table.g_prime[table.grid >= 1.0].any()
    # left limit at T0 keeps the last interior value
    assert np.abs(table.g_prime_left[100]).max() > 0.1


def test_gram_singular_raises():
    # int_0^t rho'^2 reaches Sigma at t = 1 exactly
    spec = linear_correlation([[1.0]], [[1.0]], 1.0)
    with pytest.raises(GramSingular) as info:
        kernel_table(spec, 100)
    assert info.value.t == pytest.approx(1.0)


# -- lambda and r --------------------------------------------------------------------


def test_lambda_linear_closed_form():
    spec = linear_correlation([[1.0]], [[1.0]], 0.9)
    table = kernel_table(spec, 900)
    assert lambda_kernel(table, spec, 0.8, 0.5)[0, 0] == pytest.approx(-2.0, rel=1e-12)


def test_lambda_zero_correlation():
    spec = zero_correlation(1, 1, [[1.0]], 1.0)
    table = kernel_table(spec, 10)
    assert lambda_kernel(table, spec, 0.7, 0.2)[0, 0] == 0.0


def test_lambda_quadratic_against_independent_oracle(quadratic_corr):
    table = kernel_table(quadratic_corr, 2000)
    value = lambda_kernel(table, quadratic_corr, 0.9, 0.4)[0, 0]
    # 30-digit mpmath quadrature of the closed-form g' = 2t / (2 - 4t^3/3)
    assert value == pytest.approx(0.546035009493623669, abs=1e-6)
    fd = lambda_by_differences(table, quadratic_corr, 0.9, 0.4)[0, 0]
    assert value == pytest.approx(fd, abs=1e-6)


def test_lambda_domain_errors(linear_unit):
    table = kernel_table(linear_unit, 100)
    with pytest.raises(DomainOrder):
        lambda_kernel(table, linear_unit, 0.3, 0.5)
    with pytest.raises(QuadratureDomain):
        lambda_kernel(table, linear_unit, 1.2, 0.5)


def test_r_coeff_values():
    spec = linear_correlation([[1.0]], [[1.0]], 0.9)
    table = kernel_table(spec, 900)
    assert r_coeff(table, spec, 0.5)[0, 0] == pytest.approx(-2.0, rel=1e-12)
    radar = radar_correlation(1.0, horizon=2.0)
    rt = kernel_table(radar, 200)
    closed = -M.T @ np.linalg.inv(np.eye(6) + M @ M.T) @ M
    np.testing.assert_allclose(r_coeff(rt, radar, 0.0), closed, atol=1e-13)
    assert not r_coeff(rt, radar, 1.5).any()


def test_support_endpoint_cases():
    assert support_endpoint(zero_correlation(1, 1, [[1.0]], 1.0)) == 0.0
    assert support_endpoint(radar_correlation(1.0, horizon=2.0)) == 1.0
    assert support_endpoint(linear_correlation([[0.5]], [[1.0]], 1.5)) == 1.5


# -- identities ----------------------------------------------------------------------


@pytest.mark.parametrize("spec", [
    linear_correlation([[1.0]], [[1.0]], 0.9),
    bump_correlation([[1.0]], 0.5, [[1.0]], 1.0),
    radar_correlation(1.0, horizon=1.5),
], ids=["linear", "bump", "radar"])
def test_drift_equation_residual(spec):
    table = kernel_table(spec, 500)
    assert drift_equation_residual(table, spec) <= 1e-8


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 0.85), st.floats(0.0, 1.0))
def test_lambda_integral_identity(t, frac):
    spec = linear_correlation([[1.0]], [[1.0]], 0.9)
    table = _linear_table()
    r = frac * t
    # trapezoid error of the residual integral is O(h^2) with h <= 0.85/1600
    assert lambda_integral_residual(table, spec, r, t, n_steps=1600) <= 2e-6


_CACHE = {}


def _linear_table():
    if "linear" not in _CACHE:
        _CACHE["linear"] = kernel_table(linear_correlation([[1.0]], [[1.0]], 0.9), 1000)
    return _CACHE["linear"]


@pytest.mark.parametrize("t", [0.1, 0.5, 0.85])
def test_decorrelation_identity(t, quadratic_corr):
    table = kernel_table(quadratic_corr, 1000)
    assert decorrelation_residual(table, quadratic_corr, t) <= 1e-5


# -- serialization -------------------------------------------------------------------


def test_kernel_table_json_round_trip(tmp_path):
    table = kernel_table(radar_correlation(1.0, horizon=1.2), 24)
    doc = json.loads(table.to_json())
    assert {"grid", "g", "g_prime", "r", "T0"} <= set(doc)
    back = KernelTable.from_json(table.to_json())
    for name in ("grid", "g", "g_prime", "r", "gram", "p"):
        np.testing.assert_array_equal(getattr(back, name), getattr(table, name))
    assert back.T0 == table.T0


def test_correlation_dict_round_trip():
    for spec in (linear_correlation([[0.4]], [[1.0]], 1.0),
                 ramp_correlation([[0.8]], 0.5, [[1.0]], 3.0),
                 bump_correlation([[1.0]], 0.5, [[1.0]], 20.0)):
        back = correlation_from_dict(spec.to_dict())
        for t in (0.0, 0.3, 0.7):
            np.testing.assert_array_equal(back.rho_at(t), spec.rho_at(t))


def test_correlation_rejects_bad_input():
    with pytest.raises(ModelError):
        correlation_from_dict({"family": "nope"})
    with pytest.raises(ModelError):
        linear_correlation([[1.0]], [[-1.0]], 1.0)
