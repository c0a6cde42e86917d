import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anticipative._validation import make_grid
from anticipative.corrkernel import (
    RADAR_SELECTOR,
    kernel_table,
    linear_correlation,
    radar_correlation,
    zero_correlation,
)
from anticipative.errors import ResidualCovNotPSD
from anticipative.models import LinearModel, radar_model
from anticipative.simulate import (
    read_binary,
    read_csv,
    sample_bundle,
    sample_bundles,
    sample_noise,
    tilde_n_path,
    write_binary,
    write_csv,
)

M = np.asarray(RADAR_SELECTOR)


def _scalar(corr, a=0.0, sigma=1.0, h=1.0, mean=0.0):
    return LinearModel([[a]], [[sigma]], [[h]], corr, [mean])


def test_independent_initial_condition():
    model = _scalar(zero_correlation(1, 1, [[1.0]], 1.0))
    b = sample_bundles(model, make_grid(1.0, 16), 3, np.arange(10_000))
    corr = np.corrcoef(b.n[:, -1, 0], b.x0[:, 0])[0, 1]
    assert abs(corr) <= 3 / np.sqrt(10_000)


def test_radar_noise_covariance_with_initial_condition():
    model = radar_model(1.0)
    grid = make_grid(1.0, 16)
    b = sample_bundles(model, grid, 11, np.arange(10_000))
    prod = b.n[:, 8, :, None] * b.x0[:, None, :]
    est = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / np.sqrt(len(prod))
    target = 0.5 * M.T
    assert np.all(np.abs(est - target) <= 3 * se + 1e-12)


def test_zero_noise_degenerate():
    model = _scalar(zero_correlation(1, 1, [[1.0]], 1.0), sigma=0.0, h=0.0)
    b = sample_bundle(model, make_grid(1.0, 32), 5)
    np.testing.assert_array_equal(b.x, np.broadcast_to(b.x0, b.x.shape))
    np.testing.assert_allclose(b.z, b.n, atol=1e-15)


def test_tilde_n_equals_n_without_correlation():
    model = _scalar(zero_correlation(1, 1, [[1.0]], 1.0))
    grid = make_grid(1.0, 64)
    b = sample_bundle(model, grid, 1)
    table = kernel_table(model.corr, grid=grid)
    np.testing.assert_array_equal(tilde_n_path(b, table, model.corr), b.n)


def test_tilde_n_quadratic_variation():
    corr = linear_correlation([[1.0]], [[1.0]], 0.9)
    model = _scalar(corr)
    grid = make_grid(0.9, 4096)
    b = sample_bundle(model, grid, 2)
    tn = tilde_n_path(b, kernel_table(corr, grid=grid), corr)
    qv = np.sum(np.diff(tn[:, 0]) ** 2)
    assert 0.8 * 0.9 <= qv <= 1.2 * 0.9


def test_tilde_n_separable_matches_direct():
    corr = radar_correlation(1.0, horizon=1.25)
    model = radar_model(1.0, horizon=1.25)
    grid = make_grid(1.25, 100)
    b = sample_bundles(model, grid, 9, [0, 1, 2])
    table = kernel_table(corr, grid=grid)
    sep = tilde_n_path(b.n, table, corr, x0=b.x0)
    direct = tilde_n_path(b.n, table, corr, x0=b.x0, method="direct")
    np.testing.assert_allclose(sep, direct, atol=1e-12)


def test_reproducible_streams():
    model = radar_model(1.0)
    grid = make_grid(1.0, 50)
    a = sample_bundle(model, grid, 42, 3)
    b = sample_bundle(model, grid, 42, 3)
    for name in ("x0", "w", "n", "x", "z"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    c = sample_bundle(model, grid, 42, 4)
    assert not np.array_equal(a.n, c.n)


@settings(max_examples=10, deadline=None)
@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=4, unique=True), st.integers(0, 2**32))
def test_batch_equals_singles(ids, seed):
    model = radar_model(0.5)
    grid = make_grid(1.0, 10)
    batch = sample_bundles(model, grid, seed, ids)
    for i, sid in enumerate(ids):
        single = sample_bundle(model, grid, seed, sid)
        np.testing.assert_array_equal(batch.z[i], single.z)
        np.testing.assert_array_equal(batch.x0[i], single.x0)


def test_streams_uncorrelated():
    model = _scalar(zero_correlation(1, 1, [[1.0]], 1.0))
    grid = make_grid(1.0, 100)
    _, _, dn = sample_noise(model.corr, grid, 42, np.arange(100), 1)
    inc = dn[:, :, 0]
    c = np.corrcoef(inc)
    off = c[~np.eye(100, dtype=bool)]
    # each pairwise correlation of 100 increments has SE about 0.1
    assert np.mean(np.abs(off) > 3 * 0.1) < 0.01


def test_euler_weak_error():
    model = _scalar(zero_correlation(1, 1, [[1.0]], 1.0), a=-1.0, mean=1.0)
    K = 20
    b = sample_bundles(model, make_grid(1.0, K), 8, np.arange(100_000))
    xt = b.x[:, -1, 0]
    se = xt.std(ddof=1) / np.sqrt(len(xt))
    bias = abs((1 - 1 / K) ** K - np.exp(-1.0))
    assert abs(xt.mean() - np.exp(-1.0)) <= 3 * se + bias


def test_residual_covariance_check():
    corr = linear_correlation([[2.0]], [[1.0]], 1.0)
    with pytest.raises(ResidualCovNotPSD):
        sample_bundle(_scalar(corr), make_grid(1.0, 10), 0)


def test_csv_round_trip(tmp_path):
    b = sample_bundle(radar_model(1.0), make_grid(1.0, 20), 4, 2)
    write_csv(b, tmp_path / "p.csv")
    header = (tmp_path / "p.csv").read_text().splitlines()[0]
    assert header == "t,x_1,x_2,x_3,x_4,x_5,x_6,z_1,z_2"
    t, x, z = read_csv(tmp_path / "p.csv")
    np.testing.assert_array_equal(t, b.grid)
    np.testing.assert_array_equal(x, b.x)
    np.testing.assert_array_equal(z, b.z)


def test_binary_round_trip(tmp_path):
    b = sample_bundle(radar_model(1.0), make_grid(1.0, 20), 4, 2)
    write_binary(b, tmp_path / "p.bin")
    raw = (tmp_path / "p.bin").read_bytes()
    assert raw[:4] == b"APB1"
    assert len(raw) == 32 + 8 * (6 + 21 * (1 + 6 + 2 + 2 + 2))
    back = read_binary(tmp_path / "p.bin")
    assert back.seed == 4 and back.stream_id == 2
    for name in ("x0", "w", "n", "x", "z", "grid"):
        np.testing.assert_array_equal(getattr(back, name), getattr(b, name))
