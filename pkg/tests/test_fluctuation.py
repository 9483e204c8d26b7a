import csv

import numpy as np
import pytest

from mfqi.core import Params, fixed_point
from mfqi.fluctuation import (CovarianceMatrix, frozen_propagation_gap, limit_law_sample,
                              limit_law_samples, propagate_covariance, representation_residual,
                              sample_z_paths, sqrt_psd, write_covariance_csv, write_limit_law_csv)
from mfqi.meanfield import solve_ode
from mfqi.stats import moment_summary

P1 = Params(0.5, 1.0, 2, 1.0)


@pytest.fixture(scope="module")
def short_path():
    return solve_ode(P1, [1.0], np.linspace(0, 1, 201))


def cov_and_se(z):
    """Sample covariance of rows of z and the standard error of each entry."""
    zc = z - z.mean(axis=0)
    prod = zc[:, :, None] * zc[:, None, :]
    return prod.mean(axis=0), prod.std(axis=0, ddof=1) / np.sqrt(z.shape[0])


def test_zero_dynamics_keep_initial_covariance():
    p = Params(0.0, 0.0, 2, 1.0)
    path = solve_ode(p, [0.5, 0.3, 0.2], np.linspace(0, 1, 11), J=4)
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 5))
    s0 = a @ a.T
    out = propagate_covariance(path, p, CovarianceMatrix(s0, 0.0))
    np.testing.assert_allclose(out.sigma, s0, atol=1e-14)
    z = sample_z_paths(path, p, 10, seed=1)
    assert not np.any(z)


def test_covariance_is_symmetric_psd_zero_sum(short_path):
    covs = propagate_covariance(short_path, P1, all_times=True)
    assert len(covs) == short_path.grid.size
    for c in covs:
        np.testing.assert_allclose(c.sigma, c.sigma.T, atol=1e-12)
        assert np.linalg.eigvalsh(c.sigma).min() >= -1e-10
        assert np.abs(c.sigma.sum(axis=1)).max() <= 1e-8
    assert covs[-1].t == 1.0 and covs[-1].sigma[0, 0] > 0


def test_initial_covariance_shape_checked(short_path):
    with pytest.raises(ValueError):
        propagate_covariance(short_path, P1, np.eye(2))


def test_sqrt_psd_clamps_and_squares():
    phi = np.array([[1.0, -1.0], [-1.0, 1.0]]) * 0.5
    r = sqrt_psd(phi)
    np.testing.assert_allclose(r @ r, phi, atol=1e-14)
    np.testing.assert_allclose(r, r.T)


def test_sampler_rejects_coarse_grid():
    path = solve_ode(P1, [1.0], np.linspace(0, 1, 11))
    with pytest.raises(ValueError):
        sample_z_paths(path, P1, 5)


@pytest.fixture(scope="module")
def z_end(short_path):
    return sample_z_paths(short_path, P1, 5000, seed=(31,))[-1]


def test_sampler_matches_lyapunov(short_path, z_end):
    sigma = propagate_covariance(short_path, P1).sigma
    cov, se = cov_and_se(z_end)
    k = 6
    assert np.all(np.abs(cov[:k, :k] - sigma[:k, :k]) <= 4 * se[:k, :k] + 1e-12)


def test_sampled_endpoint_is_gaussian(z_end):
    for j in range(4):
        s = moment_summary(z_end[:, j])
        assert abs(s.skewness) <= 0.15
        assert abs(s.kurtosis - 3) <= 0.3


def test_sampled_paths_stay_zero_sum(short_path):
    z = sample_z_paths(short_path, P1, 50, seed=2)
    assert np.abs(z.sum(axis=2)).max() < 1e-9


def test_halving_step_changes_covariance_less_than_mc_error():
    fine = solve_ode(P1, [1.0], np.linspace(0, 1, 401))
    coarse = solve_ode(P1, [1.0], np.linspace(0, 1, 201))
    a, sa = cov_and_se(sample_z_paths(coarse, P1, 5000, seed=(32,))[-1])
    b, sb = cov_and_se(sample_z_paths(fine, P1, 5000, seed=(33,))[-1])
    k = 6
    assert np.all(np.abs(a - b)[:k, :k] <= 4 * np.hypot(sa, sb)[:k, :k] + 1e-12)


def test_representation_residuals(short_path):
    rng = np.random.default_rng(4)
    n = short_path.J + 1
    for t in short_path.grid[::20][:10]:
        for _ in range(10):
            x = rng.normal(size=n)
            x -= x.mean()
            assert representation_residual(short_path, P1, x, t) <= 1e-10
    assert representation_residual(short_path, P1, np.zeros(n), 0.5) == 0.0


def test_representation_at_fixed_point():
    x_star = fixed_point(P1, 12)
    path = solve_ode(P1, x_star, np.linspace(0, 1, 11), J=12)
    assert representation_residual(path, P1, [1.0, -1.0], 0.3) < 1e-10


def test_frozen_exponential_matches_ode():
    x_star = fixed_point(P1, 12)
    assert frozen_propagation_gap(x_star, P1, [1.0, -1.0], 1.0) < 1e-8


@pytest.fixture(scope="module")
def long_path():
    # level-one start keeps the 2x2 normal equations well conditioned
    p = Params(0.5, 1.0, 2, 10.0)
    return p, solve_ode(p, [0.0, 1.0], np.linspace(0, 10, 1501))


def test_limit_functionals_vanish_on_zero_path(long_path):
    p, path = long_path
    s = limit_law_sample(path, p, np.zeros((path.grid.size, path.J + 1)))
    assert (s.I, s.J, s.K, s.lim1, s.lim2) == (0.0, 0.0, 0.0, 0.0, 0.0)


def test_limit_functionals_are_linear(long_path):
    p, path = long_path
    z = sample_z_paths(path, p, 2, seed=7)
    a = limit_law_sample(path, p, z[:, 0])
    b = limit_law_sample(path, p, z[:, 1])
    ab = limit_law_sample(path, p, z[:, 0] + z[:, 1])
    for f in ("I", "J", "K", "lim1", "lim2"):
        assert getattr(ab, f) == pytest.approx(getattr(a, f) + getattr(b, f), rel=1e-10, abs=1e-10)
    batch = limit_law_sample(path, p, z)
    np.testing.assert_allclose(batch.lim1, [a.lim1, b.lim1], rtol=1e-12)


def test_limit_functionals_reject_grid_mismatch(long_path):
    p, path = long_path
    with pytest.raises(ValueError):
        limit_law_sample(path, p, np.zeros((10, path.J + 1)))


def test_limit_vector_is_centered(long_path):
    p, path = long_path
    s = limit_law_samples(path, p, 2000, seed=(8,))
    v = s.limit_vector
    assert v.shape == (2000, 2)
    se = v.std(axis=0, ddof=1) / np.sqrt(len(v))
    assert np.all(np.abs(v.mean(axis=0)) <= 4 * se)


def test_limit_samples_deterministic(long_path):
    p, path = long_path
    a = limit_law_samples(path, p, 30, seed=(9,), chunk=7)
    b = limit_law_samples(path, p, 30, seed=(9,), chunk=7)
    np.testing.assert_array_equal(a.lim1, b.lim1)


def test_csv_writers(tmp_path, short_path):
    covs = propagate_covariance(short_path, P1, all_times=True)[-2:]
    dest = write_covariance_csv(covs, tmp_path / "cov.csv")
    rows = list(csv.reader(dest.open()))
    n = short_path.J + 1
    assert rows[0] == ["t", "i", "j", "sigma"] and len(rows) == 1 + 2 * n * n
    assert float(rows[-1][3]) == covs[-1].sigma[-1, -1]
    z = np.zeros((short_path.grid.size, 3, n))
    dest = write_limit_law_csv(limit_law_sample(short_path, P1, z), tmp_path / "ll.csv")
    rows = list(csv.reader(dest.open()))
    assert rows[0] == ["sample", "I", "J", "K", "lim1", "lim2"] and len(rows) == 4
