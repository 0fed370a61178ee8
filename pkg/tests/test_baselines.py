"""Closed-form and brute-force oracles for the classical baselines."""

import numpy as np
import pytest

from storm_rme.baselines import (
    KnnEstimator,
    KrigingEstimator,
    KrigingParams,
    KrrEstimator,
    fit_variogram,
    knn_estimate,
    kriging_estimate,
    krr_estimate,
    tune_baselines,
)


def random_scene(rng, n=20, scale=50.0):
    locs = rng.uniform(0, scale, size=(n, 2))
    powers = rng.normal(-60, 6, size=n)
    return locs, powers


# ---------------------------------------------------------------------------
# KNN

def test_knn_exact_hit_returns_measurement():
    locs = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    powers = np.array([-50.0, -60.0, -70.0])
    assert knn_estimate(locs, powers, (10.0, 0.0), 2) == -60.0


def test_knn_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        locs, powers = random_scene(rng, n=15)
        query = rng.uniform(0, 50, size=2)
        k = int(rng.integers(1, 8))
        got = knn_estimate(locs, powers, query, k)
        d = np.linalg.norm(locs - query, axis=1)
        order = np.argsort(d, kind="stable")[:k]
        w = 1.0 / d[order]
        want = (w * powers[order]).sum() / w.sum()
        np.testing.assert_allclose(got, want, rtol=1e-12)


def test_knn_equidistant_points_average():
    locs = np.array([[1.0, 0.0], [-1.0, 0.0]])
    powers = np.array([-40.0, -80.0])
    np.testing.assert_allclose(knn_estimate(locs, powers, (0.0, 0.0), 2),
                               -60.0)


def test_knn_validation():
    with pytest.raises(ValueError):
        knn_estimate(np.empty((0, 2)), np.empty(0), (0, 0), 1)
    with pytest.raises(ValueError):
        knn_estimate(np.zeros((2, 2)), np.zeros(2), (0, 0), 3)


def test_knn_estimator_caps_k():
    rng = np.random.default_rng(1)
    locs, powers = random_scene(rng, n=3)
    out = KnnEstimator(k=10).predict(locs, powers, [[5.0, 5.0]])
    assert out.shape == (1,)


# ---------------------------------------------------------------------------
# KRR

def test_krr_single_point_closed_form():
    # one measurement: gram = 1, alpha = (p - mean)/(1 + ridge) = 0; the
    # prediction everywhere is the mean, i.e. the measurement itself
    locs = np.array([[0.0, 0.0]])
    powers = np.array([-55.0])
    got = krr_estimate(locs, powers, (30.0, 0.0), width=10.0, ridge=0.1)
    np.testing.assert_allclose(got, -55.0)


def test_krr_matches_direct_solve():
    rng = np.random.default_rng(2)
    for _ in range(50):
        locs, powers = random_scene(rng, n=12)
        query = rng.uniform(0, 50, size=2)
        width, ridge = 12.0, 0.05
        got = krr_estimate(locs, powers, query, width, ridge)
        diff = locs[:, None, :] - locs[None, :, :]
        gram = np.exp(-(diff ** 2).sum(-1) / (2 * width ** 2))
        mean = powers.mean()
        alpha = np.linalg.inv(gram + ridge * np.eye(12)) @ (powers - mean)
        kq = np.exp(-((locs - query) ** 2).sum(-1) / (2 * width ** 2))
        np.testing.assert_allclose(got, mean + kq @ alpha, rtol=1e-8)


def test_krr_ridge_validation():
    with pytest.raises(ValueError):
        krr_estimate(np.zeros((2, 2)), np.zeros(2), (0, 0), 10.0, 0.0)


def test_krr_approaches_interpolation_at_small_ridge():
    rng = np.random.default_rng(3)
    locs, powers = random_scene(rng, n=8)
    got = krr_estimate(locs, powers, locs[3], width=20.0, ridge=1e-10)
    np.testing.assert_allclose(got, powers[3], atol=1e-4)


# ---------------------------------------------------------------------------
# kriging

PARAMS = KrigingParams(nugget=0.5, sill=30.0, range_m=40.0)


def test_variogram_shape():
    assert PARAMS(0.0) == 0.0
    np.testing.assert_allclose(PARAMS(1e-9), 0.5, atol=1e-6)
    np.testing.assert_allclose(PARAMS(np.inf), 30.5)
    h = np.linspace(1, 200, 50)
    g = PARAMS(h)
    assert (np.diff(g) > 0).all()


def test_kriging_params_validation():
    with pytest.raises(ValueError):
        KrigingParams(nugget=-1.0, sill=1.0, range_m=1.0)
    with pytest.raises(ValueError):
        KrigingParams(nugget=0.0, sill=0.0, range_m=1.0)


def test_kriging_weights_sum_to_one():
    rng = np.random.default_rng(4)
    for _ in range(30):
        locs, powers = random_scene(rng, n=10)
        query = rng.uniform(0, 50, size=2)
        # recover the weights through linear probes: prediction is linear
        # in the powers with coefficients summing to one
        base, _ = kriging_estimate(locs, powers, query, PARAMS)
        bumped, _ = kriging_estimate(locs, powers + 7.5, query, PARAMS)
        np.testing.assert_allclose(bumped - base, 7.5, atol=1e-8)


def test_kriging_matches_dense_solve_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        locs, powers = random_scene(rng, n=9)
        query = rng.uniform(0, 50, size=2)
        got, var = kriging_estimate(locs, powers, query, PARAMS)
        n = 9
        system = np.zeros((n + 1, n + 1))
        for i in range(n):
            for j in range(n):
                system[i, j] = PARAMS(np.linalg.norm(locs[i] - locs[j]))
            system[i, n] = 1.0
            system[n, i] = 1.0
        rhs = np.append(PARAMS(np.linalg.norm(locs - query, axis=1)), 1.0)
        sol = np.linalg.solve(system, rhs)
        np.testing.assert_allclose(got, sol[:n] @ powers, rtol=1e-8)
        np.testing.assert_allclose(var, sol[:n] @ rhs[:n] + sol[n], atol=1e-8)


def test_kriging_zero_nugget_interpolates():
    rng = np.random.default_rng(6)
    params = KrigingParams(nugget=0.0, sill=20.0, range_m=30.0)
    locs, powers = random_scene(rng, n=8)
    got, var = kriging_estimate(locs, powers, locs[2], params)
    np.testing.assert_allclose(got, powers[2], atol=1e-8)
    assert var < 1e-8


def test_kriging_needs_two_points():
    with pytest.raises(ValueError):
        kriging_estimate(np.zeros((1, 2)), np.zeros(1), (0, 0), PARAMS)


def test_rigid_transform_invariance_all_baselines():
    rng = np.random.default_rng(7)
    locs, powers = random_scene(rng, n=12)
    query = np.array([25.0, 25.0])
    c, s = np.cos(0.8), np.sin(0.8)
    rot = np.array([[c, -s], [s, c]])
    shift = np.array([100.0, -30.0])
    locs2 = locs @ rot.T + shift
    query2 = query @ rot.T + shift
    np.testing.assert_allclose(
        knn_estimate(locs, powers, query, 5),
        knn_estimate(locs2, powers, query2, 5), rtol=1e-10)
    np.testing.assert_allclose(
        krr_estimate(locs, powers, query, 10.0, 0.1),
        krr_estimate(locs2, powers, query2, 10.0, 0.1), rtol=1e-8)
    np.testing.assert_allclose(
        kriging_estimate(locs, powers, query, PARAMS)[0],
        kriging_estimate(locs2, powers, query2, PARAMS)[0], rtol=1e-8)


def test_power_scale_shift_equivariance():
    # affine change of the power units maps through all estimators
    rng = np.random.default_rng(8)
    locs, powers = random_scene(rng, n=10)
    query = np.array([20.0, 30.0])
    a, b = 2.0, 15.0
    np.testing.assert_allclose(
        knn_estimate(locs, a * powers + b, query, 4),
        a * knn_estimate(locs, powers, query, 4) + b, rtol=1e-10)
    got, _ = kriging_estimate(locs, a * powers + b, query,
                              KrigingParams(0.5, 4 * 30.0, 40.0))
    want, _ = kriging_estimate(locs, powers, query,
                               KrigingParams(0.5 / 4, 30.0, 40.0))
    np.testing.assert_allclose(got, a * want + b, rtol=1e-6)


def test_fit_variogram_recovers_parameters():
    # synthesize a Gaussian field with a known exponential variogram and
    # check the fitted range/sill within 30%
    from storm_rme.data import SyntheticMapConfig, generate_synthetic_ms

    cfg = SyntheticMapConfig(extent=(600.0, 600.0), grid_spacing=6.0,
                             shadow_resolution=6.0, shadow_std_db=6.0,
                             shadow_corr_m=50.0, noise_std_db=0.0,
                             gamma=1e-9, p0_db=0.0, seed=11)
    ms, _ = generate_synthetic_ms(cfg)
    rng = np.random.default_rng(0)
    take = rng.choice(ms.count, size=2000, replace=False)
    params = fit_variogram(ms.locations[take], ms.powers[take])
    assert abs(params.range_m - 50.0) / 50.0 < 0.3
    assert abs(params.sill + params.nugget - 36.0) / 36.0 < 0.3


def test_fit_variogram_validation():
    with pytest.raises(ValueError):
        fit_variogram(np.zeros((1, 2)), np.zeros(1))
    with pytest.raises(ValueError):
        fit_variogram(np.zeros((5, 2)), np.zeros(5))  # collocated


def test_estimator_interfaces_vectorized():
    rng = np.random.default_rng(9)
    locs, powers = random_scene(rng, n=10)
    queries = rng.uniform(0, 50, size=(4, 2))
    for est in (KnnEstimator(3), KrrEstimator(10.0, 0.1),
                KrigingEstimator(PARAMS)):
        out = est.predict(locs, powers, queries)
        assert out.shape == (4,)


def test_tune_baselines_returns_grid_members():
    rng = np.random.default_rng(10)
    scenes = []
    for _ in range(4):
        locs, powers = random_scene(rng, n=25)
        scenes.append((locs[:15], powers[:15], locs[15:], powers[15:]))
    tuned = tune_baselines(scenes, k_grid=(3, 5), width_grid=(8.0, 16.0),
                           ridge_grid=(0.01, 0.1))
    assert tuned["knn_k"] in (3, 5)
    assert tuned["krr_width"] in (8.0, 16.0)
    assert tuned["krr_ridge"] in (0.01, 0.1)
