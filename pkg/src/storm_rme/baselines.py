"""Classical gridless estimators: KNN, kernel ridge regression, kriging.

All three accept arbitrary real-valued query coordinates and depend on the
measurement geometry only through distances, which makes them translation
and rotation invariant by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

__all__ = [
    "KrigingParams",
    "knn_estimate",
    "krr_estimate",
    "kriging_estimate",
    "fit_variogram",
    "KnnEstimator",
    "KrrEstimator",
    "KrigingEstimator",
    "tune_baselines",
]

EXACT_HIT = 1e-9


@dataclass(frozen=True)
class KrigingParams:
    """Exponential variogram with nugget: g(h) = nugget + sill (1 - e^{-h/r})."""

    nugget: float
    sill: float
    range_m: float

    def __post_init__(self):
        if self.nugget < 0 or self.sill <= 0 or self.range_m <= 0:
            raise ValueError("variogram parameters out of range")

    def __call__(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        g = self.nugget + self.sill * (1.0 - np.exp(-h / self.range_m))
        return np.where(h > 0.0, g, 0.0)


def knn_estimate(locations, powers, query, k: int) -> float:
    """Inverse-distance-weighted mean of the k nearest measurements."""
    locations = np.asarray(locations, dtype=np.float64)
    powers = np.asarray(powers, dtype=np.float64)
    n = locations.shape[0]
    if n == 0:
        raise ValueError("knn_estimate needs at least one measurement")
    if k > n:
        raise ValueError(f"k={k} exceeds measurement count {n}")
    query = np.asarray(query, dtype=np.float64)
    d = np.hypot(locations[:, 0] - query[0], locations[:, 1] - query[1])
    hit = np.argmin(d)
    if d[hit] < EXACT_HIT:
        return float(powers[hit])
    nearest = np.argpartition(d, k - 1)[:k]
    w = 1.0 / d[nearest]
    return float((w * powers[nearest]).sum() / w.sum())


def krr_estimate(locations, powers, query, width: float, ridge: float) -> float:
    """Gaussian-kernel ridge regression in mean-centered units."""
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    locations = np.asarray(locations, dtype=np.float64)
    powers = np.asarray(powers, dtype=np.float64)
    diff = locations[:, None, :] - locations[None, :, :]
    gram = np.exp(-(diff ** 2).sum(-1) / (2.0 * width ** 2))
    mean = powers.mean()
    alpha = np.linalg.solve(gram + ridge * np.eye(len(powers)), powers - mean)
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    kq = np.exp(-((locations[None, :, :] - q[:, None, :]) ** 2).sum(-1)
                / (2.0 * width ** 2))
    out = mean + kq @ alpha
    return float(out[0]) if out.size == 1 else out


def _kriging_system(locations, params: KrigingParams) -> np.ndarray:
    n = locations.shape[0]
    diff = locations[:, None, :] - locations[None, :, :]
    gamma = params(np.sqrt((diff ** 2).sum(-1)))
    system = np.empty((n + 1, n + 1))
    system[:n, :n] = gamma
    system[:n, n] = 1.0
    system[n, :n] = 1.0
    system[n, n] = 0.0
    return system


def kriging_estimate(locations, powers, query,
                     params: KrigingParams) -> tuple[float, float]:
    """Ordinary-kriging prediction and variance at one query location."""
    locations = np.asarray(locations, dtype=np.float64)
    powers = np.asarray(powers, dtype=np.float64)
    if locations.shape[0] < 2:
        raise ValueError("ordinary kriging needs at least 2 measurements")
    system = _kriging_system(locations, params)
    query = np.asarray(query, dtype=np.float64)
    d = np.hypot(locations[:, 0] - query[0], locations[:, 1] - query[1])
    rhs = np.append(params(d), 1.0)
    try:
        sol = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError:
        n = locations.shape[0]
        system[:n, :n] += 1e-8 * np.eye(n)
        sol = np.linalg.solve(system, rhs)
    weights, mu = sol[:-1], sol[-1]
    prediction = float(weights @ powers)
    variance = float(weights @ rhs[:-1] + mu)
    return prediction, variance


def fit_variogram(locations, powers, n_bins: int = 15,
                  max_pairs: int = 200_000, rng=None) -> KrigingParams:
    """Least-squares exponential fit to the binned empirical semivariogram."""
    locations = np.asarray(locations, dtype=np.float64)
    powers = np.asarray(powers, dtype=np.float64)
    n = locations.shape[0]
    if n < 2:
        raise ValueError("variogram fitting needs at least 2 measurements")
    iu, ju = np.triu_indices(n, k=1)
    if iu.size > max_pairs:
        rng = np.random.default_rng(0) if rng is None else rng
        keep = rng.choice(iu.size, size=max_pairs, replace=False)
        iu, ju = iu[keep], ju[keep]
    h = np.hypot(locations[iu, 0] - locations[ju, 0],
                 locations[iu, 1] - locations[ju, 1])
    if h.max() <= 0:
        raise ValueError("all measurements collocated")
    sv = 0.5 * (powers[iu] - powers[ju]) ** 2
    edges = np.linspace(0.0, h.max() * 0.6, n_bins + 1)
    centers, values = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        mask = (h > lo) & (h <= hi)
        if mask.sum() >= 5:
            centers.append(h[mask].mean())
            values.append(sv[mask].mean())
    centers = np.asarray(centers)
    values = np.asarray(values)
    if centers.size < 3:
        raise ValueError("too few populated variogram bins")

    def model(hh, nugget, sill, rng_m):
        return nugget + sill * (1.0 - np.exp(-hh / rng_m))

    sill0 = max(values.max(), 1e-6)
    p0 = (values[0] * 0.5, sill0, max(centers.max() / 3.0, 1e-3))
    bounds = ([0.0, 1e-9, 1e-6], [sill0 * 2, sill0 * 10, centers.max() * 10])
    popt, _ = curve_fit(model, centers, values, p0=p0, bounds=bounds,
                        maxfev=10_000)
    return KrigingParams(nugget=float(popt[0]), sill=float(max(popt[1], 1e-9)),
                         range_m=float(popt[2]))


# ---------------------------------------------------------------------------
# uniform estimator interface: predict(locations, powers, queries) -> values

class KnnEstimator:
    def __init__(self, k: int = 5):
        self.k = k

    def predict(self, locations, powers, queries) -> np.ndarray:
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        k = min(self.k, len(powers))
        return np.array([knn_estimate(locations, powers, q, k)
                         for q in queries])


class KrrEstimator:
    def __init__(self, width: float = 16.0, ridge: float = 0.1):
        self.width = width
        self.ridge = ridge

    def predict(self, locations, powers, queries) -> np.ndarray:
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        out = krr_estimate(locations, powers, queries, self.width, self.ridge)
        return np.atleast_1d(out)


class KrigingEstimator:
    def __init__(self, params: KrigingParams):
        self.params = params

    def predict(self, locations, powers, queries) -> np.ndarray:
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        return np.array([
            kriging_estimate(locations, powers, q, self.params)[0]
            for q in queries
        ])


def tune_baselines(scenes, k_grid=(3, 5, 8, 12, 16),
                   width_grid=(4.0, 8.0, 16.0, 32.0),
                   ridge_grid=(1e-3, 1e-2, 1e-1, 1.0)) -> dict:
    """Grid-search KNN/KRR hyperparameters on held-out training scenes.

    ``scenes`` is a list of (locations, powers, query_locations,
    query_powers) tuples.
    """
    def score(est):
        errs = []
        for locs, pows, qlocs, qpows in scenes:
            errs.append(((est.predict(locs, pows, qlocs) - qpows) ** 2).mean())
        return float(np.mean(errs))

    best_k = min(k_grid, key=lambda k: score(KnnEstimator(k)))
    best_w, best_r = min(
        ((w, r) for w in width_grid for r in ridge_grid),
        key=lambda wr: score(KrrEstimator(wr[0], wr[1])),
    )
    return {"knn_k": best_k, "krr_width": best_w, "krr_ridge": best_r}
