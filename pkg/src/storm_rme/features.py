"""Translation- and rotation-invariant features for target-relative inputs.

Each measurement contributes one feature column built from its power and
its offset from the target location, expressed in a rotation frame aligned
with the power-weighted mean offset direction.  The frame makes the
features invariant to rigid motions of the whole scene; a power-weighted
(rather than argmax) direction keeps the frame continuous in the powers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Measurement",
    "FeatureConfig",
    "RotationFrame",
    "FeatureMatrix",
    "rotation_frame",
    "build_features",
    "build_candidate_features",
    "feature_dim",
]

DEGENERATE_NORM = 1e-9


@dataclass(frozen=True)
class Measurement:
    """One geolocated received-power sample (planar coordinates, dB)."""

    location: tuple[float, float]
    power_db: float


@dataclass(frozen=True)
class FeatureConfig:
    polar: bool = True           # append radius + cos/sin of the rotated offset
    length_scale: float = 32.0   # meters; divides geometric entries
    power_mean: float = 0.0      # training-set standardization of powers
    power_std: float = 1.0

    def __post_init__(self):
        if self.length_scale <= 0:
            raise ValueError("length_scale must be positive")
        if self.power_std <= 0:
            raise ValueError("power_std must be positive")


def feature_dim(config: FeatureConfig) -> int:
    return 6 if config.polar else 3


@dataclass(frozen=True)
class RotationFrame:
    matrix: np.ndarray      # (2, 2) rotation, det +1
    direction: np.ndarray   # un-normalized weighted offset sum
    degenerate: bool


def rotation_frame(locations: np.ndarray, powers: np.ndarray, target) -> RotationFrame:
    """Frame whose first axis points along sum_n exp(y_n - max y) (x_n - x).

    The max-shift rescales all weights by one positive factor, which leaves
    the direction (and hence the rotation) unchanged while preventing
    overflow for dB-scale powers.
    """
    locations = np.asarray(locations, dtype=np.float64)
    powers = np.asarray(powers, dtype=np.float64)
    if locations.ndim != 2 or locations.shape[0] == 0:
        raise ValueError("rotation_frame needs at least one measurement")
    target = np.asarray(target, dtype=np.float64)
    weights = np.exp(powers - powers.max())
    direction = (weights[:, None] * (locations - target)).sum(axis=0)
    norm = np.hypot(direction[0], direction[1])
    if norm < DEGENERATE_NORM:
        return RotationFrame(np.eye(2), direction, True)
    c, s = direction / norm
    rot = np.array([[c, s], [-s, c]])
    return RotationFrame(rot, direction, False)


@dataclass(frozen=True)
class FeatureMatrix:
    """Column-per-measurement invariant features for one target location."""

    columns: np.ndarray          # (feature_dim, N)
    target: np.ndarray           # (2,)
    frame: RotationFrame
    source_index: np.ndarray     # (N,) indices into the source measurement list

    @property
    def count(self) -> int:
        return self.columns.shape[1]


def _geometry_rows(offsets: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Rows [gx, gy] plus optional [r, cos, sin] from rotated offsets (N, 2)."""
    scaled = offsets / config.length_scale
    rows = [scaled[:, 0], scaled[:, 1]]
    if config.polar:
        r = np.hypot(scaled[:, 0], scaled[:, 1])
        safe = np.where(r > 0.0, r, 1.0)
        cos = np.where(r > 0.0, scaled[:, 0] / safe, 1.0)
        sin = np.where(r > 0.0, scaled[:, 1] / safe, 0.0)
        rows += [r, cos, sin]
    return np.stack(rows)


def build_features(
    locations: np.ndarray,
    powers: np.ndarray,
    target,
    config: FeatureConfig,
    source_index: np.ndarray | None = None,
) -> FeatureMatrix:
    """Assemble the invariant feature matrix for one target location."""
    locations = np.asarray(locations, dtype=np.float64)
    powers = np.asarray(powers, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if locations.shape[0] == 0:
        raise ValueError("build_features needs at least one measurement")
    if not (np.isfinite(locations).all() and np.isfinite(powers).all()):
        raise ValueError("non-finite measurement inputs")
    normed_powers = (powers - config.power_mean) / config.power_std
    frame = rotation_frame(locations, normed_powers, target)
    rotated = (locations - target) @ frame.matrix.T
    columns = np.vstack([normed_powers[None, :], _geometry_rows(rotated, config)])
    if source_index is None:
        source_index = np.arange(locations.shape[0])
    return FeatureMatrix(columns, target, frame, np.asarray(source_index))


def build_candidate_features(
    candidates: np.ndarray,
    frame: RotationFrame,
    target,
    config: FeatureConfig,
) -> np.ndarray:
    """Geometric-only feature columns for candidate locations.

    The frame must come from the real measurements (candidates never enter
    the direction sum), so candidate columns have one row fewer than the
    measurement features: there is no power row.
    """
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.ndim != 2 or candidates.shape[0] == 0:
        raise ValueError("build_candidate_features needs at least one candidate")
    target = np.asarray(target, dtype=np.float64)
    rotated = (candidates - target) @ frame.matrix.T
    return _geometry_rows(rotated, config)
