"""Synthetic radio-map generation, measurement-set files, patches, examples.

The generator realizes a log-distance path-loss trend plus spatially
correlated shadowing (exponential correlation, synthesized by FFT
filtering of white noise on a fine grid) and i.i.d. Gaussian measurement
noise.  Measurement sets live on a regular grid but the ground-truth map
is queryable at arbitrary coordinates through bilinear interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .features import FeatureConfig, FeatureMatrix, build_features

__all__ = [
    "SyntheticMapConfig",
    "MeasurementSet",
    "GroundTruthMap",
    "Example",
    "MsFileError",
    "generate_synthetic_ms",
    "sample_patch",
    "build_example",
    "read_ms_file",
    "write_ms_file",
    "ExampleSampler",
    "power_statistics",
]


class MsFileError(ValueError):
    """Malformed measurement-set file."""


@dataclass(frozen=True)
class SyntheticMapConfig:
    tx_location: tuple[float, float] = (350.0, 350.0)
    p0_db: float = -30.0            # reference power at distance d0
    d0_m: float = 1.0
    gamma: float = 3.0              # path-loss exponent
    shadow_std_db: float = 6.0
    shadow_corr_m: float = 50.0
    noise_std_db: float = 1.0
    extent: tuple[float, float] = (700.0, 700.0)
    grid_spacing: float = 4.0       # measurement grid
    shadow_resolution: float = 4.0  # fine grid for the shadowing field
    seed: int = 0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("path-loss exponent must be positive")
        if self.shadow_std_db < 0:
            raise ValueError("shadowing std must be nonnegative")
        if self.shadow_corr_m <= 0:
            raise ValueError("shadowing correlation distance must be positive")
        if self.grid_spacing <= 0 or self.shadow_resolution <= 0:
            raise ValueError("grid spacings must be positive")


@dataclass
class MeasurementSet:
    identifier: str
    locations: np.ndarray    # (N, 2) meters
    powers: np.ndarray       # (N,) dB
    bounds: tuple[float, float, float, float]  # x0, y0, x1, y1
    grid_spacing: float | None = None

    @property
    def count(self) -> int:
        return self.locations.shape[0]


class GroundTruthMap:
    """Continuous power map: path-loss trend + interpolated shadowing."""

    def __init__(self, config: SyntheticMapConfig, shadow_grid: np.ndarray):
        self.config = config
        self.shadow_grid = shadow_grid  # (ny, nx), value at (i*res, j*res)

    def shadowing(self, locations) -> np.ndarray:
        """Bilinear interpolation of the fine-grid shadowing field."""
        locations = np.atleast_2d(np.asarray(locations, dtype=np.float64))
        res = self.config.shadow_resolution
        ny, nx = self.shadow_grid.shape
        fx = np.clip(locations[:, 0] / res, 0.0, nx - 1.0)
        fy = np.clip(locations[:, 1] / res, 0.0, ny - 1.0)
        ix = np.minimum(fx.astype(int), nx - 2)
        iy = np.minimum(fy.astype(int), ny - 2)
        tx = fx - ix
        ty = fy - iy
        g = self.shadow_grid
        return ((1 - ty) * ((1 - tx) * g[iy, ix] + tx * g[iy, ix + 1])
                + ty * ((1 - tx) * g[iy + 1, ix] + tx * g[iy + 1, ix + 1]))

    def __call__(self, locations) -> np.ndarray:
        """True received power (dB) at arbitrary in-bounds coordinates."""
        locations = np.atleast_2d(np.asarray(locations, dtype=np.float64))
        cfg = self.config
        d = np.hypot(locations[:, 0] - cfg.tx_location[0],
                     locations[:, 1] - cfg.tx_location[1])
        d = np.maximum(d, cfg.d0_m)
        trend = cfg.p0_db - 10.0 * cfg.gamma * np.log10(d / cfg.d0_m)
        return trend + self.shadowing(locations)


def _shadow_field(config: SyntheticMapConfig, rng) -> np.ndarray:
    """Correlated Gaussian field via FFT filtering of white noise.

    White noise on a doubled (wraparound-padded) grid is filtered with the
    square-root spectrum of the exponential correlation kernel; the
    top-left quadrant is returned, which breaks the periodic coupling.
    """
    res = config.shadow_resolution
    nx = int(np.floor(config.extent[0] / res)) + 1
    ny = int(np.floor(config.extent[1] / res)) + 1
    if config.shadow_std_db == 0.0:
        return np.zeros((ny, nx))
    px, py = 2 * nx, 2 * ny
    wx = np.minimum(np.arange(px), px - np.arange(px)) * res
    wy = np.minimum(np.arange(py), py - np.arange(py)) * res
    dist = np.hypot(wy[:, None], wx[None, :])
    corr = config.shadow_std_db ** 2 * np.exp(-dist / config.shadow_corr_m)
    lam = np.maximum(np.fft.fft2(corr).real, 0.0)
    white = rng.normal(size=(py, px))
    field = np.fft.ifft2(np.sqrt(lam) * np.fft.fft2(white)).real
    return field[:ny, :nx]


def generate_synthetic_ms(
    config: SyntheticMapConfig, identifier: str = "synthetic",
) -> tuple[MeasurementSet, GroundTruthMap]:
    """Grid measurement set plus its continuous ground-truth map."""
    rng = np.random.default_rng(config.seed)
    truth = GroundTruthMap(config, _shadow_field(config, rng))
    sx, sy = config.extent
    xs = np.arange(0.0, sx + 1e-9, config.grid_spacing)
    ys = np.arange(0.0, sy + 1e-9, config.grid_spacing)
    gx, gy = np.meshgrid(xs, ys)
    locations = np.column_stack([gx.ravel(), gy.ravel()])
    powers = truth(locations) + rng.normal(0.0, config.noise_std_db,
                                           size=locations.shape[0])
    ms = MeasurementSet(identifier, locations, powers,
                        (0.0, 0.0, sx, sy), config.grid_spacing)
    return ms, truth


# ---------------------------------------------------------------------------
# patches and examples

def sample_patch(ms: MeasurementSet, side: float, rng,
                 grid_aligned: bool = True) -> MeasurementSet:
    """Restrict a measurement set to a uniformly placed square patch."""
    x0, y0, x1, y1 = ms.bounds
    if side > min(x1 - x0, y1 - y0):
        raise ValueError(f"patch side {side} exceeds measurement-set extent")
    max_ox, max_oy = x1 - x0 - side, y1 - y0 - side
    if grid_aligned and ms.grid_spacing:
        delta = ms.grid_spacing
        ox = x0 + delta * rng.integers(0, int(np.floor(max_ox / delta)) + 1)
        oy = y0 + delta * rng.integers(0, int(np.floor(max_oy / delta)) + 1)
    else:
        ox = x0 + rng.uniform(0.0, max_ox)
        oy = y0 + rng.uniform(0.0, max_oy)
    inside = ((ms.locations[:, 0] >= ox - 1e-9)
              & (ms.locations[:, 0] <= ox + side + 1e-9)
              & (ms.locations[:, 1] >= oy - 1e-9)
              & (ms.locations[:, 1] <= oy + side + 1e-9))
    return MeasurementSet(
        f"{ms.identifier}/patch", ms.locations[inside], ms.powers[inside],
        (ox, oy, ox + side, oy + side), ms.grid_spacing,
    )


@dataclass
class Example:
    features: FeatureMatrix
    target_power: float
    source_id: str
    count: int


def build_example(patch: MeasurementSet, n: int, rng,
                  config: FeatureConfig) -> Example:
    """Pick one target and n input measurements (target excluded) uniformly."""
    if patch.count < n + 1:
        raise ValueError(
            f"patch holds {patch.count} measurements, need at least {n + 1}"
        )
    chosen = rng.choice(patch.count, size=n + 1, replace=False)
    target_idx, input_idx = chosen[0], chosen[1:]
    feats = build_features(
        patch.locations[input_idx], patch.powers[input_idx],
        patch.locations[target_idx], config, source_index=input_idx,
    )
    return Example(feats, float(patch.powers[target_idx]),
                   patch.identifier, n)


# ---------------------------------------------------------------------------
# file format: UTF-8 text, '#' metadata comments, header x_m,y_m,power_db

def write_ms_file(ms: MeasurementSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# id {ms.identifier}\n")
        fh.write("# bounds {} {} {} {}\n".format(*(repr(float(b)) for b in ms.bounds)))
        if ms.grid_spacing is not None:
            fh.write(f"# spacing {float(ms.grid_spacing)!r}\n")
        fh.write("x_m,y_m,power_db\n")
        for (x, y), p in zip(ms.locations, ms.powers):
            fh.write(f"{float(x)!r},{float(y)!r},{float(p)!r}\n")


def read_ms_file(path) -> MeasurementSet:
    identifier = str(path)
    bounds = None
    spacing = None
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        saw_header = False
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                fields = line[1:].split()
                if fields and fields[0] == "id":
                    identifier = " ".join(fields[1:])
                elif fields and fields[0] == "bounds":
                    bounds = tuple(float(v) for v in fields[1:5])
                elif fields and fields[0] == "spacing":
                    spacing = float(fields[1])
                continue
            if not saw_header:
                if line != "x_m,y_m,power_db":
                    raise MsFileError(
                        f"{path}:{lineno}: expected header 'x_m,y_m,power_db'"
                    )
                saw_header = True
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise MsFileError(f"{path}:{lineno}: expected 3 fields")
            try:
                rows.append(tuple(float(v) for v in parts))
            except ValueError as e:
                raise MsFileError(f"{path}:{lineno}: {e}") from None
    if not saw_header:
        raise MsFileError(f"{path}: missing header line")
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), 3)
    locations, powers = arr[:, :2], arr[:, 2]
    if bounds is None:
        if len(rows) == 0:
            raise MsFileError(f"{path}: empty measurement set without bounds")
        bounds = (locations[:, 0].min(), locations[:, 1].min(),
                  locations[:, 0].max(), locations[:, 1].max())
    x0, y0, x1, y1 = bounds
    eps = 1e-9
    if len(rows) and (
        (locations[:, 0] < x0 - eps).any() or (locations[:, 0] > x1 + eps).any()
        or (locations[:, 1] < y0 - eps).any() or (locations[:, 1] > y1 + eps).any()
    ):
        raise MsFileError(f"{path}: measurement outside declared bounds")
    return MeasurementSet(identifier, locations, powers, bounds, spacing)


# ---------------------------------------------------------------------------
# training batches

def power_statistics(sets: list[MeasurementSet]) -> tuple[float, float]:
    allp = np.concatenate([ms.powers for ms in sets])
    return float(allp.mean()), float(allp.std())


class ExampleSampler:
    """Draws fixed-N training batches from measurement-set patches.

    Every batch shares one N drawn uniformly from [n_min, n_max]; each
    example comes from a uniformly chosen set and patch.
    """

    def __init__(self, sets: list[MeasurementSet], patch_side: float,
                 n_min: int, n_max: int, feature_config: FeatureConfig,
                 grid_aligned: bool = True):
        if not sets:
            raise ValueError("need at least one measurement set")
        if n_min < 1 or n_max < n_min:
            raise ValueError("invalid [n_min, n_max] range")
        self.sets = sets
        self.patch_side = patch_side
        self.n_min = n_min
        self.n_max = n_max
        self.feature_config = feature_config
        self.grid_aligned = grid_aligned

    def _draw_patch(self, rng, min_count: int) -> MeasurementSet:
        for _ in range(100):
            ms = self.sets[rng.integers(0, len(self.sets))]
            patch = sample_patch(ms, self.patch_side, rng, self.grid_aligned)
            if patch.count >= min_count:
                return patch
        raise RuntimeError(
            f"no patch with {min_count} measurements found in 100 draws"
        )

    def sample_batch(self, rng, batch_size: int):
        n = int(rng.integers(self.n_min, self.n_max + 1))
        targets = np.empty(batch_size)
        cols = []
        for t in range(batch_size):
            patch = self._draw_patch(rng, n + 1)
            ex = build_example(patch, n, rng, self.feature_config)
            cols.append(ex.features.columns)
            targets[t] = ex.target_power
        return np.stack(cols), targets
