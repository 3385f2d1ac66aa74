"""
Coherent range/azimuth/elevation binning and point extraction.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

from .core_types import LabeledMesh, RadarConfig, RadarPointCloud, ValidationError, spherical_to_cartesian
from .raytrace import Bvh, RadarReturns, TraceStats, build_bvh, trace_frame

DEFAULT_THRESHOLD_DB = 40.0


class OutOfFovWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class RangeAzElGrid:
    """Complex accumulator indexed [range, azimuth, elevation]. Angles in degrees."""

    data: np.ndarray
    range_resolution: float
    azimuth_start: float
    azimuth_resolution: float
    elevation_start: float
    elevation_resolution: float
    n_binned: int = 0
    dropped_out_of_fov: int = 0
    dropped_out_of_range: int = 0
    max_range: float | None = None  # the last range bin is clipped to this when partial

    @classmethod
    def zeros(cls, config: RadarConfig) -> "RangeAzElGrid":
        return cls(np.zeros(config.grid_shape, dtype=np.complex128), config.range_resolution,
                   config.azimuth_start, config.azimuth_resolution,
                   config.elevation_start, config.elevation_resolution, max_range=config.max_range)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)

    def power(self) -> float:
        return float(np.sum(np.abs(self.data) ** 2))

    def _geometry(self):
        return (self.range_resolution, self.azimuth_start, self.azimuth_resolution,
                self.elevation_start, self.elevation_resolution)

    def __add__(self, other: "RangeAzElGrid") -> "RangeAzElGrid":
        if self.shape != other.shape or self._geometry() != other._geometry():
            raise ValidationError("grids have different geometry", "grid")
        return RangeAzElGrid(self.data + other.data, *self._geometry(),
                             self.n_binned + other.n_binned,
                             self.dropped_out_of_fov + other.dropped_out_of_fov,
                             self.dropped_out_of_range + other.dropped_out_of_range, self.max_range)

    def scaled(self, k: float) -> "RangeAzElGrid":
        return RangeAzElGrid(self.data * k, *self._geometry(), self.n_binned,
                             self.dropped_out_of_fov, self.dropped_out_of_range, self.max_range)

    def bin_centers(self, index) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(range m, azimuth deg, elevation deg) at the centre of each (i, j, k) index triple.

        A final range bin that extends past ``max_range`` is centred on its in-range part.
        """
        i, j, k = (np.asarray(a) for a in index)
        lo = i * self.range_resolution
        hi = (i + 1) * self.range_resolution
        if self.max_range is not None:
            hi = np.minimum(hi, self.max_range)
        return (0.5 * (lo + hi),
                self.azimuth_start + (j + 0.5) * self.azimuth_resolution,
                self.elevation_start + (k + 0.5) * self.elevation_resolution)


def bin_indices(returns: RadarReturns, config: RadarConfig):
    """Flat bin index per return plus in-range and in-FOV masks."""
    n_r, n_a, n_e = config.grid_shape
    ri = np.floor(returns.two_way_path_length / (2.0 * config.range_resolution))
    ai = np.floor((np.degrees(returns.azimuth) - config.azimuth_start) / config.azimuth_resolution)
    ei = np.floor((np.degrees(returns.elevation) - config.elevation_start) / config.elevation_resolution)
    in_fov = (ai >= 0) & (ai < n_a) & (ei >= 0) & (ei < n_e)
    in_range = (ri >= 0) & (ri < n_r)
    ok = in_fov & in_range
    flat = np.zeros(len(returns), dtype=np.int64)
    flat[ok] = np.ravel_multi_index((ri[ok].astype(np.int64), ai[ok].astype(np.int64), ei[ok].astype(np.int64)),
                                    (n_r, n_a, n_e))
    return flat, in_range, in_fov


def bin_returns(returns: RadarReturns, config: RadarConfig) -> RangeAzElGrid:
    """Coherently sum returns: each adds amplitude * exp(-j 2 pi L / lambda) to its bin."""
    if not isinstance(returns, RadarReturns):
        returns = RadarReturns.from_records(returns)
    grid = RangeAzElGrid.zeros(config)
    if len(returns) == 0:
        return grid
    flat, in_range, in_fov = bin_indices(returns, config)
    ok = in_range & in_fov
    n_fov = int(np.count_nonzero(~in_fov))
    n_range = int(np.count_nonzero(in_fov & ~in_range))
    if n_fov:
        warnings.warn(f"{n_fov} returns outside the angular field of view were dropped", OutOfFovWarning,
                      stacklevel=2)
    cycles = np.mod(returns.two_way_path_length[ok] / config.wavelength, 1.0)
    contrib = returns.amplitude[ok] * np.exp(-2j * np.pi * cycles)
    size = grid.data.size
    acc = (np.bincount(flat[ok], weights=contrib.real, minlength=size)
           + 1j * np.bincount(flat[ok], weights=contrib.imag, minlength=size))
    return RangeAzElGrid(acc.reshape(grid.shape), *grid._geometry(), int(ok.sum()), n_fov, n_range,
                         config.max_range)


def _cfar_mask(mag: np.ndarray, train: int, guard: int, pfa: float) -> np.ndarray:
    """Cell-averaging CFAR along the range axis on bin power."""
    power = mag**2
    width = 2 * (train + guard) + 1
    kernel = np.ones(width)
    kernel[train: train + 2 * guard + 1] = 0.0
    n_train = 2 * train
    noise = convolve1d(power, kernel, axis=0, mode="constant") / n_train
    alpha = n_train * (pfa ** (-1.0 / n_train) - 1.0)
    return (power > alpha * noise) & (mag > 0)


def extract_points(grid: RangeAzElGrid, config: RadarConfig | None = None,
                   threshold_db: float = DEFAULT_THRESHOLD_DB, mode: str = "threshold",
                   cfar_train: int = 8, cfar_guard: int = 2, cfar_pfa: float = 1e-3) -> RadarPointCloud:
    """Emit one point per bin whose magnitude is within ``threshold_db`` of the grid maximum.

    Points sit at bin centres; intensity is the bin magnitude. With
    ``mode="cfar"`` a range-axis CA-CFAR detector replaces the relative threshold.
    """
    if not threshold_db >= 0 or not math.isfinite(threshold_db):
        raise ValidationError(f"must be a finite, non-negative dB value, got {threshold_db!r}", "threshold_db")
    mag = grid.magnitude()
    peak = mag.max(initial=0.0)
    if peak == 0.0:
        return RadarPointCloud.empty()
    if mode == "threshold":
        keep = mag >= peak * 10.0 ** (-threshold_db / 20.0)
    elif mode == "cfar":
        keep = _cfar_mask(mag, cfar_train, cfar_guard, cfar_pfa)
    else:
        raise ValidationError("must be 'threshold' or 'cfar'", "mode")
    index = np.nonzero(keep)
    rng, az, el = grid.bin_centers(index)
    xyz = spherical_to_cartesian(rng, np.radians(az), np.radians(el)).reshape(-1, 3)
    return RadarPointCloud(xyz, mag[index])


@dataclass
class SimulationStats:
    rays: int = 0
    returns: int = 0
    binned: int = 0
    dropped_out_of_fov: int = 0
    dropped_out_of_range: int = 0
    points: int = 0
    wall_clock_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "extra"}
        d.update(self.extra)
        return d


@dataclass(frozen=True, eq=False)
class SimulationResult:
    cloud: RadarPointCloud
    grid: RangeAzElGrid
    returns: RadarReturns
    stats: SimulationStats


def simulate_frame(mesh: LabeledMesh, config: RadarConfig, threshold_db: float = DEFAULT_THRESHOLD_DB,
                   seed: int = 0, threads: int | None = None, bvh: Bvh | None = None, jitter: bool = True,
                   material_table=None, mode: str = "threshold") -> SimulationResult:
    """trace -> bin -> extract, keeping the intermediates."""
    t0 = time.perf_counter()
    tstats = TraceStats()
    if len(mesh) and bvh is None:
        bvh = build_bvh(mesh)
    returns = trace_frame(mesh, bvh, config, seed=seed, jitter=jitter, threads=threads,
                          material_table=material_table, stats=tstats)
    grid = bin_returns(returns, config)
    cloud = extract_points(grid, config, threshold_db, mode=mode)
    stats = SimulationStats(tstats.rays, len(returns), grid.n_binned, grid.dropped_out_of_fov,
                            grid.dropped_out_of_range, len(cloud), time.perf_counter() - t0)
    return SimulationResult(cloud, grid, returns, stats)


def simulate(mesh: LabeledMesh, config: RadarConfig, threshold_db: float = DEFAULT_THRESHOLD_DB,
             seed: int = 0, threads: int | None = None, **kwargs) -> RadarPointCloud:
    return simulate_frame(mesh, config, threshold_db, seed=seed, threads=threads, **kwargs).cloud


def save_grid(grid: RangeAzElGrid, path) -> Path:
    """Raw complex64 bins (C order) at ``path`` plus a JSON header at ``path + '.json'``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid.data.astype(np.complex64).tofile(path)
    header = {
        "n_range": grid.shape[0], "n_az": grid.shape[1], "n_el": grid.shape[2],
        "dtype": "complex64", "order": "C",
        "resolutions": {
            "range_m": grid.range_resolution,
            "azimuth_deg": grid.azimuth_resolution,
            "elevation_deg": grid.elevation_resolution,
        },
        "azimuth_start_deg": grid.azimuth_start,
        "elevation_start_deg": grid.elevation_start,
        "max_range_m": grid.max_range,
    }
    header_path = path.with_name(path.name + ".json")
    header_path.write_text(json.dumps(header, indent=2))
    return header_path


def load_grid(path) -> RangeAzElGrid:
    path = Path(path)
    header = json.loads(path.with_name(path.name + ".json").read_text())
    shape = (header["n_range"], header["n_az"], header["n_el"])
    data = np.fromfile(path, dtype=np.complex64).reshape(shape).astype(np.complex128)
    res = header["resolutions"]
    return RangeAzElGrid(data, res["range_m"], header["azimuth_start_deg"], res["azimuth_deg"],
                         header["elevation_start_deg"], res["elevation_deg"], max_range=header.get("max_range_m"))
