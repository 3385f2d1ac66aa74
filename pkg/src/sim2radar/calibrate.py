"""
Log-space intensity histogram matching and sim-vs-real gap metrics.

Matching maps each simulated intensity through its empirical CDF position
onto the reference quantile function, both in natural-log space. CDF
positions use mid-ranks, and the reference quantile function interpolates
between the mid-points of its ECDF steps, so a reference fitted on the input
itself reproduces the input exactly.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .core_types import RadarPointCloud, Sim2RadarError, ValidationError


class ZeroIntensityWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class IntensityHistogramModel:
    """Empirical distribution of log intensity: strictly increasing support
    points and the ECDF step mid-point of each."""

    log_values: np.ndarray
    cdf_midpoints: np.ndarray
    n_samples: int
    source: str = ""

    def __post_init__(self):
        v = np.asarray(self.log_values, dtype=np.float64)
        p = np.asarray(self.cdf_midpoints, dtype=np.float64)
        if len(v) == 0:
            raise ValidationError("model needs at least one value", "log_values")
        if len(v) != len(p):
            raise ValidationError("values and CDF positions differ in length", "cdf_midpoints")
        if np.any(np.diff(v) <= 0) or np.any(np.diff(p) <= 0):
            raise ValidationError("quantile values must be strictly increasing", "log_values")
        object.__setattr__(self, "log_values", v)
        object.__setattr__(self, "cdf_midpoints", p)

    def log_quantile(self, p) -> np.ndarray:
        return np.interp(p, self.cdf_midpoints, self.log_values)

    def quantile(self, p) -> np.ndarray:
        """Intensity at CDF position ``p``."""
        return np.exp(self.log_quantile(p))

    def median(self) -> float:
        return float(self.quantile(0.5))

    def to_json(self) -> dict:
        return {
            "log_base": "e",
            "log_values": self.log_values.tolist(),
            "cdf_midpoints": self.cdf_midpoints.tolist(),
            "n_samples": self.n_samples,
            "source": self.source,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "IntensityHistogramModel":
        return cls(np.array(obj["log_values"]), np.array(obj["cdf_midpoints"]), int(obj["n_samples"]),
                   obj.get("source", ""))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "IntensityHistogramModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def _positive_log(intensity: np.ndarray, what: str) -> np.ndarray:
    intensity = np.asarray(intensity, dtype=np.float64)
    zeros = int(np.count_nonzero(intensity <= 0))
    if zeros:
        warnings.warn(f"{what}: excluded {zeros} zero-intensity points", ZeroIntensityWarning, stacklevel=3)
    return np.log(intensity[intensity > 0])


def fit_reference(real_clouds, source: str = "") -> IntensityHistogramModel:
    """Empirical log-intensity distribution of one or more reference clouds."""
    if isinstance(real_clouds, RadarPointCloud):
        real_clouds = [real_clouds]
    all_i = np.concatenate([c.intensity for c in real_clouds]) if real_clouds else np.zeros(0)
    logs = _positive_log(all_i, "fit_reference")
    if len(logs) == 0:
        raise Sim2RadarError("reference clouds have no positive intensities")
    values, counts = np.unique(logs, return_counts=True)
    n = len(logs)
    mids = (np.cumsum(counts) - 0.5 * counts) / n
    return IntensityHistogramModel(values, mids, n, source)


def _midrank_positions(x: np.ndarray) -> np.ndarray:
    return (stats.rankdata(x, method="average") - 0.5) / len(x)


def apply_histogram_match(sim: RadarPointCloud, model: IntensityHistogramModel) -> RadarPointCloud:
    """Replace intensities by the reference quantile at each point's CDF position.

    Geometry is passed through untouched. Zero intensities map to the
    reference minimum.
    """
    if len(sim) == 0:
        return sim
    inten = sim.intensity
    out = np.full(len(inten), math.exp(model.log_values[0]))
    pos = inten > 0
    if pos.any():
        p = _midrank_positions(np.log(inten[pos]))
        out[pos] = model.quantile(p)
    return RadarPointCloud(sim.xyz, out)


@dataclass(frozen=True)
class GapReport:
    sim_point_count: int
    real_point_count: int
    density_ratio: float | None
    sim_azimuth_coverage_deg: float
    real_azimuth_coverage_deg: float
    nn_median_sim_to_real_m: float | None
    nn_median_real_to_sim_m: float | None
    log_intensity_ks: float | None

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    def summary(self) -> str:
        ratio = "n/a" if self.density_ratio is None else f"{100 * self.density_ratio:.1f}%"
        return (f"density ratio {ratio} ({self.sim_point_count} sim / {self.real_point_count} real points); "
                f"azimuth coverage {self.sim_azimuth_coverage_deg:.1f} deg sim, "
                f"{self.real_azimuth_coverage_deg:.1f} deg real")


def azimuth_coverage_deg(cloud: RadarPointCloud, lo: float = 1.0, hi: float = 99.0) -> float:
    """Azimuth span between the ``lo`` and ``hi`` percentiles, degrees."""
    if len(cloud) == 0:
        return 0.0
    az = np.degrees(np.arctan2(cloud.xyz[:, 1], cloud.xyz[:, 0]))
    a, b = np.percentile(az, [lo, hi])
    return float(b - a)


def nearest_neighbor_distances(src: np.ndarray, dst: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Exact distance from every ``src`` point to its nearest ``dst`` point."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    out = np.empty(len(src))
    dst_sq = np.einsum("ij,ij->i", dst, dst)
    for s in range(0, len(src), chunk):
        a = src[s: s + chunk]
        d2 = np.einsum("ij,ij->i", a, a)[:, None] - 2.0 * a @ dst.T + dst_sq[None, :]
        j = np.argmin(d2, axis=1)
        # recompute the winner directly to avoid cancellation in the expanded form
        out[s: s + chunk] = np.linalg.norm(a - dst[j], axis=1)
    return out


def compare(sim: RadarPointCloud, real: RadarPointCloud) -> GapReport:
    n_sim, n_real = len(sim), len(real)
    ratio = n_sim / n_real if n_real else None
    nn_sr = nn_rs = ks = None
    if n_sim and n_real:
        nn_sr = float(np.median(nearest_neighbor_distances(sim.xyz, real.xyz)))
        nn_rs = float(np.median(nearest_neighbor_distances(real.xyz, sim.xyz)))
        ls = np.log(sim.intensity[sim.intensity > 0])
        lr = np.log(real.intensity[real.intensity > 0])
        if len(ls) and len(lr):
            ks = float(stats.ks_2samp(ls, lr).statistic)
    return GapReport(n_sim, n_real, ratio, azimuth_coverage_deg(sim), azimuth_coverage_deg(real), nn_sr, nn_rs, ks)
