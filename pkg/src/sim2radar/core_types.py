"""
Shared domain types and the sensor-frame coordinate convention.

Sensor frame: x forward (boresight), y left, z up, sensor at the origin.

    azimuth   = atan2(y, x)
    elevation = atan2(z, sqrt(x^2 + y^2))
    range     = sqrt(x^2 + y^2 + z^2)
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

SPEED_OF_LIGHT = 299_792_458.0


class Sim2RadarError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(Sim2RadarError, ValueError):
    """Input violates a documented invariant. ``field`` names the offending value."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class ParseError(Sim2RadarError, ValueError):
    """A file could not be parsed. ``line`` is 1-based when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)
        self.message = message
        self.path = path
        self.line = line


class MaterialClass(enum.Enum):
    METAL = "metal"
    GLASS = "glass"
    WOOD = "wood"
    PLASTERBOARD = "plasterboard"
    CERAMIC_TILE = "ceramic_tile"
    CONCRETE = "concrete"
    FABRIC = "fabric"
    PLASTIC = "plastic"
    UNKNOWN = "unknown"

    @property
    def ordinal(self) -> int:
        return _MATERIAL_ORDER.index(self)

    @classmethod
    def parse(cls, text) -> "MaterialClass":
        if isinstance(text, MaterialClass):
            return text
        if not isinstance(text, str):
            raise ValidationError(f"expected a material name, got {text!r}", "material")
        key = text.strip().lower().replace(" ", "_")
        try:
            return cls(key)
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ValidationError(f"unknown material {text!r} (expected one of {names})", "material") from None

    @classmethod
    def from_ordinal(cls, index: int) -> "MaterialClass":
        return _MATERIAL_ORDER[index]


_MATERIAL_ORDER = tuple(MaterialClass)
N_MATERIALS = len(_MATERIAL_ORDER)


@dataclass(frozen=True)
class SensorPose:
    """Rigid transform from the sensor frame to the scene frame."""

    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation_rpy_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("translation", "rotation_rpy_deg"):
            value = getattr(self, name)
            try:
                value = tuple(float(v) for v in value)
            except (TypeError, ValueError):
                raise ValidationError("expected three numbers", f"sensor_pose.{name}") from None
            if len(value) != 3 or not all(math.isfinite(v) for v in value):
                raise ValidationError("expected three finite numbers", f"sensor_pose.{name}")
            object.__setattr__(self, name, value)

    @property
    def rotation_matrix(self) -> np.ndarray:
        # extrinsic x-y-z: R = Rz(yaw) @ Ry(pitch) @ Rx(roll)
        return Rotation.from_euler("xyz", self.rotation_rpy_deg, degrees=True).as_matrix()

    def sensor_to_scene(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation_matrix.T + np.asarray(self.translation)

    def scene_to_sensor(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - np.asarray(self.translation)) @ self.rotation_matrix


def _ceil_ratio(span: float, step: float) -> int:
    # round first so that e.g. 10.0 / 0.1 does not become 101 bins
    return max(1, math.ceil(round(span / step, 9)))


@dataclass(frozen=True)
class RadarConfig:
    """Simulated instrument. Angles in degrees, distances in meters, frequencies in Hz."""

    max_range: float
    azimuth_fov: float
    elevation_fov: float
    elevation_resolution: float
    carrier_frequency: float = 77e9
    range_resolution: float = 0.038
    azimuth_resolution: float = 1.18
    bandwidth: float | None = None
    max_bounces: int = 2
    rays_per_angular_bin: int = 4
    sensor_pose: SensorPose = field(default_factory=SensorPose)
    backscatter_exponent: float = 2.0
    polarization: str = "average"
    reference_range: float = 1.0

    def __post_init__(self):
        floats = (
            "max_range", "azimuth_fov", "elevation_fov", "elevation_resolution",
            "carrier_frequency", "range_resolution", "azimuth_resolution",
            "backscatter_exponent", "reference_range",
        )
        for name in floats:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float, np.floating, np.integer)):
                raise ValidationError(f"expected a number, got {value!r}", name)
            value = float(value)
            if not math.isfinite(value):
                raise ValidationError("must be finite", name)
            object.__setattr__(self, name, value)
        for name in ("max_bounces", "rays_per_angular_bin"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ValidationError(f"expected an integer, got {value!r}", name)
            object.__setattr__(self, name, int(value))

        for name in ("range_resolution", "azimuth_resolution", "elevation_resolution",
                     "carrier_frequency", "reference_range"):
            if getattr(self, name) <= 0:
                raise ValidationError("must be > 0", name)
        if self.max_range <= self.range_resolution:
            raise ValidationError("must exceed range_resolution", "max_range")
        for name in ("azimuth_fov", "elevation_fov"):
            if not 0 < getattr(self, name) <= 360:
                raise ValidationError("must be in (0, 360]", name)
        if self.max_bounces < 1:
            raise ValidationError("must be >= 1", "max_bounces")
        if self.rays_per_angular_bin < 1:
            raise ValidationError("must be >= 1", "rays_per_angular_bin")
        if self.backscatter_exponent < 0:
            raise ValidationError("must be >= 0", "backscatter_exponent")
        if self.polarization not in ("average", "te", "tm"):
            raise ValidationError("must be one of average, te, tm", "polarization")
        if self.bandwidth is None:
            object.__setattr__(self, "bandwidth", SPEED_OF_LIGHT / (2.0 * self.range_resolution))
        else:
            bw = self.bandwidth
            if isinstance(bw, bool) or not isinstance(bw, (int, float)) or not math.isfinite(bw) or bw <= 0:
                raise ValidationError("must be a positive number", "bandwidth")
            object.__setattr__(self, "bandwidth", float(bw))
        if not isinstance(self.sensor_pose, SensorPose):
            raise ValidationError("expected a SensorPose", "sensor_pose")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def n_range(self) -> int:
        return _ceil_ratio(self.max_range, self.range_resolution)

    @property
    def n_azimuth(self) -> int:
        return _ceil_ratio(self.azimuth_fov, self.azimuth_resolution)

    @property
    def n_elevation(self) -> int:
        return _ceil_ratio(self.elevation_fov, self.elevation_resolution)

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.n_range, self.n_azimuth, self.n_elevation

    @property
    def azimuth_start(self) -> float:
        """Lower edge of the first azimuth cell, degrees. Cells are centred on boresight."""
        return -0.5 * self.n_azimuth * self.azimuth_resolution

    @property
    def elevation_start(self) -> float:
        return -0.5 * self.n_elevation * self.elevation_resolution

    def azimuth_centers(self) -> np.ndarray:
        return self.azimuth_start + (np.arange(self.n_azimuth) + 0.5) * self.azimuth_resolution

    def elevation_centers(self) -> np.ndarray:
        return self.elevation_start + (np.arange(self.n_elevation) + 0.5) * self.elevation_resolution

    @property
    def polarization_mode(self) -> int:
        return {"average": 0, "te": 1, "tm": 2}[self.polarization]


@dataclass(frozen=True, eq=False)
class LabeledMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    triangle_material: np.ndarray  # int8 ordinals into MaterialClass

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        materials = self.triangle_material
        if len(materials) and not isinstance(materials, np.ndarray):
            materials = [MaterialClass.parse(m).ordinal if not isinstance(m, (int, np.integer)) else m
                         for m in materials]
        materials = np.ascontiguousarray(materials, dtype=np.int8).reshape(-1)

        if not np.all(np.isfinite(vertices)):
            raise ValidationError("vertices must be finite", "vertices")
        if len(materials) != len(triangles):
            raise ValidationError(
                f"{len(materials)} material entries for {len(triangles)} triangles", "triangle_material"
            )
        if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise ValidationError("vertex index out of range", "triangles")
        if len(materials) and (materials.min() < 0 or materials.max() >= N_MATERIALS):
            raise ValidationError("material ordinal out of range", "triangle_material")
        areas = triangle_areas(vertices, triangles)
        if np.any(areas <= 1e-12):
            bad = int(np.argmax(areas <= 1e-12))
            raise ValidationError(f"triangle {bad} is degenerate (area {areas[bad]:.3g} m^2)", "triangles")
        for arr in (vertices, triangles, materials):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)
        object.__setattr__(self, "triangle_material", materials)

    @classmethod
    def empty(cls) -> "LabeledMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int8))

    @classmethod
    def concatenate(cls, meshes) -> "LabeledMesh":
        verts, tris, mats, offset = [], [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + offset)
            mats.append(m.triangle_material)
            offset += len(m.vertices)
        if not verts:
            return cls.empty()
        return cls(np.concatenate(verts), np.concatenate(tris), np.concatenate(mats))

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def materials(self) -> list[MaterialClass]:
        return [MaterialClass.from_ordinal(int(i)) for i in self.triangle_material]

    def area(self) -> float:
        return float(triangle_areas(self.vertices, self.triangles).sum())

    def transformed(self, rotation: np.ndarray, translation=(0.0, 0.0, 0.0)) -> "LabeledMesh":
        verts = self.vertices @ np.asarray(rotation, dtype=float).T + np.asarray(translation, dtype=float)
        return LabeledMesh(verts, self.triangles, self.triangle_material)

    def with_material(self, material: MaterialClass, mask=None) -> "LabeledMesh":
        mats = self.triangle_material.copy()
        if mask is None:
            mats[:] = material.ordinal
        else:
            mats[np.asarray(mask)] = material.ordinal
        return LabeledMesh(self.vertices, self.triangles, mats)


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    if len(triangles) == 0:
        return np.zeros(0)
    v0, v1, v2 = (vertices[triangles[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)


@dataclass(frozen=True, eq=False)
class RadarPointCloud:
    """Points (x, y, z) in the sensor frame with linear, non-negative intensity."""

    xyz: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        xyz = np.ascontiguousarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        intensity = np.ascontiguousarray(self.intensity, dtype=np.float64).reshape(-1)
        if len(xyz) != len(intensity):
            raise ValidationError(f"{len(xyz)} points but {len(intensity)} intensities", "intensity")
        if np.any(intensity < 0) or not np.all(np.isfinite(intensity)):
            raise ValidationError("intensities must be finite and >= 0", "intensity")
        if not np.all(np.isfinite(xyz)):
            raise ValidationError("coordinates must be finite", "xyz")
        xyz.setflags(write=False)
        intensity.setflags(write=False)
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "intensity", intensity)

    @classmethod
    def from_points(cls, points) -> "RadarPointCloud":
        arr = np.asarray(points, dtype=np.float64).reshape(-1, 4)
        return cls(arr[:, :3], arr[:, 3])

    @classmethod
    def empty(cls) -> "RadarPointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0))

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.xyz, self.intensity])

    def __len__(self) -> int:
        return len(self.intensity)

    def with_intensity(self, intensity) -> "RadarPointCloud":
        return RadarPointCloud(self.xyz, intensity)

    def spherical(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return cartesian_to_spherical(self.xyz)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ValidationError(f"expected a finite number, got {value!r}", name)
            object.__setattr__(self, name, float(value))
        for name in ("width", "height"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value <= 0:
                raise ValidationError(f"expected a positive integer, got {value!r}", name)
            object.__setattr__(self, name, int(value))
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be > 0", "fx" if self.fx <= 0 else "fy")
        if not 0 <= self.cx < self.width:
            raise ValidationError("principal point outside image", "cx")
        if not 0 <= self.cy < self.height:
            raise ValidationError("principal point outside image", "cy")

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pinhole projection of camera-frame points to (u, v) pixel coordinates."""
        p = np.asarray(points, dtype=float)
        return np.column_stack([p[:, 0] * self.fx / p[:, 2] + self.cx, p[:, 1] * self.fy / p[:, 2] + self.cy])


def cartesian_to_spherical(xyz) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(range, azimuth, elevation) in meters and radians."""
    p = np.asarray(xyz, dtype=float).reshape(-1, 3)
    rho = np.hypot(p[:, 0], p[:, 1])
    rng = np.sqrt(rho**2 + p[:, 2] ** 2)
    return rng, np.arctan2(p[:, 1], p[:, 0]), np.arctan2(p[:, 2], rho)


def spherical_to_cartesian(rng, azimuth, elevation) -> np.ndarray:
    rng, azimuth, elevation = np.broadcast_arrays(
        np.asarray(rng, dtype=float), np.asarray(azimuth, dtype=float), np.asarray(elevation, dtype=float)
    )
    cos_el = np.cos(elevation)
    return np.stack(
        [rng * cos_el * np.cos(azimuth), rng * cos_el * np.sin(azimuth), rng * np.sin(elevation)], axis=-1
    )


# Camera optical frame (x right, y down, z forward) -> sensor frame (x forward, y left, z up).
CAMERA_TO_SENSOR = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def camera_to_sensor(points: np.ndarray) -> np.ndarray:
    return np.asarray(points, dtype=float) @ CAMERA_TO_SENSOR.T
