"""
Readers and writers for the on-disk formats.

Point clouds: ASCII PLY (x, y, z, intensity) or CSV with header ``x,y,z,intensity``.
Radar configs: JSON. Meshes: OBJ with one group per material plus a JSON sidecar.
Depth: PFM or raw float32 with a JSON ``{width, height}`` sidecar.
Segment masks: 16-bit PNG. Labels, intrinsics: JSON. Anchors: CSV ``u,v,depth``.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .core_types import (
    CameraIntrinsics,
    LabeledMesh,
    MaterialClass,
    ParseError,
    RadarConfig,
    RadarPointCloud,
    SensorPose,
    SPEED_OF_LIGHT,
    ValidationError,
)
from .reconstruction import DepthMap, SegmentLabeling, SparseDepthAnchors

CLOUD_FIELDS = ("x", "y", "z", "intensity")


def _fmt(values) -> str:
    # repr gives the shortest string that round-trips the float64 exactly
    return " ".join(repr(float(v)) for v in values)


# --------------------------------------------------------------------------- point clouds


def _cloud_format(path: Path, fmt: str | None) -> str:
    if fmt is None:
        fmt = path.suffix.lower().lstrip(".")
    fmt = fmt.lower()
    if fmt not in ("ply", "csv"):
        raise ValidationError(f"unsupported point-cloud format {fmt!r} (use ply or csv)", "format")
    return fmt


def save_point_cloud(cloud: RadarPointCloud, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = _cloud_format(path, fmt)
    rows = cloud.points.tolist()
    if fmt == "ply":
        header = [
            "ply", "format ascii 1.0", f"element vertex {len(rows)}",
            "property float x", "property float y", "property float z", "property float intensity",
            "end_header",
        ]
        body = [_fmt(r) for r in rows]
    else:
        header = [",".join(CLOUD_FIELDS)]
        body = [",".join(repr(float(v)) for v in r) for r in rows]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(header + body) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write point cloud to {path}: {exc.strerror or exc}") from exc


def _parse_float(token: str, path, line: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"non-numeric field {token!r}", path, line) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite field {token!r}", path, line)
    return value


def _load_ply(path: Path, lines: list[str]) -> RadarPointCloud:
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", path, 1)
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    end = None
    for i, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok:
            continue
        key = tok[0]
        if key == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError(f"only ASCII PLY is supported, got {raw.strip()!r}", path, i)
        elif key in ("comment", "obj_info"):
            continue
        elif key == "element":
            if len(tok) != 3:
                raise ParseError(f"malformed element line {raw.strip()!r}", path, i)
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tok[2])
                except ValueError:
                    raise ParseError(f"bad vertex count {tok[2]!r}", path, i) from None
                if n_vertex < 0:
                    raise ParseError("negative vertex count", path, i)
            elif n_vertex is None:
                raise ParseError("vertex element must come first", path, i)
        elif key == "property":
            if len(tok) < 3 or tok[1] == "list":
                raise ParseError(f"unsupported property {raw.strip()!r}", path, i)
            if in_vertex:
                props.append(tok[-1])
        elif key == "end_header":
            end = i
            break
        else:
            raise ParseError(f"unexpected header line {raw.strip()!r}", path, i)
    if end is None:
        raise ParseError("missing end_header", path, len(lines))
    if n_vertex is None:
        raise ParseError("no vertex element", path, end)
    missing = [f for f in CLOUD_FIELDS if f not in props]
    if missing:
        raise ParseError(f"missing vertex properties {missing}", path, end)
    cols = [props.index(f) for f in CLOUD_FIELDS]
    data = np.empty((n_vertex, 4))
    row = 0
    for i in range(end, len(lines)):
        tok = lines[i].split()
        if not tok:
            continue
        if row >= n_vertex:
            # extra elements (e.g. faces) after the vertices are ignored
            break
        if len(tok) != len(props):
            raise ParseError(f"expected {len(props)} fields, got {len(tok)}", path, i + 1)
        data[row] = [_parse_float(tok[c], path, i + 1) for c in cols]
        row += 1
    if row != n_vertex:
        raise ParseError(f"header declares {n_vertex} vertices, found {row}", path, len(lines))
    return _build_cloud(data, path)


def _load_csv(path: Path, lines: list[str]) -> RadarPointCloud:
    reader = csv.reader(lines)
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise ParseError("empty file (missing header)", path, 1) from None
    missing = [f for f in CLOUD_FIELDS if f not in header]
    if missing:
        raise ParseError(f"header lacks columns {missing}", path, 1)
    cols = [header.index(f) for f in CLOUD_FIELDS]
    rows = []
    for i, rec in enumerate(reader, start=2):
        if not rec or all(not f.strip() for f in rec):
            continue
        if len(rec) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(rec)}", path, i)
        rows.append([_parse_float(rec[c].strip(), path, i) for c in cols])
    return _build_cloud(np.array(rows, dtype=np.float64).reshape(-1, 4), path)


def _build_cloud(data: np.ndarray, path) -> RadarPointCloud:
    try:
        return RadarPointCloud(data[:, :3], data[:, 3])
    except ValidationError as exc:
        raise ParseError(str(exc), path) from None


def load_point_cloud(path, fmt: str | None = None) -> RadarPointCloud:
    path = Path(path)
    fmt = _cloud_format(path, fmt)
    try:
        text = path.read_text()
    except UnicodeDecodeError:
        raise ParseError("not a text file (binary PLY is unsupported)", path) from None
    lines = text.splitlines()
    return _load_ply(path, lines) if fmt == "ply" else _load_csv(path, lines)


# --------------------------------------------------------------------------- radar config

_REQUIRED_KEYS = ("max_range_m", "azimuth_fov_deg", "elevation_fov_deg", "elevation_resolution_deg")
_OPTIONAL_KEYS = (
    "carrier_frequency_hz", "bandwidth_hz", "range_resolution_m", "azimuth_resolution_deg",
    "max_bounces", "rays_per_angular_bin", "sensor_pose",
    "backscatter_exponent", "polarization", "reference_range_m",
)
_KEY_TO_FIELD = {
    "max_range_m": "max_range", "azimuth_fov_deg": "azimuth_fov", "elevation_fov_deg": "elevation_fov",
    "elevation_resolution_deg": "elevation_resolution", "carrier_frequency_hz": "carrier_frequency",
    "bandwidth_hz": "bandwidth", "range_resolution_m": "range_resolution",
    "azimuth_resolution_deg": "azimuth_resolution", "max_bounces": "max_bounces",
    "rays_per_angular_bin": "rays_per_angular_bin", "backscatter_exponent": "backscatter_exponent",
    "polarization": "polarization", "reference_range_m": "reference_range",
}


def _number(value, key: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"expected a number, got {value!r}", key)
    if not math.isfinite(value):
        raise ValidationError("must be finite", key)
    return value


def radar_config_from_dict(obj) -> RadarConfig:
    """Validate a decoded ``radar_config.json`` object."""
    if not isinstance(obj, dict):
        raise ValidationError("config must be a JSON object", "config")
    unknown = sorted(set(obj) - set(_REQUIRED_KEYS) - set(_OPTIONAL_KEYS))
    if unknown:
        raise ValidationError(f"unknown keys {unknown}", unknown[0])
    missing = [k for k in _REQUIRED_KEYS if k not in obj]
    if missing:
        raise ValidationError("required key missing", missing[0])

    kwargs = {}
    for key, fld in _KEY_TO_FIELD.items():
        if key not in obj:
            continue
        value = obj[key]
        if key in ("max_bounces", "rays_per_angular_bin"):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ValidationError(f"expected an integer, got {value!r}", key)
        elif key == "polarization":
            if not isinstance(value, str):
                raise ValidationError(f"expected a string, got {value!r}", key)
        else:
            _number(value, key)
        kwargs[fld] = value
    if "bandwidth" in kwargs and "range_resolution" not in kwargs and kwargs["bandwidth"] > 0:
        kwargs["range_resolution"] = SPEED_OF_LIGHT / (2.0 * kwargs["bandwidth"])

    if "sensor_pose" in obj:
        pose = obj["sensor_pose"]
        if not isinstance(pose, dict):
            raise ValidationError("expected an object", "sensor_pose")
        extra = sorted(set(pose) - {"translation_m", "rotation_rpy_deg"})
        if extra:
            raise ValidationError(f"unknown keys {extra}", "sensor_pose")
        parts = {}
        for key, fld in (("translation_m", "translation"), ("rotation_rpy_deg", "rotation_rpy_deg")):
            vec = pose.get(key, [0.0, 0.0, 0.0])
            if not isinstance(vec, list) or len(vec) != 3:
                raise ValidationError("expected a list of three numbers", f"sensor_pose.{key}")
            parts[fld] = tuple(_number(v, f"sensor_pose.{key}") for v in vec)
        kwargs["sensor_pose"] = SensorPose(**parts)
    try:
        return RadarConfig(**kwargs)
    except ValidationError as exc:
        # report JSON key names rather than dataclass field names
        inverse = {v: k for k, v in _KEY_TO_FIELD.items()}
        key = inverse.get(exc.field, exc.field)
        msg = str(exc).split(": ", 1)[-1]
        raise ValidationError(msg, key) from None


def radar_config_to_dict(config: RadarConfig) -> dict:
    return {
        "carrier_frequency_hz": config.carrier_frequency,
        "bandwidth_hz": config.bandwidth,
        "range_resolution_m": config.range_resolution,
        "max_range_m": config.max_range,
        "azimuth_fov_deg": config.azimuth_fov,
        "azimuth_resolution_deg": config.azimuth_resolution,
        "elevation_fov_deg": config.elevation_fov,
        "elevation_resolution_deg": config.elevation_resolution,
        "max_bounces": config.max_bounces,
        "rays_per_angular_bin": config.rays_per_angular_bin,
        "sensor_pose": {
            "translation_m": list(config.sensor_pose.translation),
            "rotation_rpy_deg": list(config.sensor_pose.rotation_rpy_deg),
        },
        "backscatter_exponent": config.backscatter_exponent,
        "polarization": config.polarization,
        "reference_range_m": config.reference_range,
    }


def parse_radar_config(data: bytes | str) -> RadarConfig:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"config is not UTF-8: {exc.reason}") from None
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    except RecursionError:
        raise ParseError("invalid JSON: nesting too deep") from None
    return radar_config_from_dict(obj)


def load_radar_config(path) -> RadarConfig:
    path = Path(path)
    try:
        return parse_radar_config(path.read_bytes())
    except ParseError as exc:
        raise ParseError(exc.message, path, exc.line) from None


def save_radar_config(config: RadarConfig, path) -> None:
    Path(path).write_text(json.dumps(radar_config_to_dict(config), indent=2) + "\n")


# --------------------------------------------------------------------------- meshes


def mesh_sidecar_path(obj_path) -> Path:
    obj_path = Path(obj_path)
    return obj_path.with_name(obj_path.stem + ".materials.json")


def save_mesh(mesh: LabeledMesh, path) -> Path:
    """OBJ with one ``g`` group per material, plus ``<stem>.materials.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles"]
    lines += [f"v {_fmt(v)}" for v in mesh.vertices.tolist()]
    groups = {}
    for ordinal in sorted(set(mesh.triangle_material.tolist())):
        mat = MaterialClass.from_ordinal(ordinal)
        name = f"mat_{mat.value}"
        groups[name] = mat.value
        lines.append(f"g {name}")
        faces = mesh.triangles[mesh.triangle_material == ordinal] + 1
        lines += [f"f {a} {b} {c}" for a, b, c in faces.tolist()]
    path.write_text("\n".join(lines) + "\n")
    sidecar = mesh_sidecar_path(path)
    sidecar.write_text(json.dumps({"groups": groups}, indent=2) + "\n")
    return sidecar


def load_mesh(path, sidecar=None) -> LabeledMesh:
    path = Path(path)
    sidecar = mesh_sidecar_path(path) if sidecar is None else Path(sidecar)
    if sidecar.exists():
        try:
            groups = json.loads(sidecar.read_text())["groups"]
            groups = {k: MaterialClass.parse(v) for k, v in groups.items()}
        except (json.JSONDecodeError, KeyError, TypeError, AttributeError, ValidationError) as exc:
            raise ParseError(f"bad material sidecar: {exc}", sidecar) from None
    else:
        groups = {}
    verts, faces, mats = [], [], []
    current = None
    for i, raw in enumerate(path.read_text().splitlines(), start=1):
        tok = raw.split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "v":
            if len(tok) < 4:
                raise ParseError("vertex needs three coordinates", path, i)
            verts.append([_parse_float(t, path, i) for t in tok[1:4]])
        elif tok[0] in ("g", "o", "usemtl"):
            name = tok[1] if len(tok) > 1 else ""
            if name in groups:
                current = groups[name]
            elif tok[0] == "g":
                try:
                    current = MaterialClass.parse(name.removeprefix("mat_"))
                except ValidationError:
                    raise ParseError(f"group {name!r} has no material mapping", path, i) from None
        elif tok[0] == "f":
            if current is None:
                raise ParseError("face before any material group", path, i)
            try:
                idx = [int(t.split("/")[0]) for t in tok[1:]]
            except ValueError:
                raise ParseError(f"bad face indices {raw.strip()!r}", path, i) from None
            idx = [j - 1 if j > 0 else len(verts) + j for j in idx]
            for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[k], idx[k + 1]])
                mats.append(current.ordinal)
    try:
        return LabeledMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3),
                           np.array(mats, dtype=np.int8))
    except ValidationError as exc:
        raise ParseError(str(exc), path) from None


# --------------------------------------------------------------------------- reconstruction inputs


def read_pfm(path) -> np.ndarray:
    """Single-channel PFM as a top-to-bottom float64 array."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"Pf":
            raise ParseError(f"expected single-channel PFM magic 'Pf', got {magic!r}", path, 1)
        dims = fh.readline().split()
        if len(dims) != 2:
            raise ParseError("bad dimensions line", path, 2)
        width, height = (int(d) for d in dims)
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != width * height:
        raise ParseError(f"expected {width * height} floats, found {data.size}", path)
    # PFM stores rows bottom-to-top
    return np.flipud(data.reshape(height, width)).astype(np.float64)


def write_pfm(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f4")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.flipud(values).tobytes())


def load_depth(path, sidecar=None) -> DepthMap:
    """PFM, or raw little-endian float32 with ``{width, height}`` in ``<path>.json``."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return DepthMap(read_pfm(path))
    sidecar = Path(sidecar) if sidecar else path.with_name(path.name + ".json")
    if not sidecar.exists():
        sidecar = path.with_suffix(".json")
    try:
        meta = json.loads(sidecar.read_text())
        width, height = int(meta["width"]), int(meta["height"])
    except FileNotFoundError:
        raise ParseError("raw depth needs a JSON sidecar with width and height", path) from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad depth sidecar: {exc}", sidecar) from None
    data = np.fromfile(path, dtype="<f4")
    if data.size != width * height:
        raise ParseError(f"expected {width * height} floats, found {data.size}", path)
    return DepthMap(data.reshape(height, width).astype(np.float64))


def save_depth_raw(path, values: np.ndarray) -> None:
    path = Path(path)
    values = np.asarray(values, dtype="<f4")
    values.tofile(path)
    path.with_name(path.name + ".json").write_text(json.dumps({"width": values.shape[1], "height": values.shape[0]}))


def load_segment_mask(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        arr = np.array(img)
    if arr.ndim != 2:
        raise ParseError(f"segment mask must be single-channel, got shape {arr.shape}", path)
    return arr.astype(np.int64)


def save_segment_mask(path, ids: np.ndarray) -> None:
    from PIL import Image

    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() > 65535:
        raise ValidationError("segment ids must fit in 16 bits", "segments")
    Image.fromarray(ids.astype(np.uint16)).save(path)


def load_labels(path) -> dict[int, MaterialClass]:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
        segments = obj["segments"]
        return {int(k): MaterialClass.parse(v) for k, v in segments.items()}
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise ParseError(f"expected {{\"segments\": {{\"<id>\": \"<material>\"}}}}: {exc}", path) from None
    except ValueError as exc:
        raise ParseError(str(exc), path) from None


def save_labels(path, labels: dict) -> None:
    Path(path).write_text(json.dumps(
        {"segments": {str(k): MaterialClass.parse(v).value for k, v in sorted(labels.items())}}, indent=2))


def load_segment_labeling(mask_path, labels_path) -> SegmentLabeling:
    return SegmentLabeling(load_segment_mask(mask_path), load_labels(labels_path))


def load_intrinsics(path) -> CameraIntrinsics:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
        keys = ("fx", "fy", "cx", "cy", "width", "height")
        return CameraIntrinsics(**{k: obj[k] for k in keys})
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"bad intrinsics file: {exc}", path) from None


def save_intrinsics(path, intr: CameraIntrinsics) -> None:
    Path(path).write_text(json.dumps({k: getattr(intr, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}))


def load_anchors(path) -> SparseDepthAnchors:
    path = Path(path)
    lines = path.read_text().splitlines()
    reader = csv.reader(lines)
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise ParseError("empty anchor file", path, 1) from None
    if header[:3] != ["u", "v", "depth"]:
        raise ParseError("header must be u,v,depth", path, 1)
    rows = []
    for i, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) < 3:
            raise ParseError("expected u,v,depth", path, i)
        rows.append([_parse_float(f.strip(), path, i) for f in rec[:3]])
    arr = np.array(rows, dtype=float).reshape(-1, 3)
    return SparseDepthAnchors(arr[:, 0], arr[:, 1], arr[:, 2])


def save_anchors(path, anchors: SparseDepthAnchors) -> None:
    rows = ["u,v,depth"] + [",".join(repr(float(x)) for x in r)
                            for r in np.column_stack([anchors.u, anchors.v, anchors.depth]).tolist()]
    Path(path).write_text("\n".join(rows) + "\n")
