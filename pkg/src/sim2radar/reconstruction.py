"""
Depth-map ingestion: metric alignment, back-projection, and grid meshing.

Upstream vision models are not run here; their outputs (a dense depth map,
a segment-id mask, and per-segment material labels) arrive as files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core_types import (
    CameraIntrinsics,
    LabeledMesh,
    MaterialClass,
    N_MATERIALS,
    Sim2RadarError,
    ValidationError,
    camera_to_sensor,
)

DEFAULT_DISCONTINUITY_RATIO = 1.15


class InsufficientDataError(Sim2RadarError, ValueError):
    pass


class DegenerateFitError(Sim2RadarError, ValueError):
    pass


class EmptyMeshError(Sim2RadarError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError(f"expected a 2-D depth array, got shape {values.shape}", "depth")
        ok = np.isfinite(values) & (values > 0)
        if self.valid is not None:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != values.shape:
                raise ValidationError("validity mask shape differs from depth", "valid")
            ok &= valid
        values = np.where(ok, values, 0.0)
        values.setflags(write=False)
        ok.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", ok)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def scaled(self, scale: float, shift: float = 0.0) -> "DepthMap":
        """Apply an affine depth correction; pixels that become non-positive turn invalid."""
        return DepthMap(self.values * scale + shift, self.valid)


@dataclass(frozen=True, eq=False)
class SparseDepthAnchors:
    """Metric depth samples at pixel (u = column, v = row)."""

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64).reshape(-1)
        v = np.asarray(self.v, dtype=np.float64).reshape(-1)
        d = np.asarray(self.depth, dtype=np.float64).reshape(-1)
        if not len(u) == len(v) == len(d):
            raise ValidationError("u, v and depth lengths differ", "anchors")
        if not np.all(np.isfinite(d) & (d > 0)):
            raise ValidationError("anchor depths must be finite and > 0", "anchors")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValidationError("anchor pixel coordinates must be finite", "anchors")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "depth", d)

    def __len__(self) -> int:
        return len(self.depth)


@dataclass(frozen=True, eq=False)
class SegmentLabeling:
    segment_ids: np.ndarray
    materials: dict

    def __post_init__(self):
        ids = np.asarray(self.segment_ids)
        if ids.ndim != 2:
            raise ValidationError(f"expected a 2-D segment mask, got shape {ids.shape}", "segments")
        if ids.dtype.kind not in "iu" or (ids.size and ids.min() < 0):
            raise ValidationError("segment ids must be non-negative integers", "segments")
        ids = ids.astype(np.int64)
        materials = {int(k): MaterialClass.parse(m) for k, m in self.materials.items()}
        present = set(np.unique(ids).tolist()) - {0}
        missing = sorted(present - set(materials))
        if missing:
            raise ValidationError(f"segment ids without a material label: {missing[:10]}", "labels")
        ids.setflags(write=False)
        object.__setattr__(self, "segment_ids", ids)
        object.__setattr__(self, "materials", materials)

    @classmethod
    def uniform(cls, height: int, width: int, material: MaterialClass) -> "SegmentLabeling":
        return cls(np.ones((height, width), dtype=np.int64), {1: material})

    @property
    def shape(self) -> tuple[int, int]:
        return self.segment_ids.shape

    def material_ordinals(self) -> np.ndarray:
        """Per-pixel material ordinal, -1 where unlabeled."""
        lut = np.full(int(self.segment_ids.max(initial=0)) + 1, -1, dtype=np.int16)
        for seg, mat in self.materials.items():
            if seg < len(lut) and seg != 0:
                lut[seg] = mat.ordinal
        return lut[self.segment_ids]


@dataclass(frozen=True, eq=False)
class LabeledPoints:
    """Back-projected points (camera frame, row-major pixel order)."""

    xyz: np.ndarray
    material: np.ndarray
    pixels: np.ndarray  # (u, v) integer pixel of each point

    def __len__(self) -> int:
        return len(self.material)


def align_depth_scale_shift(mono: DepthMap, anchors: SparseDepthAnchors) -> tuple[float, float]:
    """Least-squares scale and shift mapping monocular depth onto metric anchors.

    Minimizes sum_i (s * mono(p_i) + t - anchor_i)^2 in closed form. Anchors are
    snapped to the nearest pixel; those off-image or on invalid pixels are ignored.
    Sums are correctly rounded (``math.fsum``) so the result does not depend on
    anchor order.
    """
    cols = np.rint(anchors.u).astype(np.int64)
    rows = np.rint(anchors.v).astype(np.int64)
    inside = (cols >= 0) & (cols < mono.width) & (rows >= 0) & (rows < mono.height)
    usable = np.zeros_like(inside)
    usable[inside] = mono.valid[rows[inside], cols[inside]]
    if usable.sum() < 2:
        raise InsufficientDataError(f"need at least 2 anchors on valid pixels, got {int(usable.sum())}")

    x = mono.values[rows[usable], cols[usable]].tolist()
    y = anchors.depth[usable].tolist()
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    dx = [xi - mx for xi in x]
    sxx = math.fsum(d * d for d in dx)
    if sxx == 0.0:
        raise DegenerateFitError("monocular depths at the anchor pixels are all equal")
    sxy = math.fsum(d * (yi - my) for d, yi in zip(dx, y))
    s = sxy / sxx
    return s, my - s * mx


def _check_dims(depth: DepthMap, intrinsics: CameraIntrinsics, labeling: SegmentLabeling | None):
    if (intrinsics.height, intrinsics.width) != depth.values.shape:
        raise ValidationError(
            f"depth is {depth.width}x{depth.height} but intrinsics are {intrinsics.width}x{intrinsics.height}",
            "intrinsics",
        )
    if labeling is not None and labeling.shape != depth.values.shape:
        raise ValidationError(
            f"segment mask shape {labeling.shape} differs from depth shape {depth.values.shape}", "segments"
        )


def _pixel_rays(intrinsics: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    u = (np.arange(intrinsics.width) - intrinsics.cx) / intrinsics.fx
    v = (np.arange(intrinsics.height) - intrinsics.cy) / intrinsics.fy
    return u, v


def backproject(depth: DepthMap, intrinsics: CameraIntrinsics, labeling: SegmentLabeling) -> LabeledPoints:
    """Lift every valid, labeled pixel to a camera-frame 3D point carrying its material."""
    _check_dims(depth, intrinsics, labeling)
    mats = labeling.material_ordinals()
    keep = depth.valid & (mats >= 0)
    rows, cols = np.nonzero(keep)  # row-major order
    d = depth.values[rows, cols]
    xyz = np.column_stack([(cols - intrinsics.cx) * d / intrinsics.fx, (rows - intrinsics.cy) * d / intrinsics.fy, d])
    return LabeledPoints(xyz, mats[rows, cols].astype(np.int8), np.column_stack([cols, rows]))


def _majority(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    counts = np.zeros((len(a), N_MATERIALS), dtype=np.int8)
    idx = np.arange(len(a))
    for m in (a, b, c):
        np.add.at(counts, (idx, m), 1)
    return np.argmax(counts, axis=1).astype(np.int8)  # argmax takes the lowest ordinal on ties


def mesh_from_depth(
    depth: DepthMap,
    intrinsics: CameraIntrinsics,
    labeling: SegmentLabeling,
    discontinuity_ratio: float = DEFAULT_DISCONTINUITY_RATIO,
    to_sensor_frame: bool = True,
) -> LabeledMesh:
    """Triangulate the pixel grid into a material-labeled mesh.

    Each 2x2 pixel block contributes two triangles when all four pixels are
    usable (valid depth and a labeled segment), one when exactly three are, and
    none otherwise. Triangles whose max/min vertex depth exceeds
    ``discontinuity_ratio`` straddle an occlusion edge and are dropped.
    """
    if discontinuity_ratio < 1.0:
        raise ValidationError("must be >= 1", "discontinuity_ratio")
    _check_dims(depth, intrinsics, labeling)
    mats = labeling.material_ordinals()
    usable = depth.valid & (mats >= 0)
    h, w = usable.shape
    if h < 2 or w < 2:
        raise EmptyMeshError("depth map too small to triangulate")

    pix = np.arange(h * w).reshape(h, w)
    a, b = pix[:-1, :-1].ravel(), pix[:-1, 1:].ravel()  # top-left, top-right
    c, d = pix[1:, :-1].ravel(), pix[1:, 1:].ravel()  # bottom-left, bottom-right
    ok = usable.ravel()
    oa, ob, oc, od = ok[a], ok[b], ok[c], ok[d]

    # Full blocks split along the b-c diagonal; three-pixel blocks keep the one triangle they can form.
    cand = [
        (a, c, b, oa & ob & oc & od),
        (b, c, d, oa & ob & oc & od),
        (b, c, d, ~oa & ob & oc & od),
        (a, c, d, oa & ~ob & oc & od),
        (a, d, b, oa & ob & ~oc & od),
        (a, c, b, oa & ob & oc & ~od),
    ]
    # Keep each block's triangles adjacent in the output: order by block, then slot.
    tri_parts = []
    for slot, (i, j, k, sel) in enumerate(cand):
        blk = np.nonzero(sel)[0]
        tri_parts.append((blk, slot, np.column_stack([i[blk], j[blk], k[blk]])))
    blocks = np.concatenate([p[0] for p in tri_parts])
    slots = np.concatenate([np.full(len(p[0]), p[1]) for p in tri_parts])
    tris = np.concatenate([p[2] for p in tri_parts]).reshape(-1, 3)
    tris = tris[np.lexsort((slots, blocks))]

    dflat = depth.values.ravel()
    td = dflat[tris]
    tris = tris[td.max(axis=1) <= discontinuity_ratio * td.min(axis=1)]
    if len(tris) == 0:
        raise EmptyMeshError("no three mutually adjacent usable pixels survive triangulation")

    used, inverse = np.unique(tris.ravel(), return_inverse=True)
    rows, cols = np.divmod(used, w)
    du = dflat[used]
    verts = np.column_stack([(cols - intrinsics.cx) * du / intrinsics.fx, (rows - intrinsics.cy) * du / intrinsics.fy, du])
    if to_sensor_frame:
        verts = camera_to_sensor(verts)
    faces = inverse.reshape(-1, 3)

    mflat = mats.ravel()
    tri_mat = _majority(mflat[tris[:, 0]], mflat[tris[:, 1]], mflat[tris[:, 2]])

    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    keep = area > 1e-12
    if not keep.any():
        raise EmptyMeshError("all triangles are degenerate")
    faces, tri_mat = faces[keep], tri_mat[keep]
    if not keep.all():
        used2, inv2 = np.unique(faces.ravel(), return_inverse=True)
        verts, faces = verts[used2], inv2.reshape(-1, 3)
    return LabeledMesh(verts, faces, tri_mat)
