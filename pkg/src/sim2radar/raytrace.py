"""
BVH ray casting with specular multi-bounce and per-hit radar returns.

Every hit along a traced path emits one return along the ray's launch
direction. Its amplitude is the product of the reflectances of all surfaces
hit so far (including this one), a backscatter lobe cos^p(theta) at the
current hit, and a (R0/R)^2 spreading term on the one-way cumulative path.
"""

from __future__ import annotations

import json
import math
import warnings
from contextlib import contextmanager
from dataclasses import dataclass

import os

import numba
import numpy as np

from .core_types import LabeledMesh, MaterialClass, RadarConfig, ValidationError
from .em_materials import permittivity_table, reflectance_kernel

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the bundled TBB is too old on many systems; avoid the noisy probe
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

LEAF_SIZE = 4
EPSILON_T = 1e-4
_STACK_DEPTH = 128
_NO_HIT = -1


class EmptySceneWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class Bvh:
    """Flattened axis-aligned box tree. Inner nodes have ``left >= 0``; leaves
    own ``prim_order[start:start + count]``."""

    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    prim_order: np.ndarray
    # triangle data permuted into leaf order
    v0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    def leaves(self) -> np.ndarray:
        return np.nonzero(self.left < 0)[0]

    def depth(self) -> int:
        depth, stack = 0, [(0, 1)]
        while stack:
            node, d = stack.pop()
            depth = max(depth, d)
            if self.left[node] >= 0:
                stack += [(self.left[node], d + 1), (self.right[node], d + 1)]
        return depth


@dataclass(frozen=True)
class Hit:
    triangle: int
    distance: float
    normal: np.ndarray
    barycentric: tuple[float, float]


@dataclass(frozen=True)
class RadarReturn:
    two_way_path_length: float
    arrival_azimuth: float
    arrival_elevation: float
    amplitude: complex
    bounce_count: int
    hit_material: MaterialClass
    hit_triangle: int = -1


@dataclass(frozen=True, eq=False)
class RadarReturns:
    """Column-oriented batch of :class:`RadarReturn` records."""

    two_way_path_length: np.ndarray
    azimuth: np.ndarray
    elevation: np.ndarray
    amplitude: np.ndarray
    bounce_count: np.ndarray
    hit_material: np.ndarray
    hit_triangle: np.ndarray

    def __len__(self) -> int:
        return len(self.two_way_path_length)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i) -> RadarReturn:
        return RadarReturn(
            float(self.two_way_path_length[i]), float(self.azimuth[i]), float(self.elevation[i]),
            complex(self.amplitude[i]), int(self.bounce_count[i]),
            MaterialClass.from_ordinal(int(self.hit_material[i])), int(self.hit_triangle[i]),
        )

    @classmethod
    def empty(cls) -> "RadarReturns":
        return cls.from_records([])

    @classmethod
    def from_records(cls, records) -> "RadarReturns":
        records = list(records)
        return cls(
            np.array([r.two_way_path_length for r in records], dtype=np.float64),
            np.array([r.arrival_azimuth for r in records], dtype=np.float64),
            np.array([r.arrival_elevation for r in records], dtype=np.float64),
            np.array([r.amplitude for r in records], dtype=np.complex128),
            np.array([r.bounce_count for r in records], dtype=np.int8),
            np.array([MaterialClass.parse(r.hit_material).ordinal for r in records], dtype=np.int8),
            np.array([r.hit_triangle for r in records], dtype=np.int64),
        )

    @classmethod
    def concatenate(cls, batches) -> "RadarReturns":
        batches = list(batches)
        if not batches:
            return cls.empty()
        return cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in cls.__dataclass_fields__))

    def select(self, mask) -> "RadarReturns":
        return RadarReturns(*(getattr(self, f)[mask] for f in self.__dataclass_fields__))


# --------------------------------------------------------------------------- BVH build


def build_bvh(mesh: LabeledMesh, leaf_size: int = LEAF_SIZE) -> Bvh:
    """Median-split BVH: split along the widest centroid axis at the median centroid."""
    n = len(mesh.triangles)
    if n == 0:
        raise ValidationError("cannot build a BVH over an empty mesh", "mesh")
    tri = mesh.vertices[mesh.triangles]  # (n, 3, 3)
    tmin, tmax = tri.min(axis=1), tri.max(axis=1)
    centroid = tri.mean(axis=1)

    node_min, node_max, left, right, start, count = [], [], [], [], [], []
    order: list[np.ndarray] = []
    n_prims = 0
    stack = [(np.arange(n), -1, False)]
    while stack:
        idx, parent, is_right = stack.pop()
        node = len(left)
        if parent >= 0:
            (right if is_right else left)[parent] = node
        node_min.append(tmin[idx].min(axis=0))
        node_max.append(tmax[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        if len(idx) <= leaf_size:
            start.append(n_prims)
            count.append(len(idx))
            order.append(idx)
            n_prims += len(idx)
            continue
        start.append(0)
        count.append(0)
        c = centroid[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        half = len(idx) // 2
        part = np.argpartition(c[:, axis], half, kind="introselect")
        # right pushed first so the left subtree is laid out right after its parent
        stack.append((idx[part[half:]], node, True))
        stack.append((idx[part[:half]], node, False))

    prim_order = np.concatenate(order).astype(np.int64)
    v0 = np.ascontiguousarray(tri[prim_order, 0])
    return Bvh(
        np.array(node_min), np.array(node_max),
        np.array(left, dtype=np.int32), np.array(right, dtype=np.int32),
        np.array(start, dtype=np.int32), np.array(count, dtype=np.int32),
        prim_order, v0,
        np.ascontiguousarray(tri[prim_order, 1] - v0), np.ascontiguousarray(tri[prim_order, 2] - v0),
    )


# --------------------------------------------------------------------------- kernels

_jit = numba.njit(cache=True, error_model="numpy", fastmath=False, nogil=True)


@_jit
def _moller_trumbore(ox, oy, oz, dx, dy, dz, v0, e1, e2, k):
    """Distance and barycentrics of a ray/triangle hit; t = inf on miss."""
    e1x, e1y, e1z = e1[k, 0], e1[k, 1], e1[k, 2]
    e2x, e2y, e2z = e2[k, 0], e2[k, 1], e2[k, 2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if det == 0.0:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    tx, ty, tz = ox - v0[k, 0], oy - v0[k, 1], oz - v0[k, 2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf, 0.0, 0.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return t, u, v


@_jit
def _safe_inv(d):
    if abs(d) < 1e-15:
        d = 1e-15 if d >= 0.0 else -1e-15
    return 1.0 / d


@_jit
def _box_entry(node_min, node_max, node, ox, oy, oz, ix, iy, iz, tmax):
    t0 = (node_min[node, 0] - ox) * ix
    t1 = (node_max[node, 0] - ox) * ix
    lo, hi = min(t0, t1), max(t0, t1)
    t0 = (node_min[node, 1] - oy) * iy
    t1 = (node_max[node, 1] - oy) * iy
    lo, hi = max(lo, min(t0, t1)), min(hi, max(t0, t1))
    t0 = (node_min[node, 2] - oz) * iz
    t1 = (node_max[node, 2] - oz) * iz
    lo, hi = max(lo, min(t0, t1)), min(hi, max(t0, t1))
    if hi < max(lo, 0.0) or lo > tmax:
        return np.inf
    return lo


@_jit
def _closest_hit(ox, oy, oz, dx, dy, dz, tmin, node_min, node_max, left, right, start, count,
                 v0, e1, e2, stack, stack_t):
    """Nearest hit with t > tmin; returns (leaf-order prim index or -1, t, u, v)."""
    ix, iy, iz = _safe_inv(dx), _safe_inv(dy), _safe_inv(dz)
    best_t = np.inf
    best_k, best_u, best_v = -1, 0.0, 0.0
    t_root = _box_entry(node_min, node_max, 0, ox, oy, oz, ix, iy, iz, best_t)
    if t_root == np.inf:
        return best_k, best_t, best_u, best_v
    stack[0] = 0
    stack_t[0] = t_root
    sp = 1
    while sp > 0:
        sp -= 1
        if stack_t[sp] > best_t:
            continue
        node = stack[sp]
        if left[node] < 0:
            s = start[node]
            for k in range(s, s + count[node]):
                t, u, v = _moller_trumbore(ox, oy, oz, dx, dy, dz, v0, e1, e2, k)
                if t > tmin and t < best_t:
                    best_t, best_k, best_u, best_v = t, k, u, v
            continue
        a, b = left[node], right[node]
        ta = _box_entry(node_min, node_max, a, ox, oy, oz, ix, iy, iz, best_t)
        tb = _box_entry(node_min, node_max, b, ox, oy, oz, ix, iy, iz, best_t)
        if ta > tb:
            a, b = b, a
            ta, tb = tb, ta
        # push far child first so the near one is popped next
        if tb != np.inf:
            stack[sp] = b
            stack_t[sp] = tb
            sp += 1
        if ta != np.inf:
            stack[sp] = a
            stack_t[sp] = ta
            sp += 1
    return best_k, best_t, best_u, best_v


@numba.njit(cache=True, parallel=True, error_model="numpy")
def _intersect_many(origins, directions, tmin, node_min, node_max, left, right, start, count, v0, e1, e2,
                    out_k, out_t, out_u, out_v):
    n = origins.shape[0]
    n_chunks = (n + 255) // 256
    for c in numba.prange(n_chunks):
        stack = np.empty(_STACK_DEPTH, dtype=np.int32)
        stack_t = np.empty(_STACK_DEPTH)
        for i in range(c * 256, min(n, (c + 1) * 256)):
            k, t, u, v = _closest_hit(origins[i, 0], origins[i, 1], origins[i, 2],
                                      directions[i, 0], directions[i, 1], directions[i, 2], tmin,
                                      node_min, node_max, left, right, start, count, v0, e1, e2, stack, stack_t)
            out_k[i], out_t[i], out_u[i], out_v[i] = k, t, u, v


@numba.njit(cache=True, parallel=True, error_model="numpy")
def _brute_force_many(origins, directions, tmin, v0, e1, e2, out_k, out_t):
    for i in numba.prange(origins.shape[0]):
        best_t, best_k = np.inf, -1
        for k in range(v0.shape[0]):
            t, u, v = _moller_trumbore(origins[i, 0], origins[i, 1], origins[i, 2],
                                       directions[i, 0], directions[i, 1], directions[i, 2], v0, e1, e2, k)
            if t > tmin and t < best_t:
                best_t, best_k = t, k
        out_k[i], out_t[i] = best_k, best_t


@_jit
def _splitmix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@_jit
def _jitter_pair(seed, cell, ray):
    """Two uniforms in [0, 1) from a counter-based hash of (seed, cell, ray)."""
    golden = np.uint64(0x9E3779B97F4A7C15)
    h = _splitmix64(seed ^ _splitmix64(np.uint64(cell) * golden + np.uint64(ray)))
    h2 = _splitmix64(h + golden)
    scale = 1.0 / 9007199254740992.0  # 2**-53
    return float(h >> np.uint64(11)) * scale, float(h2 >> np.uint64(11)) * scale


@numba.njit(cache=True, parallel=True, error_model="numpy")
def _trace_kernel(n_az, n_el, az0, el0, daz, delv, k_rays, sx, sy, jitter, seed,
                  origin, rot, max_bounces, max_range, eps_t, p_exp, ref_range, pol_mode,
                  node_min, node_max, left, right, start, count, v0, e1, e2, prim_mat, eta,
                  out_len, out_amp, out_prim, out_az, out_el):
    n_rays = n_az * n_el * k_rays
    n_chunks = (n_rays + 127) // 128
    for c in numba.prange(n_chunks):
        stack = np.empty(_STACK_DEPTH, dtype=np.int32)
        stack_t = np.empty(_STACK_DEPTH)
        for ray in range(c * 128, min(n_rays, (c + 1) * 128)):
            cell = ray // k_rays
            r = ray - cell * k_rays
            i_el = cell // n_az
            i_az = cell - i_el * n_az
            if jitter:
                ju, jv = _jitter_pair(seed, cell, r)
            else:
                ju, jv = 0.5, 0.5
            a = az0 + (i_az + ((r % sx) + ju) / sx) * daz
            e = el0 + (i_el + ((r // sx) + jv) / sy) * delv
            out_az[ray] = a
            out_el[ray] = e
            ce = math.cos(e)
            sdx, sdy, sdz = ce * math.cos(a), ce * math.sin(a), math.sin(e)
            dx = rot[0, 0] * sdx + rot[0, 1] * sdy + rot[0, 2] * sdz
            dy = rot[1, 0] * sdx + rot[1, 1] * sdy + rot[1, 2] * sdz
            dz = rot[2, 0] * sdx + rot[2, 1] * sdy + rot[2, 2] * sdz
            ox, oy, oz = origin[0], origin[1], origin[2]
            cum = 0.0
            throughput = 1.0
            for b in range(max_bounces):
                k, t, u, v = _closest_hit(ox, oy, oz, dx, dy, dz, eps_t, node_min, node_max, left, right,
                                          start, count, v0, e1, e2, stack, stack_t)
                if k < 0:
                    break
                cum += t
                if cum > max_range:
                    break
                nx = e1[k, 1] * e2[k, 2] - e1[k, 2] * e2[k, 1]
                ny = e1[k, 2] * e2[k, 0] - e1[k, 0] * e2[k, 2]
                nz = e1[k, 0] * e2[k, 1] - e1[k, 1] * e2[k, 0]
                inv_n = 1.0 / math.sqrt(nx * nx + ny * ny + nz * nz)
                nx, ny, nz = nx * inv_n, ny * inv_n, nz * inv_n
                dn = dx * nx + dy * ny + dz * nz
                if dn > 0.0:
                    nx, ny, nz, dn = -nx, -ny, -nz, -dn
                cos_i = min(1.0, -dn)
                refl = reflectance_kernel(eta[prim_mat[k]], cos_i, pol_mode)
                spread = ref_range / cum
                out_len[ray, b] = 2.0 * cum
                out_amp[ray, b] = throughput * refl * cos_i ** p_exp * spread * spread
                out_prim[ray, b] = k
                throughput *= refl
                ox, oy, oz = ox + t * dx, oy + t * dy, oz + t * dz
                dx, dy, dz = dx - 2.0 * dn * nx, dy - 2.0 * dn * ny, dz - 2.0 * dn * nz
                inv_d = 1.0 / math.sqrt(dx * dx + dy * dy + dz * dz)
                dx, dy, dz = dx * inv_d, dy * inv_d, dz * inv_d


# --------------------------------------------------------------------------- public API


def _bvh_args(bvh: Bvh):
    return (bvh.node_min, bvh.node_max, bvh.left, bvh.right, bvh.start, bvh.count, bvh.v0, bvh.e1, bvh.e2)


@contextmanager
def thread_limit(threads: int | None):
    """Temporarily bound numba's worker count."""
    if threads is None:
        yield
        return
    previous = numba.get_num_threads()
    numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))
    try:
        yield
    finally:
        numba.set_num_threads(previous)


def intersect_many(origins, directions, bvh: Bvh, tmin: float = EPSILON_T):
    """Vectorized nearest hit. Returns (triangle ids with -1 for misses, distances with inf for misses)."""
    origins = np.ascontiguousarray(np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(directions)))
    directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    origins = origins.reshape(-1, 3)
    n = len(directions)
    k = np.empty(n, dtype=np.int64)
    t = np.empty(n)
    u = np.empty(n)
    v = np.empty(n)
    _intersect_many(origins, directions, float(tmin), *_bvh_args(bvh), k, t, u, v)
    tri = np.where(k >= 0, bvh.prim_order[np.maximum(k, 0)], _NO_HIT)
    return tri, t


def intersect_brute_force(origins, directions, mesh: LabeledMesh, tmin: float = EPSILON_T):
    """All-triangles reference for :func:`intersect_many`."""
    directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    origins = np.ascontiguousarray(np.broadcast_to(np.asarray(origins, dtype=np.float64), directions.shape))
    tri = mesh.vertices[mesh.triangles]
    v0 = np.ascontiguousarray(tri[:, 0])
    e1 = np.ascontiguousarray(tri[:, 1] - v0)
    e2 = np.ascontiguousarray(tri[:, 2] - v0)
    k = np.empty(len(directions), dtype=np.int64)
    t = np.empty(len(directions))
    _brute_force_many(origins, directions, float(tmin), v0, e1, e2, k, t)
    return k, t


def intersect(origin, direction, bvh: Bvh, mesh: LabeledMesh | None = None, tmin: float = EPSILON_T):
    """Nearest hit beyond ``tmin`` or None. The normal faces the incoming ray."""
    origin = np.asarray(origin, dtype=np.float64).reshape(1, 3)
    direction = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    k = np.empty(1, dtype=np.int64)
    t, u, v = np.empty(1), np.empty(1), np.empty(1)
    _intersect_many(origin, direction, float(tmin), *_bvh_args(bvh), k, t, u, v)
    if k[0] < 0:
        return None
    n = np.cross(bvh.e1[k[0]], bvh.e2[k[0]])
    n /= np.linalg.norm(n)
    if n @ direction[0] > 0:
        n = -n
    return Hit(int(bvh.prim_order[k[0]]), float(t[0]), n, (float(u[0]), float(v[0])))


@dataclass
class TraceStats:
    rays: int = 0
    returns: int = 0


def trace_frame(mesh: LabeledMesh, bvh: Bvh | None, config: RadarConfig, seed: int = 0, jitter: bool = True,
                threads: int | None = None, material_table=None, stats: TraceStats | None = None) -> RadarReturns:
    """Cast ``rays_per_angular_bin`` rays through every azimuth/elevation cell and collect returns.

    Output order is row-major over cells (elevation outer, azimuth inner), then
    ray index, then bounce.
    """
    n_az, n_el, k = config.n_azimuth, config.n_elevation, config.rays_per_angular_bin
    if stats is not None:
        stats.rays = n_az * n_el * k
    if len(mesh) == 0:
        warnings.warn("empty mesh: no returns traced", EmptySceneWarning, stacklevel=2)
        return RadarReturns.empty()
    if bvh is None:
        bvh = build_bvh(mesh)

    sx = math.ceil(math.sqrt(k))
    sy = math.ceil(k / sx)
    n_rays = n_az * n_el * k
    mb = config.max_bounces
    out_len = np.zeros((n_rays, mb))
    out_amp = np.zeros((n_rays, mb))
    out_prim = np.full((n_rays, mb), -1, dtype=np.int64)
    out_az = np.empty(n_rays)
    out_el = np.empty(n_rays)
    eta = permittivity_table(config.carrier_frequency, material_table,
                             materials=np.unique(mesh.triangle_material))
    prim_mat = np.ascontiguousarray(mesh.triangle_material[bvh.prim_order].astype(np.int64))
    pose = config.sensor_pose
    with thread_limit(threads):
        _trace_kernel(
            n_az, n_el, math.radians(config.azimuth_start), math.radians(config.elevation_start),
            math.radians(config.azimuth_resolution), math.radians(config.elevation_resolution),
            k, sx, sy, bool(jitter), np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
            np.asarray(pose.translation, dtype=np.float64), np.ascontiguousarray(pose.rotation_matrix),
            mb, float(config.max_range), EPSILON_T, float(config.backscatter_exponent),
            float(config.reference_range), config.polarization_mode,
            *_bvh_args(bvh), prim_mat, eta,
            out_len, out_amp, out_prim, out_az, out_el,
        )
    ray_idx, bounce = np.nonzero(out_prim >= 0)  # row-major: ray, then bounce
    prim = out_prim[ray_idx, bounce]
    returns = RadarReturns(
        out_len[ray_idx, bounce],
        out_az[ray_idx],
        out_el[ray_idx],
        out_amp[ray_idx, bounce].astype(np.complex128),
        (bounce + 1).astype(np.int8),
        mesh.triangle_material[bvh.prim_order[prim]].astype(np.int8),
        bvh.prim_order[prim],
    )
    if stats is not None:
        stats.returns = len(returns)
    return returns


def dump_returns_jsonl(returns: RadarReturns, path) -> None:
    with open(path, "w") as fh:
        for r in returns:
            fh.write(json.dumps({
                "two_way_path_length": r.two_way_path_length,
                "arrival_azimuth": r.arrival_azimuth,
                "arrival_elevation": r.arrival_elevation,
                "amplitude": [r.amplitude.real, r.amplitude.imag],
                "bounce_count": r.bounce_count,
                "hit_material": r.hit_material.value,
                "hit_triangle": r.hit_triangle,
            }) + "\n")
