import math
import os
import subprocess
import sys
import textwrap
from pathlib import Path

import numpy as np
import pytest

from sim2radar.core_types import LabeledMesh, MaterialClass, RadarConfig, SensorPose, ValidationError
from sim2radar.em_materials import reflection_amplitude
from sim2radar.raytrace import (
    EmptySceneWarning,
    RadarReturns,
    TraceStats,
    build_bvh,
    dump_returns_jsonl,
    intersect,
    intersect_brute_force,
    intersect_many,
    trace_frame,
)

from oracles import ray_triangle_linear_solve
from scenes import corridor_mesh, grid_quad, plate_facing_sensor, random_triangles

TESTS = Path(__file__).parent


def unit_triangle_at_x(x, material=MaterialClass.METAL):
    return LabeledMesh([[x, -1, -1], [x, 1, -1], [x, 0, 1]], [[0, 1, 2]], [material])


def narrow_config(n_cells=3, **kw):
    """Odd cell counts so the centre cell looks straight down boresight."""
    base = dict(max_range=20.0, azimuth_fov=1.18 * n_cells, elevation_fov=2.0 * n_cells,
                elevation_resolution=2.0, rays_per_angular_bin=1, max_bounces=1)
    base.update(kw)
    return RadarConfig(**base)


def test_single_triangle_tree():
    mesh = unit_triangle_at_x(2.0)
    bvh = build_bvh(mesh)
    assert bvh.n_nodes == 1 and bvh.leaves().tolist() == [0]
    hit = intersect([0, 0, 0], [1, 0, 0], bvh, mesh)
    assert hit.triangle == 0 and hit.distance == pytest.approx(2.0, abs=1e-12)
    assert hit.normal @ np.array([1.0, 0, 0]) < 0


def test_nearest_of_two():
    mesh = LabeledMesh.concatenate([unit_triangle_at_x(5.0), unit_triangle_at_x(2.0)])
    hit = intersect([0, 0, 0], [1, 0, 0], build_bvh(mesh))
    assert hit.triangle == 1 and hit.distance == pytest.approx(2.0)


def test_parallel_ray_misses():
    mesh = unit_triangle_at_x(2.0)
    assert intersect([0, 0, 0], [0, 1, 0], build_bvh(mesh)) is None
    assert intersect([0, 0, 0], [-1, 0, 0], build_bvh(mesh)) is None


def test_normal_faces_ray_from_behind():
    mesh = unit_triangle_at_x(2.0)
    hit = intersect([4, 0, 0], [-1, 0, 0], build_bvh(mesh))
    assert hit.normal[0] > 0 and hit.distance == pytest.approx(2.0)


def test_empty_mesh_bvh_error():
    with pytest.raises(ValidationError):
        build_bvh(LabeledMesh.empty())


def test_bvh_structure_invariants():
    mesh = random_triangles(np.random.default_rng(1), 3000)
    bvh = build_bvh(mesh)
    leaves = bvh.leaves()
    assert np.all(bvh.count[leaves] <= 4) and np.all(bvh.count[leaves] >= 1)
    owned = np.concatenate([bvh.prim_order[bvh.start[i]: bvh.start[i] + bvh.count[i]] for i in leaves])
    assert sorted(owned.tolist()) == list(range(len(mesh)))
    inner = np.nonzero(bvh.left >= 0)[0]
    for child in (bvh.left[inner], bvh.right[inner]):
        assert np.all(bvh.node_min[inner] <= bvh.node_min[child])
        assert np.all(bvh.node_max[inner] >= bvh.node_max[child])
    tri = mesh.vertices[mesh.triangles]
    for i in leaves:
        prims = bvh.prim_order[bvh.start[i]: bvh.start[i] + bvh.count[i]]
        assert np.all(tri[prims].min(axis=1) >= bvh.node_min[i])
        assert np.all(tri[prims].max(axis=1) <= bvh.node_max[i])


def random_rays(rng, n, box=10.0):
    origins = rng.uniform(-box / 2, box / 2, size=(n, 3))
    d = rng.normal(size=(n, 3))
    return origins, d / np.linalg.norm(d, axis=1, keepdims=True)


def test_bvh_matches_brute_force():
    rng = np.random.default_rng(42)
    mesh = random_triangles(rng, 5000)
    origins, dirs = random_rays(rng, 10_000)
    k_bvh, t_bvh = intersect_many(origins, dirs, build_bvh(mesh))
    k_bf, t_bf = intersect_brute_force(origins, dirs, mesh)
    assert (k_bf >= 0).sum() > 1000
    np.testing.assert_array_equal(k_bvh, k_bf)
    hit = k_bf >= 0
    assert np.max(np.abs(t_bvh[hit] - t_bf[hit])) <= 1e-9
    assert np.all(np.isinf(t_bvh[~hit]))


def test_moller_trumbore_against_linear_solve():
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(1000):
        a, b, c = rng.uniform(-1, 1, size=(3, 3)) + np.array([3.0, 0, 0])
        if np.linalg.norm(np.cross(b - a, c - a)) < 1e-3:
            continue
        origin = rng.uniform(-0.5, 0.5, 3)
        target = a + rng.uniform(0, 0.6) * (b - a) + rng.uniform(0, 0.4) * (c - a)
        d = target - origin + rng.normal(scale=0.2, size=3)
        d /= np.linalg.norm(d)
        mesh = LabeledMesh([a, b, c], [[0, 1, 2]], [0])
        ref = ray_triangle_linear_solve(origin, d, a, b, c)
        hit = intersect(origin, d, build_bvh(mesh))
        if ref is None:
            # allow disagreement only within rounding of the triangle edge
            if hit is not None:
                assert min(hit.barycentric[0], hit.barycentric[1], 1 - sum(hit.barycentric)) < 1e-9
            continue
        assert hit is not None
        assert abs(hit.distance - ref) <= 1e-9
        checked += 1
    assert checked > 300


def test_pec_plate_centre_ray_path_length():
    mesh = plate_facing_sensor(3.0, 2.0, MaterialClass.METAL)
    cfg = narrow_config()
    r = trace_frame(mesh, build_bvh(mesh), cfg, jitter=False)
    assert len(r) == 9
    centre = (np.abs(r.azimuth) < 1e-12) & (np.abs(r.elevation) < 1e-12)
    assert centre.sum() == 1
    assert r.two_way_path_length[centre][0] == pytest.approx(6.0, abs=1e-12)
    # off-centre rays travel 3 / (cos(az) cos(el)) to the plane x = 3
    expect = 6.0 / (np.cos(r.azimuth) * np.cos(r.elevation))
    np.testing.assert_allclose(r.two_way_path_length, expect, rtol=1e-12)
    assert np.all(r.bounce_count == 1)


def test_wood_weaker_than_pec():
    cfg = narrow_config()
    pec = plate_facing_sensor(3.0, 2.0, MaterialClass.METAL)
    wood = pec.with_material(MaterialClass.WOOD)
    a = trace_frame(pec, None, cfg, jitter=False)
    b = trace_frame(wood, None, cfg, jitter=False)
    np.testing.assert_array_equal(a.two_way_path_length, b.two_way_path_length)
    assert np.all(np.abs(b.amplitude) < np.abs(a.amplitude))


def test_amplitude_model_on_plate():
    cfg = narrow_config()
    mesh = plate_facing_sensor(3.0, 2.0, MaterialClass.WOOD)
    r = trace_frame(mesh, None, cfg, jitter=False)
    cos_i = np.cos(r.azimuth) * np.cos(r.elevation)
    rng = r.two_way_path_length / 2
    refl = np.array([reflection_amplitude(MaterialClass.WOOD, 77e9, math.acos(c)) for c in cos_i])
    np.testing.assert_allclose(np.abs(r.amplitude), refl * cos_i**2 / rng**2, rtol=1e-12)


def corner_reflector():
    plate1 = grid_quad((3.0, -1.0, -1.0), (0, 2, 0), (0, 0, 2), 2, 2, MaterialClass.METAL)  # x = 3
    plate2 = grid_quad((0.5, -1.0, -1.0), (2.5, 0, 0), (0, 0, 2), 2, 2, MaterialClass.METAL)  # y = -1
    return LabeledMesh.concatenate([plate1, plate2])


def test_corner_reflector_second_bounce_matches_mirror_path():
    mesh = corner_reflector()
    cfg = RadarConfig(max_range=20.0, azimuth_fov=30.0, azimuth_resolution=1.0, elevation_fov=10.0,
                      elevation_resolution=2.0, max_bounces=2, rays_per_angular_bin=4)
    r = trace_frame(mesh, build_bvh(mesh), cfg, seed=5)
    second = r.bounce_count == 2
    assert second.sum() > 10
    d = np.stack([np.cos(r.elevation) * np.cos(r.azimuth), np.cos(r.elevation) * np.sin(r.azimuth),
                  np.sin(r.elevation)], axis=1)
    # Unfold the bounce off x = 3: the path is a straight line from the sensor to the plane y = -1
    # (the mirror image of y = -1 across x = 3 is itself).
    analytic = 2.0 * (-1.0 / d[second, 1])
    assert np.max(np.abs(r.two_way_path_length[second] - analytic)) <= 1e-6
    first_of_pair = np.nonzero(second)[0] - 1
    assert np.all(r.bounce_count[first_of_pair] == 1)
    np.testing.assert_allclose(r.two_way_path_length[first_of_pair], 2 * 3.0 / d[second, 0], atol=1e-9)


def test_spreading_law_plate_distance_doubling():
    cfg = narrow_config(5)
    near = plate_facing_sensor(2.0, 1.0, MaterialClass.CONCRETE)
    far = plate_facing_sensor(4.0, 2.0, MaterialClass.CONCRETE)
    a = trace_frame(near, None, cfg, jitter=False)
    b = trace_frame(far, None, cfg, jitter=False)
    assert len(a) == len(b) == 25
    np.testing.assert_array_equal(a.azimuth, b.azimuth)
    rel = np.abs(np.abs(b.amplitude) / np.abs(a.amplitude) - 0.25)
    assert rel.max() <= 1e-9 * 0.25


def test_limits_respected():
    mesh = corridor_mesh(6)
    cfg = RadarConfig(max_range=4.0, azimuth_fov=60.0, elevation_fov=20.0, elevation_resolution=2.0,
                      max_bounces=2, rays_per_angular_bin=4)
    r = trace_frame(mesh, None, cfg, seed=1)
    assert len(r) > 0
    assert r.bounce_count.max() <= 2 and r.bounce_count.min() >= 1
    assert r.two_way_path_length.max() <= 2 * 4.0
    assert np.all(r.two_way_path_length > 0)


def test_output_order_ray_then_bounce():
    mesh = corner_reflector()
    cfg = RadarConfig(max_range=20.0, azimuth_fov=30.0, azimuth_resolution=1.0, elevation_fov=10.0,
                      elevation_resolution=2.0, max_bounces=2, rays_per_angular_bin=4)
    r = trace_frame(mesh, None, cfg, seed=5)
    # launch elevation is non-decreasing cell-row by cell-row; bounce 2 always follows bounce 1 of the same ray
    second = np.nonzero(r.bounce_count == 2)[0]
    assert np.all(r.azimuth[second] == r.azimuth[second - 1])
    cell_el = np.floor((np.degrees(r.elevation) - cfg.elevation_start) / cfg.elevation_resolution)
    assert np.all(np.diff(cell_el) >= 0)


def test_monotone_in_reflectance():
    mesh = corridor_mesh(6)
    cfg = RadarConfig(max_range=8.0, azimuth_fov=40.0, elevation_fov=10.0, elevation_resolution=2.0,
                      max_bounces=2, rays_per_angular_bin=4)
    base = trace_frame(mesh, None, cfg, seed=3)
    for target in (MaterialClass.GLASS, MaterialClass.METAL):
        upgraded = mesh.with_material(target, mesh.triangle_material == MaterialClass.PLASTERBOARD.ordinal)
        up = trace_frame(upgraded, None, cfg, seed=3)
        np.testing.assert_array_equal(up.two_way_path_length, base.two_way_path_length)
        assert np.all(np.abs(up.amplitude) >= np.abs(base.amplitude))


def test_sensor_pose_translation_shifts_paths():
    mesh = plate_facing_sensor(3.0, 3.0, MaterialClass.METAL)
    base = trace_frame(mesh, None, narrow_config(), jitter=False)
    moved = trace_frame(mesh, None, narrow_config(sensor_pose=SensorPose((-0.5, 0, 0))), jitter=False)
    centre = (np.abs(base.azimuth) < 1e-12) & (np.abs(base.elevation) < 1e-12)
    assert moved.two_way_path_length[centre][0] - base.two_way_path_length[centre][0] == pytest.approx(1.0)


def test_empty_mesh_warns():
    stats = TraceStats()
    with pytest.warns(EmptySceneWarning):
        r = trace_frame(LabeledMesh.empty(), None, narrow_config(), stats=stats)
    assert len(r) == 0 and stats.rays == 9


def test_deterministic_and_seed_sensitive():
    mesh = corridor_mesh(6)
    cfg = RadarConfig(max_range=8.0, azimuth_fov=40.0, elevation_fov=10.0, elevation_resolution=2.0)
    a = trace_frame(mesh, None, cfg, seed=11)
    b = trace_frame(mesh, None, cfg, seed=11)
    c = trace_frame(mesh, None, cfg, seed=12)
    for f in RadarReturns.__dataclass_fields__:
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    assert a.azimuth.tobytes() != c.azimuth.tobytes()


def test_jitter_stays_inside_cells():
    mesh = plate_facing_sensor(3.0, 10.0, MaterialClass.METAL)
    cfg = narrow_config(5, rays_per_angular_bin=6)
    r = trace_frame(mesh, None, cfg, seed=9)
    assert len(r) == 25 * 6
    az_cell = np.floor((np.degrees(r.azimuth) - cfg.azimuth_start) / cfg.azimuth_resolution)
    per_cell = np.repeat(np.tile(np.arange(5), 5), 6)
    np.testing.assert_array_equal(az_cell, per_cell)


def test_thread_count_does_not_change_output():
    script = textwrap.dedent(f"""
        import sys, hashlib
        sys.path.insert(0, {str(TESTS)!r})
        from scenes import corridor_mesh
        from sim2radar.core_types import RadarConfig
        from sim2radar.raytrace import trace_frame
        cfg = RadarConfig(max_range=8.0, azimuth_fov=60.0, elevation_fov=20.0, elevation_resolution=2.0)
        mesh = corridor_mesh(8)
        h = []
        for threads in (1, 4):
            r = trace_frame(mesh, None, cfg, seed=7, threads=threads)
            h.append(hashlib.sha256(r.two_way_path_length.tobytes() + r.amplitude.tobytes()
                                    + r.azimuth.tobytes() + r.hit_triangle.tobytes()).hexdigest())
        import numba
        print(numba.config.NUMBA_NUM_THREADS, h[0] == h[1], len(r))
    """)
    env = dict(os.environ, NUMBA_NUM_THREADS="4")
    out = subprocess.run([sys.executable, "-c", script], env=env, capture_output=True, text=True, check=True)
    n_threads, same, n = out.stdout.split()
    assert n_threads == "4" and same == "True" and int(n) > 0


def test_dump_jsonl(tmp_path):
    mesh = plate_facing_sensor(3.0, 2.0, MaterialClass.METAL)
    r = trace_frame(mesh, None, narrow_config(), jitter=False)
    dump_returns_jsonl(r, tmp_path / "r.jsonl")
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert len(lines) == len(r)
    assert '"hit_material": "metal"' in lines[0]
