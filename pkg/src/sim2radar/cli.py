"""
Command-line entry point: ``sim2radar reconstruct|simulate|calibrate|compare|pipeline``.

Exit codes: 0 success (including warned-empty results), 2 input or
validation error, 1 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from . import calibrate as cal
from . import fileio
from .core_types import ParseError, Sim2RadarError, ValidationError
from .reconstruction import DEFAULT_DISCONTINUITY_RATIO, align_depth_scale_shift, mesh_from_depth
from .signal import DEFAULT_THRESHOLD_DB, save_grid, simulate_frame

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException, code: int):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.code = code


class _Stage:
    """Tag any exception escaping the block with the pipeline stage name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None or isinstance(exc, StageError):
            return False
        if isinstance(exc, (Sim2RadarError, FileNotFoundError, IsADirectoryError, PermissionError)):
            raise StageError(self.name, exc, EXIT_INPUT) from exc
        if isinstance(exc, Exception):
            raise StageError(self.name, exc, EXIT_INTERNAL) from exc
        return False


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- manifest


@dataclass
class PipelineManifest:
    depth: Path | None = None
    intrinsics: Path | None = None
    masks: Path | None = None
    labels: Path | None = None
    anchors: Path | None = None
    radar_config: Path | None = None
    reference_clouds: list[Path] = field(default_factory=list)
    real_frame: Path | None = None
    output_dir: Path = Path("out")
    threshold_db: float = DEFAULT_THRESHOLD_DB
    discontinuity_ratio: float = DEFAULT_DISCONTINUITY_RATIO
    seed: int = 0

    _PATH_KEYS = ("depth", "intrinsics", "masks", "labels", "anchors", "radar_config", "real_frame")

    @classmethod
    def load(cls, path) -> "PipelineManifest":
        path = Path(path)
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
        if not isinstance(obj, dict):
            raise ValidationError("manifest must be a JSON object", "manifest")
        known = set(cls._PATH_KEYS) | {"reference_clouds", "output_dir", "overrides"}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValidationError(f"unknown keys {unknown}", unknown[0])
        base = path.parent
        m = cls()
        for key in cls._PATH_KEYS:
            if obj.get(key) is not None:
                setattr(m, key, base / obj[key])
        m.reference_clouds = [base / p for p in obj.get("reference_clouds", [])]
        m.output_dir = base / obj.get("output_dir", "out")
        overrides = obj.get("overrides", {})
        extra = sorted(set(overrides) - {"threshold_db", "discontinuity_ratio", "seed"})
        if extra:
            raise ValidationError(f"unknown override {extra}", "overrides")
        for key, cast in (("threshold_db", float), ("discontinuity_ratio", float), ("seed", int)):
            if key in overrides:
                value = overrides[key]
                if isinstance(value, bool) or not isinstance(value, (int, float)) or value != value:
                    raise ValidationError(f"expected a number, got {value!r}", f"overrides.{key}")
                setattr(m, key, cast(value))
        return m

    def validate(self, stages=("reconstruct", "simulate")) -> None:
        required = {
            "reconstruct": ("depth", "intrinsics", "masks", "labels"),
            "simulate": ("radar_config",),
        }
        for stage in stages:
            for key in required.get(stage, ()):
                if getattr(self, key) is None:
                    raise ValidationError("required for " + stage, key)
        for key in self._PATH_KEYS:
            p = getattr(self, key)
            if p is not None and not p.exists():
                raise FileNotFoundError(f"{key}: no such file: {p}")
        for p in self.reference_clouds:
            if not p.exists():
                raise FileNotFoundError(f"reference_clouds: no such file: {p}")
        self.output_dir.mkdir(parents=True, exist_ok=True)


# --------------------------------------------------------------------------- stages


def run_reconstruct(m: PipelineManifest, out_mesh: Path) -> dict:
    with _Stage("reconstruct"):
        for key in ("depth", "intrinsics", "masks", "labels"):
            p = getattr(m, key)
            if p is None:
                raise ValidationError("missing input path", key)
            if not p.exists():
                raise FileNotFoundError(f"{key}: no such file: {p}")
        depth = fileio.load_depth(m.depth)
        intr = fileio.load_intrinsics(m.intrinsics)
        labeling = fileio.load_segment_labeling(m.masks, m.labels)
        stats: dict = {}
        if m.anchors is not None:
            anchors = fileio.load_anchors(m.anchors)
            s, t = align_depth_scale_shift(depth, anchors)
            depth = depth.scaled(s, t)
            stats.update(scale=s, shift=t, anchors=len(anchors))
            _info(f"aligned depth: scale={s:.6g} shift={t:.6g} m from {len(anchors)} anchors")
        else:
            _info("WARNING: no depth anchors given; the mesh is in monocular (unitless) scale, not meters")
            stats.update(scale=None, shift=None, anchors=0)
        mesh = mesh_from_depth(depth, intr, labeling, m.discontinuity_ratio)
        fileio.save_mesh(mesh, out_mesh)
        counts: dict[str, int] = {}
        for mat in mesh.materials:
            counts[mat.value] = counts.get(mat.value, 0) + 1
        stats.update(vertices=len(mesh.vertices), triangles=len(mesh.triangles), materials=counts,
                     mesh=str(out_mesh))
        _write_json(out_mesh.with_name(out_mesh.stem + ".stats.json"), stats)
        print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles; "
              + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
        return stats


def run_simulate(mesh_path: Path, config_path: Path, out: Path, threshold_db: float, seed: int,
                 threads: int | None, fmt: str | None, dump_returns: Path | None = None,
                 dump_grid: Path | None = None, cfar: bool = False) -> dict:
    with _Stage("simulate"):
        config = fileio.load_radar_config(config_path)
        mesh = fileio.load_mesh(mesh_path)
        if len(mesh) == 0:
            _info(f"WARNING: {mesh_path} has no triangles; writing an empty point cloud")
        t0 = time.perf_counter()
        result = simulate_frame(mesh, config, threshold_db, seed=seed, threads=threads,
                                mode="cfar" if cfar else "threshold")
        fileio.save_point_cloud(result.cloud, out, fmt)
        stats = result.stats.to_dict()
        stats["wall_clock_s"] = time.perf_counter() - t0
        stats.update(seed=seed, threshold_db=threshold_db, triangles=len(mesh), output=str(out))
        _write_json(out.with_name(out.stem + ".stats.json"), stats)
        if dump_returns is not None:
            from .raytrace import dump_returns_jsonl

            dump_returns_jsonl(result.returns, dump_returns)
        if dump_grid is not None:
            save_grid(result.grid, dump_grid)
        print(f"simulated {stats['rays']} rays -> {stats['returns']} returns -> {stats['points']} points "
              f"({stats['dropped_out_of_fov']} out of FOV) in {stats['wall_clock_s']:.2f} s")
        return stats


def run_calibrate(sim_paths: list[Path], real_paths: list[Path], out_dir: Path, fmt: str | None,
                  per_frame: bool = False, model_path: Path | None = None) -> list[Path]:
    with _Stage("calibrate"):
        sims = [fileio.load_point_cloud(p) for p in sim_paths]
        if model_path is not None:
            models = [cal.IntensityHistogramModel.load(model_path)] * len(sims)
        else:
            reals = [fileio.load_point_cloud(p) for p in real_paths]
            if not reals:
                raise ValidationError("need reference clouds or a saved model", "real")
            if per_frame:
                if len(reals) != len(sims):
                    raise ValidationError(f"{len(sims)} sim frames but {len(reals)} reference frames", "real")
                models = [cal.fit_reference([r], source=str(p)) for r, p in zip(reals, real_paths)]
            else:
                model = cal.fit_reference(reals, source=",".join(str(p) for p in real_paths))
                out_dir.mkdir(parents=True, exist_ok=True)
                model.save(out_dir / "histogram_model.json")
                models = [model] * len(sims)
        outputs = []
        for sim, path, model in zip(sims, sim_paths, models):
            ext = fmt or path.suffix.lstrip(".")
            target = out_dir / f"{path.stem}_calibrated.{ext}"
            fileio.save_point_cloud(cal.apply_histogram_match(sim, model), target, ext)
            outputs.append(target)
        print(f"calibrated {len(outputs)} cloud(s) into {out_dir}")
        return outputs


def run_compare(sim_paths: list[Path], real_paths: list[Path], out: Path | None) -> list[cal.GapReport]:
    with _Stage("compare"):
        if len(sim_paths) != len(real_paths):
            raise ValidationError(f"{len(sim_paths)} sim frames but {len(real_paths)} real frames", "real")
        reports = []
        for sp, rp in zip(sim_paths, real_paths):
            report = cal.compare(fileio.load_point_cloud(sp), fileio.load_point_cloud(rp))
            reports.append(report)
            ratio = "n/a" if report.density_ratio is None else f"{100 * report.density_ratio:.1f}%"
            print(f"DENSITY RATIO {ratio}  ({sp.name} vs {rp.name})")
            print("  " + report.summary())
        if out is not None:
            payload = reports[0].to_json() if len(reports) == 1 else [r.to_json() for r in reports]
            _write_json(out, payload)
        return reports


# --------------------------------------------------------------------------- argparse


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for ray jitter (default 0)")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all available)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sim2radar", description="mmWave radar point-cloud simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="depth + segments + labels -> material-labeled mesh")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--depth", type=Path)
    p.add_argument("--intrinsics", type=Path)
    p.add_argument("--masks", type=Path)
    p.add_argument("--labels", type=Path)
    p.add_argument("--anchors", type=Path)
    p.add_argument("--discontinuity-ratio", type=float, default=None)
    p.add_argument("--out", type=Path, help="output OBJ path, or a directory to hold mesh.obj (default <output_dir>/mesh.obj)")

    p = sub.add_parser("simulate", help="mesh + radar config -> point cloud")
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threshold-db", type=float, default=DEFAULT_THRESHOLD_DB)
    p.add_argument("--format", choices=("ply", "csv"), default=None)
    p.add_argument("--dump-returns", type=Path, help="write per-return JSON lines here")
    p.add_argument("--dump-grid", type=Path, help="write the complex range/az/el grid here")
    p.add_argument("--cfar", action="store_true", help="CA-CFAR detection instead of a relative threshold")
    _add_common(p)

    p = sub.add_parser("calibrate", help="log-space histogram matching of sim intensities")
    p.add_argument("--sim", type=Path, nargs="+", required=True)
    p.add_argument("--real", type=Path, nargs="*", default=[])
    p.add_argument("--model", type=Path, help="reuse a saved histogram model instead of --real")
    p.add_argument("--per-frame", action="store_true", help="fit one model per paired reference frame")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--format", choices=("ply", "csv"), default=None)
    _add_common(p)

    p = sub.add_parser("compare", help="sim-vs-real gap report")
    p.add_argument("--sim", type=Path, nargs="+", required=True)
    p.add_argument("--real", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, help="report JSON path")
    _add_common(p)

    p = sub.add_parser("pipeline", help="reconstruct -> simulate -> calibrate -> compare")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, help="override the manifest output directory")
    p.add_argument("--threshold-db", type=float, default=None)
    p.add_argument("--format", choices=("ply", "csv"), default="ply")
    _add_common(p)
    p.set_defaults(seed=None)
    return parser


def _manifest_from_args(args) -> PipelineManifest:
    m = PipelineManifest.load(args.manifest) if args.manifest else PipelineManifest()
    for key in ("depth", "intrinsics", "masks", "labels", "anchors"):
        if getattr(args, key, None) is not None:
            setattr(m, key, getattr(args, key))
    if getattr(args, "discontinuity_ratio", None) is not None:
        m.discontinuity_ratio = args.discontinuity_ratio
    return m


def _dispatch(args) -> None:
    if args.command == "reconstruct":
        with _Stage("reconstruct"):
            m = _manifest_from_args(args)
        out = args.out or m.output_dir / "mesh.obj"
        if out.suffix.lower() != ".obj":  # treat as a directory
            out = out / "mesh.obj"
        run_reconstruct(m, out)
    elif args.command == "simulate":
        run_simulate(args.mesh, args.config, args.out, args.threshold_db, args.seed, args.threads, args.format,
                     args.dump_returns, args.dump_grid, args.cfar)
    elif args.command == "calibrate":
        run_calibrate(args.sim, args.real, args.out, args.format, args.per_frame, args.model)
    elif args.command == "compare":
        run_compare(args.sim, args.real, args.out)
    elif args.command == "pipeline":
        with _Stage("pipeline"):
            m = PipelineManifest.load(args.manifest)
            if args.out is not None:
                m.output_dir = args.out
            m.validate()
        seed = args.seed if args.seed is not None else m.seed
        threshold = args.threshold_db if args.threshold_db is not None else m.threshold_db
        out = m.output_dir
        mesh_path = out / "mesh.obj"
        run_reconstruct(m, mesh_path)
        cloud_path = out / f"sim.{args.format}"
        run_simulate(mesh_path, m.radar_config, cloud_path, threshold, seed, args.threads, args.format)
        compare_path = cloud_path
        if m.reference_clouds:
            compare_path = run_calibrate([cloud_path], m.reference_clouds, out, args.format)[0]
        if m.real_frame is not None:
            run_compare([compare_path], [m.real_frame], out / "gap_report.json")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    warnings.simplefilter("default")
    try:
        _dispatch(args)
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
