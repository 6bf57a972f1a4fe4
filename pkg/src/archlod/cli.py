"""Command line interface: run the pipeline, generate synthetic scenes,
evaluate existing outputs."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import fileio, metrics, scenes
from .config import Config, ConfigError
from .pipeline import run

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BAD_CONFIG = 2


def _add_run_parser(sub):
    p = sub.add_parser("run", help="run the LOD pipeline on a directory of buildings")
    p.add_argument("--input", required=True, help="directory of PLY/OBJ building files")
    p.add_argument("--out", required=True, help="output directory (meshes + report.json)")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--ln", type=int, help="number of LOD layers (2 or 3)")
    p.add_argument("--ns", type=int, help="voxel grid resolution per axis")
    p.add_argument("--nr", type=int, help="rays per voxel")
    p.add_argument("--a-eps", type=float, help="alcove area threshold (m^2)")
    p.add_argument("--beta", type=float, help="simplicity weight")
    p.add_argument("--lam", type=float, help="consistency weight")
    p.add_argument("--eta", type=float, help="shape/scale balance weight")
    p.add_argument("--dist-threshold", type=float, help="region growing distance (m)")
    p.add_argument("--angle-threshold", type=float, help="region growing angle (deg)")
    p.add_argument("--min-region", type=int, help="minimum region size (points)")
    p.add_argument("--alpha", type=float, help="footprint alpha radius (m)")
    p.add_argument("--threads", type=int, help="thread budget for per-building stages")
    p.add_argument("--seed", type=int, help="global random seed")
    p.add_argument("--cache-dir", help="stage cache directory")
    p.add_argument("--mesh-density", type=float, help="sampling density for OBJ inputs")
    p.add_argument("--label-all-planes", action="store_true", default=None,
                   help="vote cell labels against all detected planes, not just the layer")
    return p


def _config_from_args(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    overrides = {
        "co.l_n": args.ln,
        "vis.n_s": args.ns,
        "vis.n_r": args.nr,
        "agg.a_epsilon": args.a_eps,
        "co.beta": args.beta,
        "co.lam": args.lam,
        "co.eta": args.eta,
        "detect.distance_threshold": args.dist_threshold,
        "detect.angle_threshold": args.angle_threshold,
        "detect.min_region_size": args.min_region,
        "detect.alpha": args.alpha,
        "threads": args.threads,
        "seed": args.seed,
        "cache_dir": args.cache_dir,
        "mesh_density": args.mesh_density,
        "label_all_planes": args.label_all_planes,
        "input_dir": args.input,
        "output_dir": args.out,
    }
    return cfg.with_overrides(**overrides)


def _cmd_run(args) -> int:
    try:
        cfg = _config_from_args(args)
    except ConfigError as exc:
        print(f"bad config: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    result = run(cfg)
    n_ok = len(result.models)
    n_fail = len({f["building"] for f in result.failures})
    print(f"processed {n_ok} buildings, {n_fail} failed; report in {args.out}/report.json")
    return EXIT_OK if n_ok > 0 else EXIT_FAILURE


def _cmd_synth(args) -> int:
    if args.scene in scenes.FIXTURES:
        spec = scenes.FIXTURES[args.scene](seed=args.seed) if args.seed is not None else scenes.FIXTURES[args.scene]()
    else:
        print(f"unknown scene {args.scene!r}; choices: {sorted(scenes.FIXTURES)}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    scene = scenes.generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for b in scene.buildings:
        fileio.write_ply(out / f"{b.name}.ply", b.cloud, binary=not args.ascii)
    scenes.save_truth(scene, out / "ground_truth.json")
    print(f"wrote {len(scene.buildings)} buildings to {out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    in_dir = Path(args.input)
    mesh_dir = Path(args.meshes)
    clouds = {}
    for p in sorted(in_dir.glob("*.ply")) + sorted(in_dir.glob("*.obj")):
        try:
            clouds[p.stem] = fileio.ingest(p)
        except fileio.FileFormatError as exc:
            print(f"skipping {p.name}: {exc}", file=sys.stderr)
    if not clouds:
        print("no readable inputs", file=sys.stderr)
        return EXIT_FAILURE
    report = {"buildings": []}
    for stem, cloud in clouds.items():
        entry = {"name": stem, "layers": []}
        for mesh_path in sorted(mesh_dir.glob(f"{stem}_lod*.obj")):
            verts, faces = fileio.read_obj_mesh(mesh_path)
            from .meshing import PolyMesh

            mesh = PolyMesh(
                vertices=verts,
                faces=faces,
                face_planes=[-7] * len(faces),
                face_convex=[False] * len(faces),
            )
            v, f, pcount = metrics.mesh_stats(mesh)
            hd = metrics.hausdorff(cloud, mesh, samples=args.samples, seed=0)
            entry["layers"].append(
                {
                    "mesh": mesh_path.name,
                    "vertices": v,
                    "triangles": f,
                    "polygons": pcount,
                    "hausdorff": hd,
                }
            )
        report["buildings"].append(entry)
    out_path = Path(args.report)
    with open(out_path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    print(f"wrote {out_path}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="archlod",
        description="Consistent LOD generation for collections of architectural point clouds.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_parser(sub)

    p_synth = sub.add_parser("synth", help="generate a synthetic building collection")
    p_synth.add_argument("--scene", required=True, help=f"one of {sorted(scenes.FIXTURES)}")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.add_argument("--ascii", action="store_true", help="write ascii PLY")

    p_eval = sub.add_parser("eval", help="evaluate existing meshes against input clouds")
    p_eval.add_argument("--input", required=True, help="directory of building inputs")
    p_eval.add_argument("--meshes", required=True, help="directory of <name>_lod<k>.obj meshes")
    p_eval.add_argument("--report", required=True, help="output report JSON path")
    p_eval.add_argument("--samples", type=int, default=100_000)

    args = parser.parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "synth":
        return _cmd_synth(args)
    if args.command == "eval":
        return _cmd_eval(args)
    return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
