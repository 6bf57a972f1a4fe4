"""End-to-end orchestration: ingest building files, run all stages and
export per-layer meshes plus a machine-readable run report."""

from __future__ import annotations

import hashlib
import json
import logging
import pickle
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import coanalysis as co
from . import fileio, kernels, metrics
from .config import Config
from .geometry import AABB, PointCloud
from .meshing import (
    MeshExtractionError,
    PolyMesh,
    bsp_partition,
    extract_mesh,
    label_cells,
    largest_interior_component,
)
from .planes import DetectParams, detect_planes, resolve_alpha
from .sampling import sample_region
from .segments import Segment, assign_planes, segment_building
from .visibility import VisParams

log = logging.getLogger(__name__)

CACHE_VERSION = 1


@dataclass
class BuildingModel:
    """Everything the collection stages need from one building."""

    name: str
    cloud: PointCloud
    regions: list
    segments: list
    bbox: AABB
    n_s: int
    alpha: float
    warnings: list = dc_field(default_factory=list)

    @property
    def voxel_size(self) -> np.ndarray:
        return self.bbox.extent / self.n_s

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.voxel_size))

    @property
    def edge_length(self) -> float:
        return float(np.mean(self.voxel_size))

    @property
    def orphan_eps(self) -> float:
        # one voxel edge, widened to half the footprint alpha when the
        # sampling is coarser than the grid
        return max(self.edge_length, 0.5 * self.alpha)


@dataclass
class LayerOutput:
    layer: int
    plane_ids: list
    mesh: Optional[PolyMesh]
    hausdorff: Optional[float]
    error: Optional[str] = None


@dataclass
class RunResult:
    report: dict
    models: list
    meshes: dict  # (building name, layer) -> PolyMesh
    context: Optional[co.CollectionContext]
    lod0: Optional[co.Lod0Result]
    failures: list

    @property
    def ok(self) -> bool:
        return len(self.models) > 0


def _stage_cache_key(cloud: PointCloud, config: Config) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(cloud.points).tobytes())
    h.update(np.ascontiguousarray(cloud.normals).tobytes())
    h.update(repr((config.detect, config.vis, config.agg, CACHE_VERSION)).encode())
    return h.hexdigest()


def process_building(name: str, cloud: PointCloud, config: Config) -> BuildingModel:
    """Stage A for one building: plane detection, visibility, segments."""
    cache_path = None
    if config.cache_dir:
        cache_dir = Path(config.cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        cache_path = cache_dir / f"{_stage_cache_key(cloud, config)}.pkl"
        if cache_path.exists():
            with open(cache_path, "rb") as fh:
                payload = pickle.load(fh)
            return BuildingModel(name=name, cloud=cloud, **payload)

    alpha = resolve_alpha(cloud, config.detect)
    params = replace(config.detect, alpha=alpha)
    regions = detect_planes(cloud, params)
    warnings = [
        f"plane {i}: low orientation confidence ({reg.orientation_confidence:.2f})"
        for i, reg in enumerate(regions)
        if reg.orientation_confidence < 0.6
    ]
    seg = segment_building(regions, config.agg, config.vis)
    segments = assign_planes(seg.segments, seg.field)
    warnings.extend(seg.warnings)
    payload = {
        "regions": regions,
        "segments": segments,
        "bbox": seg.field.bbox,
        "n_s": config.vis.n_s,
        "alpha": alpha,
        "warnings": warnings,
    }
    if cache_path is not None:
        with open(cache_path, "wb") as fh:
            pickle.dump(payload, fh)
    return BuildingModel(name=name, cloud=cloud, **payload)


def _segment_points(model: BuildingModel, segment: Segment, n: int, rng) -> np.ndarray:
    """Surface samples of a segment, area-weighted over its plane
    footprints (each plane gets at least a small share)."""
    planes = sorted(segment.planes)
    areas = np.asarray([model.regions[p].area for p in planes])
    weights = areas / areas.sum()
    counts = np.maximum((weights * n).astype(int), 20)
    pts = [sample_region(model.regions[p], int(c), rng) for p, c in zip(planes, counts)]
    return np.concatenate(pts)


def build_context(models: list, config: Config) -> co.CollectionContext:
    buildings = []
    for model in models:
        descs = []
        areas = []
        volumes = []
        voxel_sets = []
        for k, seg in enumerate(model.segments):
            rng = np.random.default_rng([config.co.seed, k])
            pts = _segment_points(model, seg, config.co.segment_samples, rng)
            descs.append(co.descriptor_from_points(pts, config.co, seed=[config.co.seed, 1, k]))
            areas.append(sum(model.regions[p].area for p in seg.planes))
            volumes.append(len(seg.voxels) * model.voxel_volume)
            voxel_sets.append(seg.voxels)
        buildings.append(
            co.BuildingSegments(
                name=model.name,
                voxel_sets=voxel_sets,
                areas=np.asarray(areas),
                volumes=np.asarray(volumes),
                descriptors=descs,
            )
        )
    return co.CollectionContext.from_buildings(buildings, eta=config.co.eta)


def extract_layer(
    model: BuildingModel, layers: np.ndarray, k: int, config: Config
) -> LayerOutput:
    """BSP + labeling + largest component + stitching for one layer."""
    plane_ids = sorted(
        co.layer_planes(model.regions, model.segments, layers, k, model.orphan_eps)
    )
    if not plane_ids:
        return LayerOutput(layer=k, plane_ids=[], mesh=None, hausdorff=None, error="no planes")
    try:
        planes = [model.regions[i].plane for i in plane_ids]
        areas = [model.regions[i].area for i in plane_ids]
        cells = bsp_partition(model.bbox, planes, areas=areas)
        vote_regions = (
            model.regions
            if config.label_all_planes
            else [model.regions[i] for i in plane_ids]
        )
        labels = label_cells(cells, vote_regions, config.vis.n_r)
        component = largest_interior_component(cells, labels)
        mesh = extract_mesh(component)
        mesh.face_planes = [plane_ids[p] if p >= 0 else p for p in mesh.face_planes]
        hd = metrics.hausdorff(model.cloud, mesh, samples=config.hd_samples, seed=config.seed)
        return LayerOutput(layer=k, plane_ids=plane_ids, mesh=mesh, hausdorff=hd)
    except (MeshExtractionError, metrics.MetricsError) as exc:
        return LayerOutput(layer=k, plane_ids=plane_ids, mesh=None, hausdorff=None, error=str(exc))


def run_buildings(named_clouds: list, config: Config) -> RunResult:
    """Full pipeline over in-memory clouds (list of (name, PointCloud))."""
    t_start = time.perf_counter()
    models: list[BuildingModel] = []
    failures: list[dict] = []
    timings: dict = {"buildings": {}}

    def stage_a(item):
        name, cloud = item
        t0 = time.perf_counter()
        model = process_building(name, cloud, config)
        return model, time.perf_counter() - t0

    results = _parallel_map(stage_a, named_clouds, config.threads)
    for (name, _), res in zip(named_clouds, results):
        if isinstance(res, Exception):
            failures.append({"building": name, "stage": "segments", "error": str(res)})
            log.warning("building %s failed in segmentation: %s", name, res)
        else:
            model, dt = res
            models.append(model)
            timings["buildings"][name] = {"t_segments": dt}

    report: dict = {
        "schema": "archlod-run-report/1",
        "config": config.to_dict(),
        "kernel_backend": kernels.backend(),
        "buildings": [],
        "failures": failures,
    }
    if not models:
        report["timings"] = {"total": time.perf_counter() - t_start}
        return RunResult(report, [], {}, None, None, failures)

    t0 = time.perf_counter()
    ctx = build_context(models, config)
    lod0 = co.optimize_lod0(ctx, config.co)
    layer_assignment = co.assign_layers(ctx, lod0, config.co)
    t_co = time.perf_counter() - t0

    meshes: dict = {}
    building_entries = []

    def stage_c(args):
        b, model = args
        t1 = time.perf_counter()
        outputs = [
            extract_layer(model, layer_assignment[b], k, config)
            for k in range(config.co.l_n)
        ]
        return outputs, time.perf_counter() - t1

    mesh_results = _parallel_map(stage_c, list(enumerate(models)), config.threads)
    for b, (model, res) in enumerate(zip(models, mesh_results)):
        entry = {
            "name": model.name,
            "n_points": len(model.cloud),
            "n_planes": len(model.regions),
            "n_segments": len(model.segments),
            "segments": [
                {
                    "planes": sorted(int(p) for p in seg.planes),
                    "kind": seg.kind,
                    "voxels": int(len(seg.voxels)),
                    "layer": int(layer_assignment[b][k]),
                    "in_lod0": bool(lod0.selected[b][k]),
                }
                for k, seg in enumerate(model.segments)
            ],
            "fidelity": lod0.fidelity[b],
            "warnings": list(model.warnings),
            "layers": [],
        }
        if isinstance(res, Exception):
            failures.append({"building": model.name, "stage": "mesh", "error": str(res)})
            building_entries.append(entry)
            continue
        outputs, dt = res
        timings["buildings"].setdefault(model.name, {})["t_mesh"] = dt
        for out in outputs:
            layer_entry = {
                "layer": out.layer,
                "n_planes": len(out.plane_ids),
                "plane_ids": [int(i) for i in out.plane_ids],
            }
            if out.mesh is not None:
                v, f, p = metrics.mesh_stats(out.mesh)
                layer_entry.update(
                    {
                        "vertices": v,
                        "triangles": f,
                        "polygons": p,
                        "hausdorff": out.hausdorff,
                        "volume": out.mesh.volume(),
                        "obj": f"{model.name}_lod{out.layer}.obj",
                    }
                )
                meshes[(model.name, out.layer)] = out.mesh
            else:
                layer_entry["error"] = out.error
                entry["warnings"].append(f"layer {out.layer}: {out.error}")
            entry["layers"].append(layer_entry)
        building_entries.append(entry)

    report["buildings"] = building_entries
    report["collection"] = {
        "energy": lod0.energy,
        "fidelity": list(lod0.fidelity),
        "n_buildings": len(models),
    }
    timings["t_coanalysis"] = t_co
    timings["total"] = time.perf_counter() - t_start
    report["timings"] = timings
    return RunResult(report, models, meshes, ctx, lod0, failures)


def _parallel_map(fn, items, threads: int):
    """Map with per-item exception capture, optionally threaded."""
    if threads <= 1 or len(items) <= 1:
        out = []
        for it in items:
            try:
                out.append(fn(it))
            except Exception as exc:  # noqa: BLE001 - per-building isolation
                out.append(exc)
        return out
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, it) for it in items]
        out = []
        for fut in futures:
            try:
                out.append(fut.result())
            except Exception as exc:  # noqa: BLE001
                out.append(exc)
        return out


def write_outputs(result: RunResult, output_dir) -> None:
    """Write meshes, the similarity matrix and the JSON report."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for (name, layer), mesh in sorted(result.meshes.items()):
        fileio.write_obj(out / f"{name}_lod{layer}.obj", mesh)
    if result.context is not None:
        export_similarity_csv(result.context, out / "similarity.csv")
        result.report.setdefault("collection", {})["similarity_csv"] = "similarity.csv"
    with open(out / "report.json", "w") as fh:
        json.dump(result.report, fh, indent=1, sort_keys=True)


def export_similarity_csv(ctx: co.CollectionContext, path) -> None:
    names = [f"{ctx.buildings[b].name}/seg{k}" for b, k in ctx.labels]
    lines = ["segment," + ",".join(names)]
    for i, row in enumerate(ctx.sim):
        lines.append(names[i] + "," + ",".join(f"{v:.6f}" for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def run(config: Config) -> RunResult:
    """File-based entry point: ingest every building file in input_dir,
    process the collection and write outputs to output_dir."""
    if not config.input_dir:
        raise ValueError("config.input_dir is required")
    in_dir = Path(config.input_dir)
    files = sorted(
        [p for p in in_dir.glob("*") if p.suffix.lower() in (".ply", ".obj")]
    )
    named = []
    failures = []
    for path in files:
        try:
            named.append((path.stem, fileio.ingest(path, config.mesh_density, seed=config.seed)))
        except Exception as exc:  # noqa: BLE001 - per-file isolation
            failures.append({"building": path.stem, "stage": "ingest", "error": str(exc)})
            log.warning("skipping %s: %s", path.name, exc)
    result = run_buildings(named, config)
    result.report["failures"] = failures + result.report.get("failures", [])
    result.failures[:0] = failures
    if config.output_dir:
        write_outputs(result, config.output_dir)
    return result
