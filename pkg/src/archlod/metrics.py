"""Quantitative evaluation: Hausdorff distance, mesh statistics and the
structure detection rate used by the parameter ablations."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from shapely import contains_xy
from shapely.geometry import Polygon

from .geometry import PointCloud, plane_frame
from .meshing import PolyMesh, _loop_normal


class MetricsError(RuntimeError):
    pass


@dataclass
class EvalReport:
    hd_mean: float
    hd_sd: float
    n_vertices: int
    n_triangles: int
    n_polygons: int
    runtimes: dict = dc_field(default_factory=dict)
    sdr: Optional[float] = None

    def to_dict(self) -> dict:
        out = {
            "hd_mean": self.hd_mean,
            "hd_sd": self.hd_sd,
            "vertices": self.n_vertices,
            "triangles": self.n_triangles,
            "polygons": self.n_polygons,
            "runtimes": self.runtimes,
        }
        if self.sdr is not None:
            out["sdr"] = self.sdr
        return out


def sample_mesh_surface(mesh: PolyMesh, n: int, seed=0) -> np.ndarray:
    """n surface points, area-weighted across faces. Convex faces are fan
    sampled; non-convex ones fall back to in-plane rejection sampling."""
    if mesh.n_polygons == 0:
        raise MetricsError("empty mesh")
    rng = np.random.default_rng(seed)
    areas = []
    for i in range(mesh.n_polygons):
        pts = mesh.face_loop(i)
        nxt = np.roll(pts, -1, axis=0)
        areas.append(0.5 * np.linalg.norm(np.cross(pts, nxt).sum(axis=0)))
    areas = np.asarray(areas)
    total = areas.sum()
    if total <= 0:
        raise MetricsError("degenerate mesh")
    counts = rng.multinomial(n, areas / total)
    out = []
    for i, c in enumerate(counts):
        if c == 0:
            continue
        pts = mesh.face_loop(i)
        if mesh.face_convex[i] or len(pts) == 3:
            out.append(_sample_fan(pts, c, rng))
        else:
            out.append(_sample_rejection(pts, c, rng))
    return np.concatenate(out)


def _sample_fan(pts: np.ndarray, n: int, rng) -> np.ndarray:
    v0 = pts[0]
    tris = [(v0, pts[i], pts[i + 1]) for i in range(1, len(pts) - 1)]
    areas = np.asarray([0.5 * np.linalg.norm(np.cross(b - a, c - a)) for a, b, c in tris])
    if areas.sum() <= 0:
        return np.tile(v0, (n, 1))
    counts = rng.multinomial(n, areas / areas.sum())
    out = []
    for (a, b, c), k in zip(tris, counts):
        if k == 0:
            continue
        r1 = np.sqrt(rng.uniform(size=k))
        r2 = rng.uniform(size=k)
        out.append(
            (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
        )
    return np.concatenate(out) if out else np.zeros((0, 3))


def _sample_rejection(pts: np.ndarray, n: int, rng) -> np.ndarray:
    normal = _loop_normal(pts)
    u, v = plane_frame(normal)
    origin = pts[0]
    loc = np.stack([(pts - origin) @ u, (pts - origin) @ v], axis=1)
    poly = Polygon(loc)
    minx, miny, maxx, maxy = poly.bounds
    got = []
    need = n
    for _ in range(200):
        if need <= 0:
            break
        m = max(32, int(2.0 * need * (maxx - minx) * (maxy - miny) / max(poly.area, 1e-12)))
        cand = rng.uniform([minx, miny], [maxx, maxy], size=(m, 2))
        ok = contains_xy(poly, cand[:, 0], cand[:, 1])
        sel = cand[ok][:need]
        got.append(sel)
        need -= len(sel)
    xy = np.concatenate(got) if got else np.zeros((0, 2))
    return origin + xy[:, :1] * u + xy[:, 1:2] * v


def hausdorff_directed(a: np.ndarray, b: np.ndarray) -> float:
    """max over a of the distance to the nearest point of b."""
    d, _ = cKDTree(b).query(a, k=1)
    return float(np.max(d))


def hausdorff(reference: PointCloud, mesh: PolyMesh, samples: int = 100_000, seed=0) -> float:
    """Symmetric point-set Hausdorff distance between the reference cloud
    and surface samples of the mesh, normalized by the reference bounding
    box diagonal."""
    if samples < 10_000:
        raise ValueError("samples must be >= 10000")
    if mesh.n_polygons == 0:
        raise MetricsError("empty mesh")
    ref = reference.points
    surf = sample_mesh_surface(mesh, samples, seed=seed)
    diag = float(np.linalg.norm(ref.max(axis=0) - ref.min(axis=0)))
    if diag <= 0:
        raise MetricsError("degenerate reference cloud")
    d = max(hausdorff_directed(ref, surf), hausdorff_directed(surf, ref))
    return d / diag


def mesh_stats(mesh: PolyMesh) -> tuple[int, int, int]:
    """(#vertices, #triangles after fan triangulation, #polygons)."""
    used = np.unique(np.concatenate([np.asarray(f) for f in mesh.faces]))
    return len(used), mesh.triangle_count, mesh.n_polygons


def _plane_set(segment) -> frozenset:
    planes = getattr(segment, "planes", segment)
    return frozenset(int(p) for p in planes)


def sdr(found: Sequence, reference: Sequence, jaccard_threshold: float = 0.5) -> float:
    """Structure detection rate: percentage of reference segments matched
    by a found segment with plane-set Jaccard >= threshold (greedy
    best-first matching)."""
    if not reference:
        raise MetricsError("reference segment list is empty")
    found_sets = [_plane_set(s) for s in found]
    ref_sets = [_plane_set(s) for s in reference]
    pairs = []
    for i, f in enumerate(found_sets):
        for j, r in enumerate(ref_sets):
            union = len(f | r)
            jac = len(f & r) / union if union else 0.0
            if jac >= jaccard_threshold:
                pairs.append((jac, i, j))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_f: set = set()
    used_r: set = set()
    matched = 0
    for jac, i, j in pairs:
        if i in used_f or j in used_r:
            continue
        used_f.add(i)
        used_r.add(j)
        matched += 1
    return 100.0 * matched / len(ref_sets)


def match_planes(
    truth_planes: Sequence,
    regions: Sequence,
    max_angle_deg: float = 5.0,
    max_offset: float = 0.25,
) -> np.ndarray:
    """Optimal one-to-one matching of ground-truth planes to detected
    regions (angle/offset gate, then Hungarian assignment on footprint
    centroid distance). Returns the region index per truth plane, -1 when
    unmatched."""
    nt, nr = len(truth_planes), len(regions)
    if nt == 0 or nr == 0:
        return np.full(nt, -1, dtype=np.int64)
    BIG = 1e9
    cost = np.full((nt, nr), BIG)
    cos_thr = np.cos(np.radians(max_angle_deg))
    for i, tp in enumerate(truth_planes):
        tn = np.asarray(tp.plane.normal)
        toff = float(tp.plane.offset)
        tc = np.asarray(tp.polygon_world).mean(axis=0)
        for j, reg in enumerate(regions):
            if float(tn @ reg.plane.normal) < cos_thr:
                continue
            if abs(toff - reg.plane.offset) > max_offset:
                continue
            c = np.concatenate(reg.footprint_vertices()).mean(axis=0)
            cost[i, j] = float(np.linalg.norm(tc - c))
    rows, cols = linear_sum_assignment(cost)
    out = np.full(nt, -1, dtype=np.int64)
    for i, j in zip(rows, cols):
        if cost[i, j] < BIG:
            out[i] = j
    return out
