"""Primary plane extraction: region growing over the k-NN graph and
alpha-shape footprints."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from .geometry import (
    GeometryError,
    Plane,
    PlaneRegion,
    PointCloud,
    plane_frame,
    ring_area,
)

log = logging.getLogger(__name__)


class PlaneDetectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectParams:
    """Region-growing thresholds; ``alpha`` defaults to four times the mean
    nearest-neighbor spacing of the cloud."""

    distance_threshold: float = 0.2
    angle_threshold: float = 30.0
    min_region_size: int = 20
    alpha: Optional[float] = None
    knn: int = 16

    def __post_init__(self):
        if self.distance_threshold <= 0 or self.angle_threshold <= 0:
            raise ValueError("thresholds must be positive")
        if self.min_region_size <= 0 or self.knn < 3:
            raise ValueError("min_region_size and knn must be positive")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")


def mean_nn_spacing(cloud: PointCloud) -> float:
    """Mean nearest-neighbor distance of the cloud."""
    tree = cKDTree(cloud.points)
    d, _ = tree.query(cloud.points, k=min(2, len(cloud)))
    return float(np.mean(d[:, -1]))


def resolve_alpha(cloud: PointCloud, params: DetectParams) -> float:
    """Footprint alpha radius: explicit value or 4x the mean spacing."""
    if params.alpha is not None:
        return params.alpha
    return 4.0 * mean_nn_spacing(cloud)


def detect_planes(cloud: PointCloud, params: DetectParams) -> list[PlaneRegion]:
    """Extract primary planes by region growing.

    Seeds are visited by increasing local-plane residual; regions grow over
    the k-NN graph while points stay within the distance threshold of the
    seed plane and their normals within the angle threshold. Each region is
    refit by PCA, oriented by the majority of its inlier normals and given
    an alpha-shape footprint. Regions come back sorted by descending area.
    """
    pts = cloud.points
    nrm = cloud.normals
    n = len(pts)
    if n < params.min_region_size:
        raise PlaneDetectionError("no primary planes")
    k = min(params.knn + 1, n)
    tree = cKDTree(pts)
    nn_dist, nn_idx = tree.query(pts, k=k)
    spacing = float(np.mean(nn_dist[:, 1]))
    alpha = params.alpha if params.alpha is not None else 4.0 * spacing

    # Seed order: best local planar fit first (smallest PCA residual).
    nbr = pts[nn_idx]
    centered = nbr - nbr.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    residual = np.linalg.eigvalsh(cov)[:, 0]
    order = np.argsort(residual, kind="stable")

    cos_thr = float(np.cos(np.radians(params.angle_threshold)))
    assigned = np.full(n, -1, dtype=np.int64)
    raw_regions: list[np.ndarray] = []
    neighbors = nn_idx[:, 1:]

    for seed in order:
        if assigned[seed] >= 0:
            continue
        n_seed = nrm[seed]
        d_seed = float(n_seed @ pts[seed])
        member = np.zeros(n, dtype=bool)
        member[seed] = True
        frontier = np.asarray([seed])
        while len(frontier):
            cand = np.unique(neighbors[frontier].ravel())
            cand = cand[(assigned[cand] < 0) & ~member[cand]]
            if len(cand) == 0:
                break
            ok = (np.abs(nrm[cand] @ n_seed) >= cos_thr) & (
                np.abs(pts[cand] @ n_seed - d_seed) <= params.distance_threshold
            )
            frontier = cand[ok]
            member[frontier] = True
        idx = np.nonzero(member)[0]
        if len(idx) >= params.min_region_size:
            assigned[idx] = len(raw_regions)
            raw_regions.append(idx)

    regions: list[PlaneRegion] = []
    for idx in raw_regions:
        try:
            regions.append(_build_region(pts, nrm, idx, alpha))
        except GeometryError as exc:
            log.debug("dropping degenerate region (%d points): %s", len(idx), exc)
    if not regions:
        raise PlaneDetectionError("no primary planes")
    regions.sort(key=lambda r: -r.area)
    return regions


def _build_region(pts, nrm, idx, alpha: float) -> PlaneRegion:
    sub = pts[idx]
    centroid = sub.mean(axis=0)
    cov = np.cov((sub - centroid).T)
    w, vecs = np.linalg.eigh(cov)
    normal = vecs[:, 0]
    agree = float(np.mean(nrm[idx] @ normal > 0))
    if agree < 0.5:
        normal = -normal
        agree = 1.0 - agree
    plane = Plane.from_point_normal(centroid, normal)
    region = region_footprint(plane, sub, alpha, inliers=idx)
    return PlaneRegion(
        plane=region.plane,
        inliers=np.asarray(idx, dtype=np.int64),
        frame_origin=region.frame_origin,
        frame_u=region.frame_u,
        frame_v=region.frame_v,
        rings=region.rings,
        area=region.area,
        orientation_confidence=agree,
    )


def region_footprint(
    plane: Plane, inlier_points, alpha: float, inliers=None
) -> PlaneRegion:
    """Alpha-shape footprint of inlier points projected into the plane.

    The boundary of the 2D alpha shape (circumradius filter at radius
    ``alpha``) is lifted back to 3D; when the shape is disconnected only
    the largest component is kept.
    """
    pts = np.asarray(inlier_points, dtype=float)
    if len(pts) < 3:
        raise GeometryError("degenerate region")
    u, v = plane_frame(plane.normal)
    origin = pts.mean(axis=0)
    origin = origin - (origin @ plane.normal - plane.offset) * plane.normal
    local = np.stack([(pts - origin) @ u, (pts - origin) @ v], axis=1)
    rings = alpha_shape_rings(local, alpha)
    area = float(sum(ring_area(r) for r in rings))
    if area <= 0:
        raise GeometryError("degenerate region")
    return PlaneRegion(
        plane=plane,
        inliers=np.asarray(inliers if inliers is not None else [], dtype=np.int64),
        frame_origin=origin,
        frame_u=u,
        frame_v=v,
        rings=tuple(np.ascontiguousarray(r) for r in rings),
        area=area,
    )


def region_area(region: PlaneRegion) -> float:
    """Planar footprint area, holes subtracted."""
    return float(sum(ring_area(r) for r in region.rings))


def alpha_shape_rings(points2d: np.ndarray, alpha: float) -> list[np.ndarray]:
    """Boundary rings of the 2D alpha shape (exterior CCW, holes CW).

    Keeps Delaunay triangles with circumradius <= alpha and stitches the
    directed boundary edges into rings. Disconnected shapes are reduced to
    the largest exterior ring plus the holes it contains.
    """
    pts = np.asarray(points2d, dtype=float)
    uniq = np.unique(pts, axis=0)
    if len(uniq) < 3:
        raise GeometryError("degenerate region")
    try:
        tri = Delaunay(uniq)
    except QhullError as exc:
        raise GeometryError("degenerate region") from exc
    simplices = tri.simplices
    a = uniq[simplices[:, 0]]
    b = uniq[simplices[:, 1]]
    c = uniq[simplices[:, 2]]
    # Ensure CCW orientation so boundary edges inherit it.
    cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (
        c[:, 0] - a[:, 0]
    )
    flip = cross < 0
    simplices = simplices.copy()
    simplices[flip, 1], simplices[flip, 2] = simplices[flip, 2], simplices[flip, 1]
    area2 = np.abs(cross)
    la = np.linalg.norm(b - c, axis=1)
    lb = np.linalg.norm(a - c, axis=1)
    lc = np.linalg.norm(a - b, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        circum = la * lb * lc / (2.0 * area2)
    keep = np.isfinite(circum) & (circum <= alpha)
    if not keep.any():
        raise GeometryError("degenerate region")
    kept = simplices[keep]

    # Directed boundary edges: those whose reverse is not present.
    edges = np.concatenate([kept[:, [0, 1]], kept[:, [1, 2]], kept[:, [2, 0]]])
    edge_set = set(map(tuple, edges.tolist()))
    boundary = [e for e in edge_set if (e[1], e[0]) not in edge_set]
    nxt: dict[int, list[int]] = {}
    for s, t in sorted(boundary):
        nxt.setdefault(s, []).append(t)
    for outs in nxt.values():
        outs.sort(reverse=True)  # pop() returns the smallest target

    rings: list[np.ndarray] = []
    while nxt:
        start = min(nxt)
        ring = [start]
        cur = start
        closed = False
        while True:
            outs = nxt.get(cur)
            if not outs:
                break  # open chain: numerically broken boundary, drop it
            target = outs.pop()
            if not outs:
                del nxt[cur]
            cur = target
            if cur == start:
                closed = True
                break
            ring.append(cur)
        if closed and len(ring) >= 3:
            rings.append(uniq[np.asarray(ring)])
    if not rings:
        raise GeometryError("degenerate region")

    signed = [ring_area(r) for r in rings]
    exteriors = [i for i, s in enumerate(signed) if s > 0]
    if not exteriors:
        raise GeometryError("degenerate region")
    main = max(exteriors, key=lambda i: signed[i])
    out = [rings[main]]
    dropped = sum(signed[i] for i in exteriors if i != main)
    if dropped > 0.05 * signed[main]:
        log.debug("alpha shape: dropped %.1f%% of footprint area in secondary components",
                  100.0 * dropped / signed[main])
    for i, s in enumerate(signed):
        if s < 0 and _point_in_ring(rings[main], rings[i][0]):
            out.append(rings[i])
    return out


def _point_in_ring(ring: np.ndarray, xy) -> bool:
    from .geometry import _winding_number

    return _winding_number(ring, xy) != 0
