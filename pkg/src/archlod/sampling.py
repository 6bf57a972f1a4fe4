"""Uniform point sampling on polygons and plane-region footprints."""

from __future__ import annotations

import numpy as np
from shapely import contains_xy
from shapely.geometry import Polygon

from .geometry import PlaneRegion, ring_area


class SamplingError(RuntimeError):
    pass


def region_to_shapely(region: PlaneRegion) -> Polygon:
    """Footprint as a shapely polygon in the region's local frame."""
    ext = None
    holes = []
    for ring in region.rings:
        if ring_area(ring) > 0:
            ext = ring
        else:
            holes.append(ring)
    if ext is None:
        raise SamplingError("footprint has no exterior ring")
    return Polygon(ext, holes)


def sample_polygon(poly: Polygon, n: int, rng: np.random.Generator) -> np.ndarray:
    """n uniform 2D points inside the polygon (rejection from the bbox)."""
    if n <= 0:
        return np.zeros((0, 2))
    minx, miny, maxx, maxy = poly.bounds
    span = max((maxx - minx) * (maxy - miny), 1e-12)
    out = []
    got = 0
    for _ in range(200):
        if got >= n:
            break
        m = max(64, int(1.8 * (n - got) * span / max(poly.area, 1e-12)))
        cand = rng.uniform([minx, miny], [maxx, maxy], size=(m, 2))
        ok = contains_xy(poly, cand[:, 0], cand[:, 1])
        sel = cand[ok][: n - got]
        out.append(sel)
        got += len(sel)
    if got < n:
        raise SamplingError("polygon sampling failed to converge")
    return np.concatenate(out)


def sample_region(region: PlaneRegion, n: int, rng: np.random.Generator) -> np.ndarray:
    """n uniform 3D points on a region footprint."""
    xy = sample_polygon(region_to_shapely(region), n, rng)
    return region.to_world(xy)
