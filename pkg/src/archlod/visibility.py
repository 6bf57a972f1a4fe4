"""Voxel visibility analysis: ray fans from voxel centroids, per-voxel
plane Hitlists, voxel validation and plane-group formation."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .geometry import AABB, PlaneRegion, Ray, bounding_box

# A Hitlist is an integer count vector with one entry per plane.
Hitlist = np.ndarray

BBOX_INFLATION = 0.02  # fraction per side, keeps centroids off footprint planes


class VisibilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class VisParams:
    """Voxel grid resolution and ray count per voxel."""

    n_s: int = 150
    n_r: int = 100

    def __post_init__(self):
        if self.n_s < 2:
            raise ValueError("n_s must be >= 2")
        if self.n_r < 4:
            raise ValueError("n_r must be >= 4")


def ray_directions(n_r: int) -> np.ndarray:
    """n_r horizontal unit directions (cos/sin of 2*pi*k/n_r)."""
    theta = 2.0 * np.pi * np.arange(n_r) / n_r
    return np.stack([np.cos(theta), np.sin(theta), np.zeros(n_r)], axis=1)


def emit_rays(centroid, n_r: int) -> list[Ray]:
    """Uniform fan of n_r rays from a voxel centroid, sampled on the XY plane."""
    if n_r < 4:
        raise ValueError("n_r must be >= 4")
    c = np.asarray(centroid, dtype=float)
    return [Ray(c, d) for d in ray_directions(n_r)]


def validate_voxel(hitlist: Hitlist, n_r: int) -> bool:
    """A voxel is valid when its total valid hits reach half the emitted
    rays; strictly fewer than n_r/2 invalidates it."""
    return 2 * int(np.sum(hitlist)) >= n_r


@dataclass
class VoxelField:
    """Sparse uniform voxel grid over the (inflated) building bounding box.

    Only voxels whose centroid produced at least one ray hit are stored.
    ``plane_ids`` maps hitlist columns to indices into the original region
    list (they differ when the field was built on a subset of the planes).
    """

    bbox: AABB
    n_s: int
    n_r: int
    plane_ids: np.ndarray  # (C,) global plane index per hitlist column
    ids: np.ndarray  # (N,) linear voxel ids, sorted
    hitlists: np.ndarray  # (N, C) uint16 valid-hit counts
    valid: np.ndarray  # (N,) bool
    _row_of: dict = dc_field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._row_of = {int(v): i for i, v in enumerate(self.ids)}

    # -- grid geometry ------------------------------------------------------

    @property
    def voxel_size(self) -> np.ndarray:
        return self.bbox.extent / self.n_s

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.voxel_size))

    @property
    def edge_length(self) -> float:
        return float(np.mean(self.voxel_size))

    def id_to_ijk(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        iz = ids % self.n_s
        iy = (ids // self.n_s) % self.n_s
        ix = ids // (self.n_s * self.n_s)
        return np.stack([ix, iy, iz], axis=-1)

    def ijk_to_id(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.int64)
        return (ijk[..., 0] * self.n_s + ijk[..., 1]) * self.n_s + ijk[..., 2]

    def centroids(self, ids) -> np.ndarray:
        ijk = self.id_to_ijk(ids)
        return self.bbox.min + (ijk + 0.5) * self.voxel_size

    # -- hitlist access ------------------------------------------------------

    def hitlist(self, voxel_id: int) -> Hitlist:
        row = self._row_of.get(int(voxel_id))
        if row is None:
            return np.zeros(len(self.plane_ids), dtype=np.uint16)
        return self.hitlists[row]

    def rows_for(self, voxel_ids) -> np.ndarray:
        return np.asarray([self._row_of[int(v)] for v in np.asarray(voxel_ids).ravel()])

    @property
    def valid_ids(self) -> np.ndarray:
        return self.ids[self.valid]

    def column_of(self, global_plane_ids) -> np.ndarray:
        """Map global plane indices to hitlist columns (-1 when absent)."""
        lookup = {int(p): c for c, p in enumerate(self.plane_ids)}
        return np.asarray([lookup.get(int(p), -1) for p in np.atleast_1d(global_plane_ids)])

    # -- construction --------------------------------------------------------

    @staticmethod
    def grid_axes(bbox: AABB, n_s: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        size = bbox.extent / n_s
        xs = bbox.min[0] + (np.arange(n_s) + 0.5) * size[0]
        ys = bbox.min[1] + (np.arange(n_s) + 0.5) * size[1]
        zs = bbox.min[2] + (np.arange(n_s) + 0.5) * size[2]
        return xs, ys, zs

    @classmethod
    def build(
        cls,
        regions: Sequence[PlaneRegion],
        params: VisParams,
        reversed_mask=None,
        active=None,
        bbox: Optional[AABB] = None,
    ) -> "VoxelField":
        """Shoot the ray fans from every voxel centroid and collect Hitlists.

        ``reversed_mask`` flips the interior-side test per plane (alcove
        pass); ``active`` restricts the intersected footprints to a subset of
        the regions while keeping global plane indices; ``bbox`` overrides
        the grid extent (pass the full-building box when building on a
        subset so voxel ids stay comparable between passes).
        """
        n_all = len(regions)
        active_ids = (
            np.arange(n_all, dtype=np.int64)
            if active is None
            else np.asarray(sorted(int(a) for a in active), dtype=np.int64)
        )
        used = [regions[i] for i in active_ids]
        if not used:
            raise VisibilityError("building interior not found")
        if bbox is None:
            bbox = bounding_box(used).inflated(BBOX_INFLATION)
        rev_all = (
            np.zeros(n_all, dtype=bool) if reversed_mask is None else np.asarray(reversed_mask, bool)
        )
        rev = rev_all[active_ids]
        pack = kernels.RegionPack.build(used)
        n_s, n_r = params.n_s, params.n_r
        xs, ys, zs = cls.grid_axes(bbox, n_s)
        dirs = ray_directions(n_r)

        all_ids: list[np.ndarray] = []
        all_counts: list[np.ndarray] = []
        use_slices = n_r % 2 == 0
        dirs2 = dirs[: n_r // 2, :2] if use_slices else None
        for iz, z in enumerate(zs):
            if use_slices:
                seg_a, seg_e, seg_p = kernels.slice_segments(pack, z)
                if len(seg_a) == 0:
                    continue
                counts, anyhit = kernels.slice_counts(
                    xs, ys, z, dirs2, seg_a, seg_e, seg_p, pack, rev
                )
            else:
                gx, gy = np.meshgrid(xs, ys, indexing="ij")
                origins = np.stack(
                    [gx.ravel(), gy.ravel(), np.full(n_s * n_s, z)], axis=1
                )
                hit, _ = kernels.first_hits(origins, dirs, pack)
                validm = kernels.interior_side_hits(origins, hit, pack, rev)
                counts = np.zeros((n_s * n_s, pack.n_regions), np.uint16)
                vm, vk = np.nonzero(validm)
                np.add.at(counts, (vm, hit[vm, vk]), 1)
                anyhit = (hit >= 0).any(axis=1)
            rows = np.nonzero(anyhit)[0]
            if len(rows) == 0:
                continue
            all_ids.append(rows.astype(np.int64) * n_s + iz)
            all_counts.append(counts[rows])

        if all_ids:
            ids = np.concatenate(all_ids)
            hitmat = np.concatenate(all_counts)
            order = np.argsort(ids, kind="stable")
            ids = ids[order]
            hitmat = np.ascontiguousarray(hitmat[order])
        else:
            ids = np.zeros(0, dtype=np.int64)
            hitmat = np.zeros((0, len(active_ids)), dtype=np.uint16)
        totals = hitmat.sum(axis=1, dtype=np.int64)
        valid = 2 * totals >= n_r
        return cls(
            bbox=bbox,
            n_s=n_s,
            n_r=n_r,
            plane_ids=active_ids,
            ids=ids,
            hitlists=hitmat,
            valid=valid,
        )


def compute_hitlist(centroid, rays: Sequence[Ray], regions: Sequence[PlaneRegion]) -> Hitlist:
    """Valid-hit counts per plane for one voxel centroid.

    For each ray the nearest footprint hit is found; it counts iff the
    centroid lies strictly on the interior side of that plane.
    """
    counts = np.zeros(len(regions), dtype=np.int64)
    if not regions or not rays:
        return counts
    pack = kernels.RegionPack.build(regions)
    dirs = np.asarray([r.direction for r in rays])
    origins = np.asarray([r.origin for r in rays])
    if np.all(origins == origins[0]):
        hit, _ = kernels.first_hits(origins[:1], dirs, pack)
        hits = hit[0]
    else:
        hit, _ = kernels.first_hits(origins, dirs, pack)
        hits = hit[np.arange(len(rays)), np.arange(len(rays))]
    c = np.asarray(centroid, dtype=float)
    sd = pack.normals @ c - pack.offsets
    for h in hits:
        if h >= 0 and sd[h] < -kernels.SIDE_TOL:
            counts[h] += 1
    return counts


@dataclass(frozen=True)
class PlaneGroup:
    """Set of planes validly seen from a set of voxels (global plane ids)."""

    planes: frozenset
    voxels: np.ndarray
    plane_hits: np.ndarray  # (n_planes_global,) total valid hits per plane

    def __len__(self) -> int:
        return len(self.voxels)


def form_plane_groups(field: VoxelField, n_planes_global: Optional[int] = None) -> list[PlaneGroup]:
    """One group per valid voxel; identical plane sets coalesced.

    Groups are returned in lexicographic order of their plane-membership
    pattern, which fixes ids for everything downstream.
    """
    if n_planes_global is None:
        n_planes_global = int(field.plane_ids.max()) + 1 if len(field.plane_ids) else 0
    vrows = np.nonzero(field.valid)[0]
    if len(vrows) == 0:
        raise VisibilityError("building interior not found")
    hits = field.hitlists[vrows]
    pattern = hits > 0
    uniq, inverse = np.unique(pattern, axis=0, return_inverse=True)
    groups = []
    for g in range(len(uniq)):
        members = vrows[inverse == g]
        cols = np.nonzero(uniq[g])[0]
        if len(cols) == 0:
            continue  # valid voxel with zero-count pattern cannot occur, guard anyway
        plane_hits = np.zeros(n_planes_global, dtype=np.int64)
        plane_hits[field.plane_ids] = field.hitlists[members].sum(axis=0, dtype=np.int64)
        groups.append(
            PlaneGroup(
                planes=frozenset(int(field.plane_ids[c]) for c in cols),
                voxels=np.sort(field.ids[members]),
                plane_hits=plane_hits,
            )
        )
    if not groups:
        raise VisibilityError("building interior not found")
    return groups
