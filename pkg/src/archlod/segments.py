"""Aggregation of plane-groups into structural segments.

Implements the two-pass scheme: small planes are temporarily inverted so
concave recesses (alcoves) become enclosable volumes, then the remaining
planes are segmented as closed structures. A final assignment step makes
the plane-to-segment mapping disjoint.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field as dc_field
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import PlaneRegion, bounding_box
from .visibility import (
    BBOX_INFLATION,
    PlaneGroup,
    VisParams,
    VisibilityError,
    VoxelField,
    form_plane_groups,
)

log = logging.getLogger(__name__)

ALCOVE = "alcove"
CLOSED = "closed"

# A pass-1 group counts as an alcove only if some voxel's valid-hit share
# clears the half mark by this margin (see segment_building).
ALCOVE_ENCLOSURE = 0.55


@dataclass(frozen=True)
class AggParams:
    """Aggregation thresholds; the overlap ratio is fixed by the scheme."""

    a_epsilon: float = 80.0
    overlap_ratio: float = 0.5

    def __post_init__(self):
        if self.a_epsilon <= 0:
            raise ValueError("a_epsilon must be positive")
        if self.overlap_ratio != 0.5:
            raise ValueError("overlap_ratio is fixed at 0.5")


@dataclass
class Segment:
    """An aggregated plane-group enclosing a coherent sub-volume."""

    planes: frozenset
    voxels: np.ndarray  # sorted linear voxel ids (grid of the building bbox)
    kind: str
    plane_hits: np.ndarray  # (n_planes_global,) valid hits per plane over voxels

    def __post_init__(self):
        if not self.planes or len(self.voxels) == 0:
            raise ValueError("segment needs non-empty planes and voxels")
        if self.kind not in (ALCOVE, CLOSED):
            raise ValueError(f"unknown segment kind {self.kind!r}")

    @property
    def voxel_count(self) -> int:
        return len(self.voxels)


def hsum(planes: Iterable[int], voxel_ids, field: VoxelField) -> int:
    """Total valid hits of a plane set over a voxel set."""
    plane_list = sorted(set(int(p) for p in planes))
    if not plane_list or len(np.atleast_1d(voxel_ids)) == 0:
        return 0
    cols = field.column_of(plane_list)
    cols = cols[cols >= 0]
    if len(cols) == 0:
        return 0
    rows = field.rows_for(voxel_ids)
    return int(field.hitlists[rows][:, cols].sum(dtype=np.int64))


def can_merge(g_a: PlaneGroup, g_b: PlaneGroup, field: VoxelField) -> bool:
    """Both groups must place more than half of their hits on shared planes."""
    shared = g_a.planes & g_b.planes
    if not shared:
        return False
    inter_a = hsum(shared, g_a.voxels, field)
    inter_b = hsum(shared, g_b.voxels, field)
    return 2 * inter_a > hsum(g_a.planes, g_a.voxels, field) and 2 * inter_b > hsum(
        g_b.planes, g_b.voxels, field
    )


def _can_merge_cached(a: PlaneGroup, b: PlaneGroup) -> bool:
    # plane_hits is additive over voxels, so cached vectors reproduce hsum.
    shared = sorted(a.planes & b.planes)
    if not shared:
        return False
    tot_a = int(a.plane_hits[sorted(a.planes)].sum())
    tot_b = int(b.plane_hits[sorted(b.planes)].sum())
    return 2 * int(a.plane_hits[shared].sum()) > tot_a and 2 * int(
        b.plane_hits[shared].sum()
    ) > tot_b


def _group_adjacency(groups: Sequence[PlaneGroup], field: VoxelField) -> set[tuple[int, int]]:
    """Pairs of groups whose voxel sets contain 26-neighbor voxel pairs."""
    n = field.n_s
    label = np.full(n * n * n, -1, dtype=np.int32)
    for gid, g in enumerate(groups):
        label[g.voxels] = gid
    occupied = np.concatenate([g.voxels for g in groups])
    ijk = field.id_to_ijk(occupied)
    pairs: set[tuple[int, int]] = set()
    offsets = [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) > (0, 0, 0)
    ]
    own = label[occupied]
    for off in offsets:
        nb = ijk + np.asarray(off)
        ok = np.all((nb >= 0) & (nb < n), axis=1)
        if not ok.any():
            continue
        nb_ids = field.ijk_to_id(nb[ok])
        other = label[nb_ids]
        mine = own[ok]
        diff = (other >= 0) & (other != mine)
        for a, b in zip(mine[diff], other[diff]):
            pairs.add((min(int(a), int(b)), max(int(a), int(b))))
    return pairs


def aggregate(
    groups: Sequence[PlaneGroup],
    field: VoxelField,
    rng: Optional[np.random.Generator] = None,
) -> list[PlaneGroup]:
    """Merge adjacent plane-groups to a fixed point of the overlap test.

    Processing order is deterministic (sorted candidate pairs); ``rng``
    shuffles the initial queue, which exists to let tests verify that the
    final partition does not depend on merge order.
    """
    if not groups:
        return []
    alive: dict[int, PlaneGroup] = {i: g for i, g in enumerate(groups)}
    neighbors: dict[int, set[int]] = {i: set() for i in alive}
    for a, b in _group_adjacency(groups, field):
        neighbors[a].add(b)
        neighbors[b].add(a)
    queue = deque(sorted((a, b) for a in neighbors for b in neighbors[a] if a < b))
    if rng is not None:
        items = list(queue)
        rng.shuffle(items)
        queue = deque(items)
    next_id = len(groups)
    while queue:
        a, b = queue.popleft()
        if a not in alive or b not in alive:
            continue
        ga, gb = alive[a], alive[b]
        if not _can_merge_cached(ga, gb):
            continue
        merged = PlaneGroup(
            planes=ga.planes | gb.planes,
            voxels=np.sort(np.concatenate([ga.voxels, gb.voxels])),
            plane_hits=ga.plane_hits + gb.plane_hits,
        )
        nbrs = (neighbors[a] | neighbors[b]) - {a, b}
        del alive[a], alive[b], neighbors[a], neighbors[b]
        alive[next_id] = merged
        neighbors[next_id] = set()
        for nb in sorted(nbrs):
            if nb in alive:
                neighbors[next_id].add(nb)
                neighbors[nb].add(next_id)
                queue.append((min(nb, next_id), max(nb, next_id)))
        next_id += 1
    return [alive[k] for k in sorted(alive)]


@dataclass
class SegmentationResult:
    segments: list[Segment]
    field: VoxelField  # closed-pass field (full-building grid)
    reversed_planes: frozenset
    consumed_planes: frozenset
    warnings: list[str] = dc_field(default_factory=list)


def _reversed_share(group: PlaneGroup, reversed_ids: frozenset) -> float:
    rev = sorted(group.planes & reversed_ids)
    if not rev:
        return 0.0
    total = int(group.plane_hits[sorted(group.planes)].sum())
    return int(group.plane_hits[rev].sum()) / max(total, 1)


def _max_hit_share(group: PlaneGroup, field: VoxelField) -> float:
    """Largest per-voxel valid-hit fraction within the group."""
    rows = field.rows_for(group.voxels)
    totals = field.hitlists[rows].sum(axis=1, dtype=np.int64)
    return float(totals.max()) / field.n_r


def segment_building(
    regions: Sequence[PlaneRegion],
    params: AggParams,
    vis: VisParams,
) -> SegmentationResult:
    """Two-pass structural segmentation of one building.

    Pass 1 inverts every plane with area below ``a_epsilon`` and keeps the
    aggregated groups that contain at least one inverted plane (alcoves).
    Inverted planes claimed by an alcove are removed; pass 2 segments the
    remainder with original orientations. Voxel ids of both passes live on
    the same full-building grid.
    """
    n = len(regions)
    reversed_ids = frozenset(i for i, r in enumerate(regions) if r.area < params.a_epsilon)
    bbox = bounding_box(regions).inflated(BBOX_INFLATION)
    warnings: list[str] = []

    alcove_segments: list[Segment] = []
    consumed: set[int] = set()
    if reversed_ids:
        rev_mask = np.zeros(n, dtype=bool)
        rev_mask[list(reversed_ids)] = True
        field1 = VoxelField.build(regions, vis, reversed_mask=rev_mask, bbox=bbox)
        try:
            groups1 = form_plane_groups(field1, n_planes_global=n)
        except VisibilityError:
            groups1 = []
        # The inversion pass exists to extract alcoves: keep only voxel
        # groups whose hits are carried mostly by inverted planes (cavity
        # voxels). Groups dominated by upright planes belong to closed
        # structures and are re-discovered by pass 2; aggregating them here
        # would let single-ray leaks through footprint seams chain the
        # cavity into the main structure. Shell groups are dropped too: a
        # plane subtends half the ray fan from zero distance, so voxels
        # hugging an inverted wall validate right at the half mark without
        # being enclosed by anything. Real cavities spread their hits over
        # several planes and always contain non-hugging voxels.
        groups1 = [
            g
            for g in groups1
            if len(g.planes) >= 2
            and _reversed_share(g, reversed_ids) > 0.5
            and not _is_shell_group(g, field1, regions)
        ]
        if groups1:
            merged1 = aggregate(groups1, field1)
            pass1 = [
                Segment(planes=g.planes, voxels=g.voxels, kind=ALCOVE, plane_hits=g.plane_hits)
                for g in merged1
            ]
            pass1 = assign_planes(pass1, field1)
            for seg in pass1:
                rev_in_seg = seg.planes & reversed_ids
                if rev_in_seg:
                    alcove_segments.append(seg)
                    consumed.update(rev_in_seg)
    remaining = sorted(set(range(n)) - consumed)
    closed_segments: list[Segment] = []
    field2: Optional[VoxelField] = None
    if remaining:
        field2 = VoxelField.build(regions, vis, active=remaining, bbox=bbox)
        try:
            groups2 = form_plane_groups(field2, n_planes_global=n)
            merged2 = aggregate(groups2, field2)
            closed_segments = [
                Segment(planes=g.planes, voxels=g.voxels, kind=CLOSED, plane_hits=g.plane_hits)
                for g in merged2
            ]
        except VisibilityError:
            pass
    if not alcove_segments and not closed_segments:
        raise VisibilityError("building interior not found")
    if field2 is None:
        field2 = field1
        warnings.append("all planes consumed by the alcove pass")
    segments = alcove_segments + closed_segments
    return SegmentationResult(
        segments=segments,
        field=field2,
        reversed_planes=reversed_ids,
        consumed_planes=frozenset(consumed),
        warnings=warnings,
    )


def generate_segments(
    regions: Sequence[PlaneRegion], params: AggParams, vis: VisParams
) -> list[Segment]:
    """Alcove segments followed by closed segments (possibly sharing planes
    until :func:`assign_planes` is applied)."""
    return segment_building(regions, params, vis).segments


def assign_planes(segments: Sequence[Segment], field: VoxelField) -> list[Segment]:
    """Give every plane to the single segment with the largest valid-hit
    count over its voxels (ties to the lower segment index); segments left
    without planes are dropped."""
    if not segments:
        return []
    all_planes = sorted(set().union(*(s.planes for s in segments)))
    keep: list[set] = [set() for _ in segments]
    for p in all_planes:
        holders = [i for i, s in enumerate(segments) if p in s.planes]
        if not holders:
            continue
        best = max(holders, key=lambda i: (int(segments[i].plane_hits[p]), -i))
        keep[best].add(p)
    out = []
    for i, s in enumerate(segments):
        if keep[i]:
            out.append(
                Segment(
                    planes=frozenset(keep[i]),
                    voxels=s.voxels,
                    kind=s.kind,
                    plane_hits=s.plane_hits,
                )
            )
    return out
