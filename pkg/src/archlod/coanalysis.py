"""Joint structural analysis across a building collection.

Two stages: (1) select the coarsest layer per building by maximizing a
fidelity + simplicity + cross-consistency energy over candidate segment
subsets, coupled across buildings through segment similarity; (2) assign
the remaining segments to finer layers by spectral clustering of the
similarity matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)


class CoAnalysisError(RuntimeError):
    pass


@dataclass(frozen=True)
class CoParams:
    beta: float = 0.3
    lam: float = 0.4
    eta: float = 4.0
    fidelity_floor: float = 0.8
    l_n: int = 3
    d2_bins: int = 64
    d2_pairs: int = 100_000
    segment_samples: int = 1000  # surface samples per segment (>= 500)
    seed: int = 0

    def __post_init__(self):
        if min(self.beta, self.lam, self.eta) <= 0:
            raise ValueError("beta, lam and eta must be positive")
        if not 0.0 < self.fidelity_floor < 1.0:
            raise ValueError("fidelity_floor must lie in (0, 1)")
        if self.l_n < 2:
            raise ValueError("l_n must be >= 2")
        if self.segment_samples < 500:
            raise ValueError("segment_samples must be >= 500")


@dataclass(frozen=True)
class SegmentDescriptor:
    """Shape signature: pair-distance histogram of the whitened segment
    plus the principal eigenvalues of its covariance (descending, m^2)."""

    d2: np.ndarray
    eigenvalues: np.ndarray

    def __post_init__(self):
        if abs(float(np.sum(self.d2)) - 1.0) > 1e-9:
            raise ValueError("d2 histogram must be L1-normalized")
        ev = np.asarray(self.eigenvalues, dtype=float)
        if ev.shape != (3,) or np.any(ev < -1e-12) or np.any(np.diff(ev) > 1e-12):
            raise ValueError("eigenvalues must be three non-negative descending values")


def normalize_segment(points) -> np.ndarray:
    """Center and anisotropically scale points so their covariance becomes
    the identity; nearly degenerate axes are left unscaled."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 10:
        raise CoAnalysisError("segment too sparse")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    w, vecs = np.linalg.eigh(cov)
    w_max = float(w[-1])
    scale = np.where(w >= 1e-9 * max(w_max, 1e-300), 1.0 / np.sqrt(np.maximum(w, 1e-300)), 1.0)
    return centered @ vecs * scale


def d2_descriptor(points, bins: int, pairs: int, seed) -> np.ndarray:
    """Histogram of distances between random point pairs, L1-normalized
    over bins spanning [0, max sampled distance]."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        raise CoAnalysisError("need at least two points")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(pts), size=(pairs, 2))
    d = np.linalg.norm(pts[idx[:, 0]] - pts[idx[:, 1]], axis=1)
    d_max = float(d.max())
    if d_max <= 0.0:
        hist = np.zeros(bins)
        hist[0] = 1.0
        return hist
    hist, _ = np.histogram(d, bins=bins, range=(0.0, d_max))
    return hist / hist.sum()


def descriptor_from_points(points, params: CoParams, seed) -> SegmentDescriptor:
    pts = np.asarray(points, dtype=float)
    whitened = normalize_segment(pts)
    d2 = d2_descriptor(whitened, params.d2_bins, params.d2_pairs, seed)
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    ev = np.linalg.eigvalsh(cov)[::-1]
    return SegmentDescriptor(d2=d2, eigenvalues=np.maximum(ev, 0.0))


def segment_distance(a: SegmentDescriptor, b: SegmentDescriptor, eta: float) -> float:
    """Shape distance (D2 histograms of whitened geometry) weighted by eta,
    plus the normalized L1 distance of covariance eigenvalues (scale)."""
    shape = float(np.linalg.norm(a.d2 - b.d2))
    ea = float(np.abs(a.eigenvalues).sum())
    eb = float(np.abs(b.eigenvalues).sum())
    denom = ea + eb
    scale = float(np.abs(a.eigenvalues - b.eigenvalues).sum()) / denom if denom > 0 else 0.0
    return eta * shape + scale


def cross_similarity(distances) -> float:
    """exp(-min distance) over a candidate set; 0 for an empty set."""
    d = np.asarray(list(distances), dtype=float)
    if d.size == 0:
        return 0.0
    return float(np.exp(-d.min()))


# ---------------------------------------------------------------------------
# Collection context
# ---------------------------------------------------------------------------


@dataclass
class BuildingSegments:
    """Per-building co-analysis inputs: one entry per structural segment."""

    name: str
    voxel_sets: list  # list of sorted int arrays (or frozensets)
    areas: np.ndarray  # (n,) total plane area per segment
    volumes: np.ndarray  # (n,) enclosed volume per segment, m^3
    descriptors: list  # list of SegmentDescriptor

    def __post_init__(self):
        n = len(self.voxel_sets)
        if not (len(self.areas) == len(self.volumes) == len(self.descriptors) == n):
            raise ValueError("inconsistent per-segment arrays")
        self.voxel_sets = [np.asarray(sorted(v), dtype=np.int64) for v in self.voxel_sets]
        self.areas = np.asarray(self.areas, dtype=float)
        self.volumes = np.asarray(self.volumes, dtype=float)

    @property
    def n_segments(self) -> int:
        return len(self.voxel_sets)


@dataclass
class CollectionContext:
    """All buildings' segments plus the cached pairwise similarity."""

    buildings: list
    dist: np.ndarray  # (G, G) symmetric segment distances
    sim: np.ndarray  # exp(-dist)
    labels: list  # (building index, local index) per global index
    _globals: dict = dc_field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._globals = {}
        for g, (b, _) in enumerate(self.labels):
            self._globals.setdefault(b, []).append(g)

    @classmethod
    def from_buildings(
        cls, buildings: Sequence[BuildingSegments], eta: float, dist: Optional[np.ndarray] = None
    ) -> "CollectionContext":
        labels = [(b, k) for b, bd in enumerate(buildings) for k in range(bd.n_segments)]
        G = len(labels)
        if dist is None:
            dist = np.zeros((G, G))
            for i in range(G):
                bi, ki = labels[i]
                di = buildings[bi].descriptors[ki]
                for j in range(i + 1, G):
                    bj, kj = labels[j]
                    d = segment_distance(di, buildings[bj].descriptors[kj], eta)
                    dist[i, j] = dist[j, i] = d
        else:
            dist = np.asarray(dist, dtype=float)
            if dist.shape != (G, G):
                raise ValueError("distance matrix shape mismatch")
        return cls(buildings=list(buildings), dist=dist, sim=np.exp(-dist), labels=labels)

    def global_index(self, b: int, k: int) -> int:
        return self.labels.index((b, k))

    def globals_of(self, b: int) -> np.ndarray:
        return np.asarray(self._globals.get(b, []), dtype=np.int64)

    def sim_to_set(self, g: int, others: np.ndarray) -> float:
        if len(others) == 0:
            return 0.0
        return float(np.exp(-self.dist[g, others].min()))


# ---------------------------------------------------------------------------
# Energy terms
# ---------------------------------------------------------------------------


def _union_size(voxel_sets, mask) -> int:
    chosen = [voxel_sets[k] for k in np.nonzero(mask)[0]]
    if not chosen:
        return 0
    return len(np.unique(np.concatenate(chosen)))


def fidelity_term(building: BuildingSegments, selected) -> float:
    """Intersection-over-union of the enclosed voxel sets of the selection
    against all segments of the building."""
    selected = np.asarray(selected, dtype=bool)
    full = _union_size(building.voxel_sets, np.ones(building.n_segments, dtype=bool))
    if full == 0:
        return 0.0
    part = _union_size(building.voxel_sets, selected)
    # selections are subsets, so the union equals the full set
    return part / full


def simplicity_term(building: BuildingSegments, selected) -> float:
    """Negative plane-area ratio of the selection."""
    selected = np.asarray(selected, dtype=bool)
    total = float(building.areas.sum())
    if total <= 0:
        return 0.0
    return -float(building.areas[selected].sum()) / total


def consistency_term(ctx: CollectionContext, b: int, selections) -> float:
    """Cross-building similarity mass of this building's removed segments
    against every other building's removed set."""
    removed_here = _removed_globals(ctx, b, selections[b])
    total = 0.0
    for g in removed_here:
        for j in range(len(ctx.buildings)):
            if j == b:
                continue
            total += ctx.sim_to_set(g, _removed_globals(ctx, j, selections[j]))
    return total


def _removed_globals(ctx: CollectionContext, b: int, selected) -> np.ndarray:
    selected = np.asarray(selected, dtype=bool)
    g = ctx.globals_of(b)
    return g[~selected] if len(g) else g


def collection_energy(ctx: CollectionContext, selections, params: CoParams) -> float:
    """Total energy of a per-building selection (no feasibility check)."""
    E = 0.0
    for b, bd in enumerate(ctx.buildings):
        E += (
            fidelity_term(bd, selections[b])
            + params.beta * simplicity_term(bd, selections[b])
            + params.lam * consistency_term(ctx, b, selections)
        )
    return E


def feasible(ctx: CollectionContext, b: int, selected, params: CoParams) -> bool:
    selected = np.asarray(selected, dtype=bool)
    return selected.any() and fidelity_term(ctx.buildings[b], selected) > params.fidelity_floor


# ---------------------------------------------------------------------------
# Coarse-layer selection
# ---------------------------------------------------------------------------


@dataclass
class Lod0Result:
    selected: list  # per building: bool mask over its segments
    energy: float
    fidelity: list  # per building f_r of the final selection


def optimize_lod0(ctx: CollectionContext, params: CoParams) -> Lod0Result:
    """Blockwise coordinate ascent over buildings with exact per-building
    subproblems (exhaustive enumeration up to 20 segments, branch-and-bound
    above), run from multiple deterministic starts."""
    n_b = len(ctx.buildings)
    if n_b == 0:
        raise CoAnalysisError("empty collection")
    for b, bd in enumerate(ctx.buildings):
        if bd.n_segments == 0 or not feasible(ctx, b, np.ones(bd.n_segments, bool), params):
            raise CoAnalysisError(f"no feasible coarse layer for building {bd.name!r}")

    starts = [
        [np.ones(bd.n_segments, dtype=bool) for bd in ctx.buildings],
        [_minimal_feasible(ctx, b, params) for b in range(n_b)],
    ]
    best: Optional[tuple[float, list]] = None
    for start in starts:
        sel = [s.copy() for s in start]
        for _ in range(10):
            changed = False
            for b in range(n_b):
                new_sel = _best_subset(ctx, b, sel, params)
                if not np.array_equal(new_sel, sel[b]):
                    sel[b] = new_sel
                    changed = True
            if not changed:
                break
        e = collection_energy(ctx, sel, params)
        if best is None or e > best[0] + 1e-12:
            best = (e, sel)
    energy, selected = best
    fid = [fidelity_term(ctx.buildings[b], selected[b]) for b in range(n_b)]
    return Lod0Result(selected=selected, energy=energy, fidelity=fid)


def _minimal_feasible(ctx: CollectionContext, b: int, params: CoParams) -> np.ndarray:
    """Greedy smallest selection above the fidelity floor (largest voxel
    sets first)."""
    bd = ctx.buildings[b]
    order = np.argsort([-len(v) for v in bd.voxel_sets], kind="stable")
    sel = np.zeros(bd.n_segments, dtype=bool)
    for k in order:
        sel[k] = True
        if feasible(ctx, b, sel, params):
            return sel
    return np.ones(bd.n_segments, dtype=bool)


def _subproblem_value(ctx, b, selected, selections, params) -> float:
    """Energy contribution of building b's selection, including the effect
    of its removed set on the other buildings' consistency terms."""
    bd = ctx.buildings[b]
    val = fidelity_term(bd, selected) + params.beta * simplicity_term(bd, selected)
    trial = list(selections)
    trial[b] = selected
    val += params.lam * consistency_term(ctx, b, trial)
    removed_here = _removed_globals(ctx, b, selected)
    for j in range(len(ctx.buildings)):
        if j == b:
            continue
        for g in _removed_globals(ctx, j, selections[j]):
            val += params.lam * ctx.sim_to_set(g, removed_here)
    return val


def _best_subset(ctx, b, selections, params) -> np.ndarray:
    bd = ctx.buildings[b]
    n = bd.n_segments
    if n <= 20:
        best_val = -np.inf
        best_sel = selections[b]
        for bits in range(1, 1 << n):
            sel = np.array([(bits >> k) & 1 for k in range(n)], dtype=bool)
            if not feasible(ctx, b, sel, params):
                continue
            v = _subproblem_value(ctx, b, sel, selections, params)
            if v > best_val + 1e-12:
                best_val = v
                best_sel = sel
        return best_sel
    return _branch_and_bound(ctx, b, selections, params)


def _branch_and_bound(ctx, b, selections, params) -> np.ndarray:
    """Depth-first search over include/exclude decisions with an admissible
    upper bound; segments ordered by descending voxel count."""
    bd = ctx.buildings[b]
    n = bd.n_segments
    order = list(np.argsort([-len(v) for v in bd.voxel_sets], kind="stable"))
    full = _union_size(bd.voxel_sets, np.ones(n, bool))
    area_total = max(float(bd.areas.sum()), 1e-300)
    globals_b = ctx.globals_of(b)
    # Per-segment removal gain against the other buildings' current removed
    # sets (exact: this part of the consistency term is additive).
    w_remove = np.zeros(n)
    foreign_removed = [
        _removed_globals(ctx, j, selections[j])
        for j in range(len(ctx.buildings))
        if j != b
    ]
    for k in range(n):
        for rem in foreign_removed:
            w_remove[k] += ctx.sim_to_set(globals_b[k], rem)
    reverse_cap = sum(
        max((ctx.sim_to_set(g, globals_b) for g in rem), default=0.0) if len(rem) else 0.0
        for rem in foreign_removed
        for g in rem
    )

    best = {"val": -np.inf, "sel": selections[b]}

    def bound(fixed_in, undecided):
        mask = np.zeros(n, dtype=bool)
        mask[fixed_in] = True
        mask[undecided] = True
        fr_cap = _union_size(bd.voxel_sets, mask) / max(full, 1)
        fs_cap = -float(bd.areas[fixed_in].sum()) / area_total
        removed_cap = [k for k in range(n) if k not in fixed_in]
        fco_cap = float(w_remove[removed_cap].sum()) if removed_cap else 0.0
        return fr_cap + params.beta * fs_cap + params.lam * (fco_cap + reverse_cap)

    def dfs(depth, fixed_in, fixed_out):
        undecided = order[depth:]
        if bound(fixed_in, undecided) <= best["val"] + 1e-12:
            return
        if depth == n:
            sel = np.zeros(n, dtype=bool)
            sel[fixed_in] = True
            if not feasible(ctx, b, sel, params):
                return
            v = _subproblem_value(ctx, b, sel, selections, params)
            if v > best["val"]:
                best["val"] = v
                best["sel"] = sel
            return
        k = order[depth]
        dfs(depth + 1, fixed_in + [k], fixed_out)
        dfs(depth + 1, fixed_in, fixed_out + [k])

    dfs(0, [], [])
    if not np.asarray(best["sel"]).any():
        raise CoAnalysisError(f"no feasible coarse layer for building {bd.name!r}")
    return np.asarray(best["sel"], dtype=bool)


# ---------------------------------------------------------------------------
# Spectral layering
# ---------------------------------------------------------------------------


def normalized_laplacian(sim: np.ndarray) -> np.ndarray:
    s = np.asarray(sim, dtype=float)
    d = s.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(np.maximum(d, 1e-300))
    return inv_sqrt[:, None] * (np.diag(d) - s) * inv_sqrt[None, :]


def _kmeans(X: np.ndarray, k: int, seed, iters: int = 100) -> np.ndarray:
    """Lloyd iterations with farthest-point seeding from a fixed seed."""
    n = len(X)
    rng = np.random.default_rng(seed)
    centers = [X[int(rng.integers(n))]]
    for _ in range(k - 1):
        d2 = np.min(
            [np.sum((X - c) ** 2, axis=1) for c in centers], axis=0
        )
        centers.append(X[int(np.argmax(d2))])
    C = np.asarray(centers)
    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(iters):
        d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1).astype(np.int64)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = X[assign == c]
            if len(members):
                C[c] = members.mean(axis=0)
    return assign


def spectral_layers(
    sim: np.ndarray, volumes, l_n: int, seed=0
) -> np.ndarray:
    """Cluster segments into l_n - 1 groups from the spectral embedding of
    the normalized Laplacian; clusters of larger mean volume get lower
    layer indices (layers are numbered 1 .. l_n - 1)."""
    sim = np.asarray(sim, dtype=float)
    volumes = np.asarray(volumes, dtype=float)
    n = len(sim)
    k = l_n - 1
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if n < k:
        log.warning("fewer segments (%d) than layers (%d); all assigned to layer 1", n, k)
        return np.ones(n, dtype=np.int64)
    if k == 1:
        return np.ones(n, dtype=np.int64)
    L = normalized_laplacian(sim)
    w, vecs = np.linalg.eigh(L)
    embedding = vecs[:, :k]
    assign = _kmeans(embedding, k, seed)
    # order clusters by descending mean volume -> layer index 1..k
    means = []
    for c in range(k):
        members = volumes[assign == c]
        means.append(float(members.mean()) if len(members) else -np.inf)
    order = np.argsort([-m for m in means], kind="stable")
    layer_of_cluster = np.empty(k, dtype=np.int64)
    for layer, c in enumerate(order, start=1):
        layer_of_cluster[c] = layer
    return layer_of_cluster[assign]


def assign_layers(ctx: CollectionContext, lod0: Lod0Result, params: CoParams) -> list:
    """Per-building layer index per segment: 0 for the coarse selection,
    spectral clusters (collection-wide) for the rest."""
    beyond: list[tuple[int, int]] = []
    for b, bd in enumerate(ctx.buildings):
        for k in range(bd.n_segments):
            if not lod0.selected[b][k]:
                beyond.append((b, k))
    layers = [np.zeros(bd.n_segments, dtype=np.int64) for bd in ctx.buildings]
    if not beyond:
        return layers
    gids = np.asarray([ctx.labels.index(bk) for bk in beyond])
    sim = ctx.sim[np.ix_(gids, gids)].copy()
    np.fill_diagonal(sim, 1.0)
    volumes = np.asarray([ctx.buildings[b].volumes[k] for b, k in beyond])
    labels = spectral_layers(sim, volumes, params.l_n, seed=params.seed)
    for (b, k), layer in zip(beyond, labels):
        layers[b][k] = layer
    return layers


# ---------------------------------------------------------------------------
# Layer plane sets
# ---------------------------------------------------------------------------


def footprint_distance(region_a, region_b, stop_below: float = 0.0) -> float:
    """Minimal 3D distance between two footprint boundary polylines.

    ``stop_below`` allows early exit once the distance is provably under a
    threshold (used for adjacency tests)."""
    ea = np.concatenate([_ring_edges(r) for r in region_a.footprint_vertices()])
    eb = np.concatenate([_ring_edges(r) for r in region_b.footprint_vertices()])
    best = np.inf
    for a0, a1 in ea:
        d = float(_segment_to_segments(a0, a1, eb).min())
        if d < best:
            best = d
            if best <= stop_below:
                break
    return best


def _ring_edges(ring: np.ndarray) -> np.ndarray:
    nxt = np.roll(ring, -1, axis=0)
    return np.stack([ring, nxt], axis=1)  # (k, 2, 3)


def _segment_to_segments(p0, p1, segs) -> np.ndarray:
    """Distance from segment (p0, p1) to each segment in segs (m, 2, 3)."""
    q0 = segs[:, 0]
    q1 = segs[:, 1]
    d1 = p1 - p0  # (3,)
    d2 = q1 - q0  # (m, 3)
    r = p0 - q0  # (m, 3)
    a = float(d1 @ d1)
    e = np.einsum("ij,ij->i", d2, d2)
    f = np.einsum("ij,ij->i", d2, r)
    c = r @ d1
    b = d2 @ d1
    denom = a * e - b * b
    s = np.where(denom > 1e-300, (b * f - c * e) / np.maximum(denom, 1e-300), 0.0)
    s = np.clip(s, 0.0, 1.0)
    t = np.where(e > 1e-300, (b * s + f) / np.maximum(e, 1e-300), 0.0)
    t = np.clip(t, 0.0, 1.0)
    if a > 1e-300:
        s = np.clip((b * t - c) / a, 0.0, 1.0)
    closest1 = p0 + s[:, None] * d1
    closest2 = q0 + t[:, None] * d2
    return np.linalg.norm(closest1 - closest2, axis=1)


def layer_planes(regions, segments, layers, k: int, eps: float) -> set:
    """Plane set of layer k: planes of all segments at layer <= k plus
    unsegmented planes whose footprint lies within eps of an included one."""
    included: set[int] = set()
    for seg, layer in zip(segments, layers):
        if layer <= k:
            included |= set(seg.planes)
    segmented: set[int] = set()
    for seg in segments:
        segmented |= set(seg.planes)
    orphans = set(range(len(regions))) - segmented
    adopted = set()
    for o in sorted(orphans):
        for p in sorted(included):
            if footprint_distance(regions[o], regions[p], stop_below=eps) <= eps:
                adopted.add(o)
                break
    return included | adopted
