"""Ray-casting kernels used by the visibility and mesh-labeling stages.

Two interchangeable backends compute identical results:

* a numba ``@njit`` fast path (default when numba is importable), and
* a pure-numpy fallback, selected by setting the environment variable
  ``ARCHLOD_PURE_NUMPY=1`` (or automatically when numba is missing).

``benchmarks/bench_kernels.py`` compares the two. Both backends follow the
same formulas in the same order so their outputs agree exactly on the test
scenes; the brute-force per-ray kernel is the correctness reference for the
sliced fast path used on voxel grids.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

_FORCE_NUMPY = bool(os.environ.get("ARCHLOD_PURE_NUMPY", ""))

try:  # pragma: no cover - exercised via the env flag in the benchmark
    if _FORCE_NUMPY:
        raise ImportError("pure-numpy backend forced by ARCHLOD_PURE_NUMPY")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def backend() -> str:
    """Name of the active kernel backend."""
    return "numba" if HAS_NUMBA else "numpy"


T_MIN = 1e-9  # minimal parametric distance for a hit
SIDE_TOL = 1e-7  # strict interior-side margin for valid hits


@dataclass(frozen=True)
class RegionPack:
    """Flat array view of a region list, consumable by the kernels."""

    normals: np.ndarray  # (P, 3) current orientation
    offsets: np.ndarray  # (P,)
    f_origin: np.ndarray  # (P, 3) footprint frame origin
    f_u: np.ndarray  # (P, 3)
    f_v: np.ndarray  # (P, 3)
    ring_xy: np.ndarray  # (V, 2) local ring vertices, rings concatenated
    ring_start: np.ndarray  # (R + 1,) vertex offsets per ring
    region_ring_ptr: np.ndarray  # (P + 1,) ring index range per region
    bb2d: np.ndarray  # (P, 4) local-frame footprint bounds
    ring_xyz: np.ndarray  # (V, 3) ring vertices lifted to 3D
    z_range: np.ndarray  # (P, 2) world z extent of each footprint

    @property
    def n_regions(self) -> int:
        return len(self.normals)

    @staticmethod
    def build(regions: Sequence) -> "RegionPack":
        P = len(regions)
        normals = np.zeros((P, 3))
        offsets = np.zeros(P)
        f_origin = np.zeros((P, 3))
        f_u = np.zeros((P, 3))
        f_v = np.zeros((P, 3))
        bb2d = np.zeros((P, 4))
        z_range = np.zeros((P, 2))
        ring_xy = []
        ring_xyz = []
        ring_start = [0]
        region_ring_ptr = [0]
        total = 0
        for p, reg in enumerate(regions):
            normals[p] = reg.plane.normal
            offsets[p] = reg.plane.offset
            f_origin[p] = reg.frame_origin
            f_u[p] = reg.frame_u
            f_v[p] = reg.frame_v
            lo = np.array([np.inf, np.inf])
            hi = np.array([-np.inf, -np.inf])
            zs = []
            for ring in reg.rings:
                ring_xy.append(np.asarray(ring, dtype=float))
                lifted = reg.to_world(ring)
                ring_xyz.append(lifted)
                zs.append(lifted[:, 2])
                total += len(ring)
                ring_start.append(total)
                lo = np.minimum(lo, ring.min(axis=0))
                hi = np.maximum(hi, ring.max(axis=0))
            region_ring_ptr.append(len(ring_start) - 1)
            bb2d[p] = [lo[0], lo[1], hi[0], hi[1]]
            zcat = np.concatenate(zs)
            z_range[p] = [zcat.min(), zcat.max()]
        return RegionPack(
            normals=normals,
            offsets=offsets,
            f_origin=f_origin,
            f_u=f_u,
            f_v=f_v,
            ring_xy=np.ascontiguousarray(np.concatenate(ring_xy) if ring_xy else np.zeros((0, 2))),
            ring_start=np.asarray(ring_start, dtype=np.int64),
            region_ring_ptr=np.asarray(region_ring_ptr, dtype=np.int64),
            bb2d=bb2d,
            ring_xyz=np.ascontiguousarray(
                np.concatenate(ring_xyz) if ring_xyz else np.zeros((0, 3))
            ),
            z_range=z_range,
        )


# ---------------------------------------------------------------------------
# Brute-force first-hit kernel (per origin x per ray x all regions).
# Reference implementation for the sliced grid kernel; used directly for
# convex-cell labeling where ray directions are not coplanar.
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _first_hits_nb(
    origins, dirs, normals, offsets, f_origin, f_u, f_v, ring_xy, ring_start, region_ring_ptr, bb2d
):
    M = origins.shape[0]
    K = dirs.shape[0]
    P = normals.shape[0]
    hit = np.full((M, K), -1, np.int32)
    thit = np.full((M, K), np.inf, np.float64)
    for m in range(M):
        ox = origins[m, 0]
        oy = origins[m, 1]
        oz = origins[m, 2]
        for k in range(K):
            dx = dirs[k, 0]
            dy = dirs[k, 1]
            dz = dirs[k, 2]
            best = np.inf
            bestp = -1
            for p in range(P):
                nx = normals[p, 0]
                ny = normals[p, 1]
                nz = normals[p, 2]
                denom = nx * dx + ny * dy + nz * dz
                if -1e-12 < denom < 1e-12:
                    continue
                t = (offsets[p] - (nx * ox + ny * oy + nz * oz)) / denom
                if t <= T_MIN or t >= best:
                    continue
                px = ox + t * dx - f_origin[p, 0]
                py = oy + t * dy - f_origin[p, 1]
                pz = oz + t * dz - f_origin[p, 2]
                lu = px * f_u[p, 0] + py * f_u[p, 1] + pz * f_u[p, 2]
                lv = px * f_v[p, 0] + py * f_v[p, 1] + pz * f_v[p, 2]
                if lu < bb2d[p, 0] or lv < bb2d[p, 1] or lu > bb2d[p, 2] or lv > bb2d[p, 3]:
                    continue
                wn = 0
                for r in range(region_ring_ptr[p], region_ring_ptr[p + 1]):
                    s0 = ring_start[r]
                    s1 = ring_start[r + 1]
                    x0 = ring_xy[s1 - 1, 0]
                    y0 = ring_xy[s1 - 1, 1]
                    for idx in range(s0, s1):
                        x1 = ring_xy[idx, 0]
                        y1 = ring_xy[idx, 1]
                        if y0 <= lv:
                            if y1 > lv and (x1 - x0) * (lv - y0) - (lu - x0) * (y1 - y0) > 0.0:
                                wn += 1
                        elif y1 <= lv and (x1 - x0) * (lv - y0) - (lu - x0) * (y1 - y0) < 0.0:
                            wn -= 1
                        x0 = x1
                        y0 = y1
                if wn != 0:
                    best = t
                    bestp = p
            hit[m, k] = bestp
            if bestp >= 0:
                thit[m, k] = best
    return hit, thit


def _winding_mask_np(pack: RegionPack, p: int, lu: np.ndarray, lv: np.ndarray) -> np.ndarray:
    wn = np.zeros(lu.shape, dtype=np.int64)
    for r in range(pack.region_ring_ptr[p], pack.region_ring_ptr[p + 1]):
        s0 = pack.ring_start[r]
        s1 = pack.ring_start[r + 1]
        ring = pack.ring_xy[s0:s1]
        x0 = ring[:, 0]
        y0 = ring[:, 1]
        x1 = np.roll(x0, -1)
        y1 = np.roll(y0, -1)
        for i in range(len(ring)):
            cross = (x1[i] - x0[i]) * (lv - y0[i]) - (lu - x0[i]) * (y1[i] - y0[i])
            up = (y0[i] <= lv) & (y1[i] > lv) & (cross > 0.0)
            dn = (y0[i] > lv) & (y1[i] <= lv) & (cross < 0.0)
            wn += up.astype(np.int64) - dn.astype(np.int64)
    return wn != 0


def _first_hits_np(origins, dirs, pack: RegionPack):
    M = len(origins)
    K = len(dirs)
    hit = np.full((M, K), -1, np.int32)
    thit = np.full((M, K), np.inf)
    chunk = max(1, 2_000_000 // max(1, K))
    for lo in range(0, M, chunk):
        hi = min(M, lo + chunk)
        o = origins[lo:hi]
        best = np.full((hi - lo, K), np.inf)
        bestp = np.full((hi - lo, K), -1, np.int32)
        for p in range(pack.n_regions):
            n = pack.normals[p]
            denom = dirs @ n  # (K,)
            usable = np.abs(denom) >= 1e-12
            if not usable.any():
                continue
            t = (pack.offsets[p] - o @ n)[:, None] / np.where(usable, denom, 1.0)[None, :]
            cand = usable[None, :] & (t > T_MIN) & (t < best)
            if not cand.any():
                continue
            mi, ki = np.nonzero(cand)
            pts = o[mi] + t[mi, ki][:, None] * dirs[ki] - pack.f_origin[p]
            lu = pts @ pack.f_u[p]
            lv = pts @ pack.f_v[p]
            inbb = (
                (lu >= pack.bb2d[p, 0])
                & (lv >= pack.bb2d[p, 1])
                & (lu <= pack.bb2d[p, 2])
                & (lv <= pack.bb2d[p, 3])
            )
            if not inbb.any():
                continue
            mi, ki, lu, lv = mi[inbb], ki[inbb], lu[inbb], lv[inbb]
            inside = _winding_mask_np(pack, p, lu, lv)
            if not inside.any():
                continue
            mi, ki = mi[inside], ki[inside]
            best[mi, ki] = t[mi, ki]
            bestp[mi, ki] = p
        hit[lo:hi] = bestp
        thit[lo:hi] = best
    return hit, thit


def first_hits(origins, dirs, pack: RegionPack) -> tuple[np.ndarray, np.ndarray]:
    """First region hit per (origin, ray): (region index or -1, distance)."""
    origins = np.ascontiguousarray(origins, dtype=float)
    dirs = np.ascontiguousarray(dirs, dtype=float)
    if pack.n_regions == 0:
        M, K = len(origins), len(dirs)
        return np.full((M, K), -1, np.int32), np.full((M, K), np.inf)
    if HAS_NUMBA:
        return _first_hits_nb(
            origins,
            dirs,
            pack.normals,
            pack.offsets,
            pack.f_origin,
            pack.f_u,
            pack.f_v,
            pack.ring_xy,
            pack.ring_start,
            pack.region_ring_ptr,
            pack.bb2d,
        )
    return _first_hits_np(origins, dirs, pack)


def interior_side_hits(origins, hit, pack: RegionPack, reversed_mask=None) -> np.ndarray:
    """Mask of hits whose origin lies strictly on the interior side of the
    hit plane (signed distance < -SIDE_TOL in the plane's current
    orientation; reversed planes test the opposite side)."""
    origins = np.asarray(origins, dtype=float)
    hit = np.asarray(hit)
    ok = hit >= 0
    out = np.zeros(hit.shape, dtype=bool)
    if not ok.any():
        return out
    mi = np.nonzero(ok)
    p = hit[mi]
    sd = np.einsum("ij,ij->i", origins[mi[0]], pack.normals[p]) - pack.offsets[p]
    if reversed_mask is None:
        valid = sd < -SIDE_TOL
    else:
        rev = np.asarray(reversed_mask, dtype=bool)[p]
        valid = np.where(rev, sd > SIDE_TOL, sd < -SIDE_TOL)
    out[mi] = valid
    return out


# ---------------------------------------------------------------------------
# Sliced grid kernel: XY-plane rays from every centroid of one z-slice of a
# voxel grid. Footprints are reduced to their cross-section segments at the
# slice height, so polygon complexity is paid once per slice instead of per
# ray. Opposite ray pairs share one line intersection (signed t).
# ---------------------------------------------------------------------------


def slice_segments(pack: RegionPack, z: float):
    """Cross-section segments of all footprints at height z.

    Returns (a, e, plane) where a is the segment start, e the segment vector
    and plane the owning region index. Inside/outside parity along each
    footprint's section line matches the winding test of the brute kernel.
    """
    seg_a: list[np.ndarray] = []
    seg_e: list[np.ndarray] = []
    seg_p: list[int] = []
    cand = np.nonzero((pack.z_range[:, 0] <= z) & (pack.z_range[:, 1] >= z))[0]
    for p in cand:
        n = pack.normals[p]
        ex, ey = -n[1], n[0]
        norm = np.hypot(ex, ey)
        if norm < 1e-12:
            continue  # horizontal plane: no cross-section line
        ex, ey = ex / norm, ey / norm
        crossings = []
        for r in range(pack.region_ring_ptr[p], pack.region_ring_ptr[p + 1]):
            s0 = pack.ring_start[r]
            s1 = pack.ring_start[r + 1]
            ring = pack.ring_xyz[s0:s1]
            az = ring[:, 2]
            bz = np.roll(az, -1)
            mask = (az > z) != (bz > z)
            if not mask.any():
                continue
            a = ring[mask]
            b = np.roll(ring, -1, axis=0)[mask]
            s = (z - a[:, 2]) / (b[:, 2] - a[:, 2])
            pts = a + s[:, None] * (b - a)
            crossings.append(pts[:, :2])
        if not crossings:
            continue
        xy = np.concatenate(crossings)
        order = np.argsort(xy @ np.array([ex, ey]), kind="stable")
        xy = xy[order]
        n_pairs = len(xy) // 2
        for i in range(n_pairs):
            a2 = xy[2 * i]
            b2 = xy[2 * i + 1]
            seg_a.append(a2)
            seg_e.append(b2 - a2)
            seg_p.append(int(p))
    if not seg_a:
        return np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
    return np.asarray(seg_a), np.asarray(seg_e), np.asarray(seg_p, dtype=np.int64)


@njit(cache=True, nogil=True)
def _slice_counts_nb(xs, ys, z, dirs2, seg_a, seg_e, seg_plane, normals, offsets, rev, n_planes):
    nx = xs.shape[0]
    ny = ys.shape[0]
    K2 = dirs2.shape[0]
    S = seg_a.shape[0]
    t_pos = np.full((K2, nx, ny), np.inf, np.float64)
    p_pos = np.full((K2, nx, ny), -1, np.int32)
    t_neg = np.full((K2, nx, ny), np.inf, np.float64)
    p_neg = np.full((K2, nx, ny), -1, np.int32)
    for s in range(S):
        ax = seg_a[s, 0]
        ay = seg_a[s, 1]
        ex = seg_e[s, 0]
        ey = seg_e[s, 1]
        p = seg_plane[s]
        for k in range(K2):
            dx = dirs2[k, 0]
            dy = dirs2[k, 1]
            det = ex * dy - ey * dx
            if -1e-14 < det < 1e-14:
                continue
            inv = 1.0 / det
            tp = t_pos[k]
            pp = p_pos[k]
            tn = t_neg[k]
            pn = p_neg[k]
            for i in range(nx):
                wxe = ex * ay - ey * (ax - xs[i])
                wxd = dx * ay - dy * (ax - xs[i])
                for j in range(ny):
                    u = (wxd - dx * ys[j]) * inv
                    if u < 0.0 or u > 1.0:
                        continue
                    t = (wxe - ex * ys[j]) * inv
                    if t > T_MIN:
                        if t < tp[i, j]:
                            tp[i, j] = t
                            pp[i, j] = p
                    elif t < -T_MIN:
                        if -t < tn[i, j]:
                            tn[i, j] = -t
                            pn[i, j] = p
    counts = np.zeros((nx * ny, n_planes), np.uint16)
    anyhit = np.zeros(nx * ny, np.bool_)
    for i in range(nx):
        for j in range(ny):
            flat = i * ny + j
            for k in range(K2):
                for half in range(2):
                    p = p_pos[k, i, j] if half == 0 else p_neg[k, i, j]
                    if p < 0:
                        continue
                    anyhit[flat] = True
                    sd = (
                        normals[p, 0] * xs[i]
                        + normals[p, 1] * ys[j]
                        + normals[p, 2] * z
                        - offsets[p]
                    )
                    if rev[p]:
                        if sd > SIDE_TOL:
                            counts[flat, p] += 1
                    else:
                        if sd < -SIDE_TOL:
                            counts[flat, p] += 1
    return counts, anyhit


def _slice_counts_np(xs, ys, z, dirs2, seg_a, seg_e, seg_plane, normals, offsets, rev, n_planes):
    nx, ny, K2 = len(xs), len(ys), len(dirs2)
    t_pos = np.full((K2, nx, ny), np.inf)
    p_pos = np.full((K2, nx, ny), -1, np.int32)
    t_neg = np.full((K2, nx, ny), np.inf)
    p_neg = np.full((K2, nx, ny), -1, np.int32)
    for s in range(len(seg_a)):
        ax, ay = seg_a[s]
        ex, ey = seg_e[s]
        p = int(seg_plane[s])
        for k in range(K2):
            dx, dy = dirs2[k]
            det = ex * dy - ey * dx
            if -1e-14 < det < 1e-14:
                continue
            inv = 1.0 / det
            wxe = ex * ay - ey * (ax - xs)  # (nx,)
            wxd = dx * ay - dy * (ax - xs)
            u = (wxd[:, None] - dx * ys[None, :]) * inv
            ok = (u >= 0.0) & (u <= 1.0)
            t = (wxe[:, None] - ex * ys[None, :]) * inv
            upd = ok & (t > T_MIN) & (t < t_pos[k])
            t_pos[k][upd] = t[upd]
            p_pos[k][upd] = p
            upd = ok & (t < -T_MIN) & (-t < t_neg[k])
            t_neg[k][upd] = -t[upd]
            p_neg[k][upd] = p
    counts = np.zeros((nx * ny, n_planes), np.uint16)
    anyhit = np.zeros(nx * ny, dtype=bool)
    sd = (
        normals[:, 0][:, None, None] * xs[None, :, None]
        + normals[:, 1][:, None, None] * ys[None, None, :]
        + normals[:, 2][:, None, None] * z
        - offsets[:, None, None]
    )  # (P, nx, ny)
    revb = np.asarray(rev, dtype=bool)
    for phits in (p_pos, p_neg):
        for k in range(K2):
            pk = phits[k]
            got = pk >= 0
            if not got.any():
                continue
            ii, jj = np.nonzero(got)
            pp = pk[ii, jj]
            anyhit[ii * ny + jj] = True
            sdv = sd[pp, ii, jj]
            valid = np.where(revb[pp], sdv > SIDE_TOL, sdv < -SIDE_TOL)
            np.add.at(counts, (ii[valid] * ny + jj[valid], pp[valid]), 1)
    return counts, anyhit


def slice_counts(xs, ys, z, dirs2, seg_a, seg_e, seg_plane, pack: RegionPack, reversed_mask):
    """Per-voxel, per-plane valid-hit counts for one z-slice of the grid.

    dirs2 holds half of an even ray fan; each entry also represents its
    opposite ray via the sign of the line-intersection parameter.
    """
    rev = (
        np.zeros(pack.n_regions, dtype=bool)
        if reversed_mask is None
        else np.asarray(reversed_mask, dtype=bool)
    )
    args = (
        np.ascontiguousarray(xs, dtype=float),
        np.ascontiguousarray(ys, dtype=float),
        float(z),
        np.ascontiguousarray(dirs2, dtype=float),
        np.ascontiguousarray(seg_a, dtype=float),
        np.ascontiguousarray(seg_e, dtype=float),
        np.ascontiguousarray(seg_plane, dtype=np.int64),
        pack.normals,
        pack.offsets,
        rev,
        pack.n_regions,
    )
    if HAS_NUMBA:
        return _slice_counts_nb(*args)
    return _slice_counts_np(*args)


def fibonacci_sphere(n: int) -> np.ndarray:
    """n nearly-uniform unit directions (spherical Fibonacci lattice)."""
    i = np.arange(n, dtype=float)
    z = 1.0 - 2.0 * (i + 0.5) / n
    theta = np.pi * (3.0 - np.sqrt(5.0)) * i
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    dirs = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
