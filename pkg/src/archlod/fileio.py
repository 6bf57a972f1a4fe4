"""PLY/OBJ ingestion and export."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .geometry import PointCloud
from .meshing import PolyMesh

log = logging.getLogger(__name__)


class FileFormatError(ValueError):
    pass


_PLY_TYPES = {
    "float": ("<f4", 4),
    "float32": ("<f4", 4),
    "double": ("<f8", 8),
    "float64": ("<f8", 8),
    "uchar": ("<u1", 1),
    "uint8": ("<u1", 1),
    "char": ("<i1", 1),
    "int8": ("<i1", 1),
    "short": ("<i2", 2),
    "int16": ("<i2", 2),
    "ushort": ("<u2", 2),
    "uint16": ("<u2", 2),
    "int": ("<i4", 4),
    "int32": ("<i4", 4),
    "uint": ("<u4", 4),
    "uint32": ("<u4", 4),
}


def read_ply(path) -> PointCloud:
    """Read an ascii or binary_little_endian PLY with per-vertex normals."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise FileFormatError(f"{path.name}: not a PLY file")
        fmt = None
        elements = []  # (name, count, [(type, name)])
        while True:
            line = fh.readline()
            if not line:
                raise FileFormatError(f"{path.name}: unterminated PLY header")
            tokens = line.decode("ascii", "replace").strip().split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if tokens[1] == "list":
                    elements[-1][2].append(("list", tokens[2], tokens[3], tokens[4]))
                else:
                    elements[-1][2].append((tokens[1], tokens[2]))
            elif tokens[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise FileFormatError(f"{path.name}: unsupported PLY format {fmt!r}")
        vertex_data = None
        for name, count, props in elements:
            if name != "vertex":
                if vertex_data is not None:
                    break  # vertices already read; remaining elements ignored
                raise FileFormatError(
                    f"{path.name}: PLY element {name!r} precedes vertices"
                )
            if any(p[0] == "list" for p in props):
                raise FileFormatError(f"{path.name}: list properties on vertices")
            names = [p[1] for p in props]
            if fmt == "ascii":
                rows = []
                for _ in range(count):
                    rows.append([float(t) for t in fh.readline().split()])
                arr = np.asarray(rows, dtype=float)
            else:
                dtype = np.dtype([(p[1], _PLY_TYPES[p[0]][0]) for p in props])
                raw = fh.read(dtype.itemsize * count)
                if len(raw) != dtype.itemsize * count:
                    raise FileFormatError(f"{path.name}: truncated PLY data")
                rec = np.frombuffer(raw, dtype=dtype)
                arr = np.stack([rec[n].astype(float) for n in names], axis=1)
            vertex_data = (names, arr)
    if vertex_data is None:
        raise FileFormatError(f"{path.name}: no vertex element")
    names, arr = vertex_data
    try:
        xyz = [names.index(k) for k in ("x", "y", "z")]
    except ValueError as exc:
        raise FileFormatError(f"{path.name}: missing x/y/z properties") from exc
    if not all(k in names for k in ("nx", "ny", "nz")):
        raise FileFormatError(
            f"{path.name}: PLY has no normals (nx/ny/nz); normal estimation is out of scope"
        )
    nrm_idx = [names.index(k) for k in ("nx", "ny", "nz")]
    pts = arr[:, xyz]
    nrm = arr[:, nrm_idx]
    lens = np.linalg.norm(nrm, axis=1)
    if np.any(lens < 1e-12):
        raise FileFormatError(f"{path.name}: zero-length normals")
    return PointCloud(pts, nrm / lens[:, None])


def write_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    path = Path(path)
    n = len(cloud)
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {n}",
        "property double x",
        "property double y",
        "property double z",
        "property double nx",
        "property double ny",
        "property double nz",
        "end_header",
    ]
    data = np.hstack([cloud.points, cloud.normals]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(data.tobytes())
        else:
            for row in data:
                fh.write((" ".join(f"{v:.10g}" for v in row) + "\n").encode("ascii"))


def read_obj_mesh(path) -> tuple[np.ndarray, list]:
    verts = []
    faces = []
    with open(path, "r") as fh:
        for line in fh:
            t = line.split()
            if not t:
                continue
            if t[0] == "v":
                verts.append([float(x) for x in t[1:4]])
            elif t[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in t[1:]])
    if not verts or not faces:
        raise FileFormatError(f"{Path(path).name}: OBJ without vertices or faces")
    return np.asarray(verts, dtype=float), faces


def mesh_to_cloud(verts: np.ndarray, faces, density: float, seed=0) -> PointCloud:
    """Sample a triangle/polygon mesh into an oriented point cloud with at
    least ``density`` points per square meter (area-weighted, normals from
    faces)."""
    rng = np.random.default_rng(seed)
    tris = []
    for f in faces:
        for i in range(1, len(f) - 1):
            tris.append((f[0], f[i], f[i + 1]))
    a = verts[[t[0] for t in tris]]
    b = verts[[t[1] for t in tris]]
    c = verts[[t[2] for t in tris]]
    cross = np.cross(b - a, c - a)
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    keep = areas > 1e-14
    a, b, c, cross, areas = a[keep], b[keep], c[keep], cross[keep], areas[keep]
    if len(areas) == 0:
        raise FileFormatError("mesh has no usable faces")
    normals = cross / np.linalg.norm(cross, axis=1, keepdims=True)
    counts = np.maximum(np.ceil(areas * density).astype(int), 1)
    pts = []
    nrm = []
    for i, k in enumerate(counts):
        r1 = np.sqrt(rng.uniform(size=k))
        r2 = rng.uniform(size=k)
        p = (1 - r1)[:, None] * a[i] + (r1 * (1 - r2))[:, None] * b[i] + (r1 * r2)[:, None] * c[i]
        pts.append(p)
        nrm.append(np.tile(normals[i], (k, 1)))
    return PointCloud(np.concatenate(pts), np.concatenate(nrm))


def ingest(path, density: float = 100.0, seed=0) -> PointCloud:
    """Read a building file: PLY point clouds directly, OBJ meshes sampled
    at the given surface density."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix == ".obj":
        verts, faces = read_obj_mesh(path)
        return mesh_to_cloud(verts, faces, density, seed=seed)
    raise FileFormatError(f"{path.name}: unsupported input format {suffix!r}")


def write_obj(path, mesh: PolyMesh) -> None:
    path = Path(path)
    lines = ["# archlod polygonal mesh"]
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for face in mesh.faces:
        lines.append("f " + " ".join(str(int(i) + 1) for i in face))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
