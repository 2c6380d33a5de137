"""OBJ and binary PLY import/export for triangle meshes and point clouds.

Coordinates are metres. Loaders reject non-triangulated faces rather than
fanning polygons silently.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import TriMesh


class MeshFormatError(ValueError):
    pass


def write_obj(path, mesh: TriMesh, object_names=None, face_groups=None):
    """Write a mesh as ASCII OBJ.

    object_names/face_groups let callers tag face ranges with `o <name>`
    records (used for per-tube provenance); face_groups holds the first face
    index of each named group, aligned with object_names.
    """
    lines = []
    for x, y, z in mesh.vertices.tolist():  # python floats: repr round-trips exactly
        lines.append(f"v {x!r} {y!r} {z!r}")
    groups = {}
    if object_names is not None:
        groups = {int(start): name for name, start in zip(object_names, face_groups)}
    for i, f in enumerate(mesh.faces):
        if i in groups:
            lines.append(f"o {groups[i]}")
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    """Read an ASCII OBJ mesh; returns (TriMesh, object name -> face range)."""
    verts, faces = [], []
    ranges: dict[str, list[int]] = {}
    current = None
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "o":
            if current is not None:
                ranges[current][1] = len(faces)
            current = parts[1] if len(parts) > 1 else f"object_{len(ranges)}"
            ranges[current] = [len(faces), len(faces)]
        elif parts[0] == "f":
            idx = [p.split("/")[0] for p in parts[1:]]
            if len(idx) != 3:
                raise MeshFormatError(f"non-triangulated face with {len(idx)} vertices")
            faces.append([int(i) - 1 for i in idx])
    if current is not None:
        ranges[current][1] = len(faces)
    mesh = TriMesh(np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64))
    return mesh, {k: tuple(v) for k, v in ranges.items()}


_PLY_MESH_HEADER = """ply
format binary_little_endian 1.0
element vertex {nv}
property double x
property double y
property double z
element face {nf}
property list uchar int vertex_indices
end_header
"""


def write_ply(path, mesh: TriMesh):
    """Write a mesh as binary little-endian PLY (double vertices)."""
    with open(path, "wb") as fh:
        fh.write(_PLY_MESH_HEADER.format(nv=mesh.n_vertices, nf=mesh.n_faces).encode("ascii"))
        fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
        for f in mesh.faces:
            fh.write(struct.pack("<Biii", 3, int(f[0]), int(f[1]), int(f[2])))


def _parse_ply_header(fh):
    magic = fh.readline().strip()
    if magic != b"ply":
        raise MeshFormatError("not a PLY file")
    fmt = None
    elements = []  # (name, count, [(type, name) or ('list', count_t, item_t, name)])
    while True:
        line = fh.readline()
        if not line:
            raise MeshFormatError("truncated PLY header")
        tok = line.decode("ascii", "replace").split()
        if not tok:
            continue
        if tok[0] == "comment":
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1][2].append(("list", tok[2], tok[3], tok[4]))
            else:
                elements[-1][2].append((tok[1], tok[2]))
        elif tok[0] == "end_header":
            break
    return fmt, elements


_PLY_SCALARS = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path):
    """Read ASCII or binary little-endian PLY; returns (TriMesh|None, points).

    Files without a face element come back as (None, vertex array) so the
    same reader serves point-cloud PLYs.
    """
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        if fmt not in ("ascii", "binary_little_endian"):
            raise MeshFormatError(f"unsupported PLY format {fmt}")
        data = {}
        for name, count, props in elements:
            if fmt == "ascii":
                rows = [fh.readline().split() for _ in range(count)]
                data[name] = (props, rows)
            else:
                if any(p[0] == "list" for p in props):
                    rows = []
                    for _ in range(count):
                        row = []
                        for p in props:
                            if p[0] == "list":
                                cdt = np.dtype("<" + _PLY_SCALARS[p[1]])
                                n = int(np.frombuffer(fh.read(cdt.itemsize), cdt)[0])
                                idt = np.dtype("<" + _PLY_SCALARS[p[2]])
                                row.append(np.frombuffer(fh.read(idt.itemsize * n), idt))
                            else:
                                sdt = np.dtype("<" + _PLY_SCALARS[p[0]])
                                row.append(np.frombuffer(fh.read(sdt.itemsize), sdt)[0])
                        rows.append(row)
                    data[name] = (props, rows)
                else:
                    dt = np.dtype([(p[1], "<" + _PLY_SCALARS[p[0]]) for p in props])
                    data[name] = (props, np.frombuffer(fh.read(dt.itemsize * count), dt))

    if "vertex" not in data:
        raise MeshFormatError("PLY without vertex element")
    props, rows = data["vertex"]
    names = [p[-1] for p in props]
    if fmt == "ascii":
        arr = np.asarray([[float(x) for x in r] for r in rows], dtype=np.float64)
        verts = arr[:, [names.index("x"), names.index("y"), names.index("z")]]
    else:
        verts = np.stack([rows[n].astype(np.float64) for n in ("x", "y", "z")], axis=1)

    if "face" not in data:
        return None, verts
    fprops, frows = data["face"]
    faces = []
    for row in frows:
        idx = row[0] if fmt != "ascii" else np.asarray(row[1:1 + int(row[0])], dtype=np.int64)
        if len(idx) != 3:
            raise MeshFormatError(f"non-triangulated PLY face with {len(idx)} vertices")
        faces.append(np.asarray(idx, dtype=np.int64))
    mesh = TriMesh(verts, np.asarray(faces, dtype=np.int64))
    return mesh, verts


def write_xyz(path, points: np.ndarray):
    pts = np.asarray(points, dtype=np.float64)
    Path(path).write_text("\n".join(f"{x!r} {y!r} {z!r}" for x, y, z in pts.tolist()) + "\n")


def read_xyz(path) -> np.ndarray:
    """Read an `x y z` per line text cloud; blank lines and # comments skipped."""
    pts = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 3:
            raise MeshFormatError(f"bad XYZ line: {line!r}")
        pts.append([float(parts[0]), float(parts[1]), float(parts[2])])
    return np.asarray(pts, dtype=np.float64)


def write_ply_points(path, points: np.ndarray):
    """Write a point cloud as binary little-endian PLY (no face element)."""
    pts = np.asarray(points, dtype=np.float64)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(pts, dtype="<f8").tobytes())


def load_point_cloud(path) -> np.ndarray:
    """Load a point cloud from .ply or .xyz by extension."""
    p = Path(path)
    if p.suffix.lower() == ".ply":
        _, pts = read_ply(p)
        return pts
    if p.suffix.lower() in (".xyz", ".txt"):
        return read_xyz(p)
    raise MeshFormatError(f"unknown point cloud format {p.suffix!r}")
