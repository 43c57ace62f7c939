"""Mesh file loading (PLY ascii/binary, OBJ) and symmetry sidecar parsing."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import MeshFormatError
from .geometry import Pose, TriangleMesh, axis_angle_rotation, drop_degenerate_faces

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def load_mesh(path: str | Path) -> TriangleMesh:
    """Load a triangle mesh from .ply or .obj; polygon faces are fan-triangulated,
    zero-area faces dropped."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        mesh = _load_ply(path)
    elif suffix == ".obj":
        mesh = _load_obj(path)
    else:
        raise MeshFormatError(f"unsupported mesh format: {path.name}")
    return drop_degenerate_faces(mesh)


def _load_ply(path: Path) -> TriangleMesh:
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise MeshFormatError(f"{path.name}: not a PLY file")
    header = raw[: end + len(b"end_header\n")]
    body = raw[len(header):]

    fmt = None
    elements: list[tuple[str, int, list]] = []  # (name, count, [(prop, type) or list-spec])
    for line in header.decode("ascii", errors="replace").splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise MeshFormatError(f"{path.name}: property before element")
            if tok[1] == "list":
                elements[-1][2].append(("list", tok[2], tok[3], tok[4]))
            else:
                elements[-1][2].append(("scalar", tok[1], tok[2]))
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise MeshFormatError(f"{path.name}: unknown PLY format {fmt!r}")

    if fmt == "ascii":
        values = _ply_ascii_elements(body, elements, path)
    else:
        endian = "<" if fmt == "binary_little_endian" else ">"
        values = _ply_binary_elements(body, elements, endian, path)

    return _assemble_ply(values, path)


def _ply_ascii_elements(body: bytes, elements, path: Path):
    lines = body.decode("ascii", errors="replace").splitlines()
    pos = 0
    values: dict[str, dict] = {}
    for name, count, props in elements:
        rows: dict[str, list] = {p[-1] if p[0] == "scalar" else p[3]: [] for p in props}
        for _ in range(count):
            if pos >= len(lines):
                raise MeshFormatError(f"{path.name}: truncated element {name}")
            tok = lines[pos].split()
            pos += 1
            i = 0
            for p in props:
                if p[0] == "scalar":
                    rows[p[2]].append(float(tok[i]))
                    i += 1
                else:
                    n = int(tok[i])
                    rows[p[3]].append([float(x) for x in tok[i + 1 : i + 1 + n]])
                    i += 1 + n
        values[name] = rows
    return values


def _ply_binary_elements(body: bytes, elements, endian: str, path: Path):
    off = 0
    values: dict[str, dict] = {}
    for name, count, props in elements:
        has_list = any(p[0] == "list" for p in props)
        if not has_list:
            dt = np.dtype([(p[2], endian + _PLY_TYPES[p[1]]) for p in props])
            arr = np.frombuffer(body, dtype=dt, count=count, offset=off)
            off += dt.itemsize * count
            values[name] = {p[2]: arr[p[2]].astype(np.float64) for p in props}
            continue
        rows: dict[str, list] = {p[-1] if p[0] == "scalar" else p[3]: [] for p in props}
        for _ in range(count):
            for p in props:
                if p[0] == "scalar":
                    t = _PLY_TYPES[p[1]]
                    (val,) = struct.unpack_from(endian + _struct_code(t), body, off)
                    off += np.dtype(t).itemsize
                    rows[p[2]].append(float(val))
                else:
                    ct, it = _PLY_TYPES[p[1]], _PLY_TYPES[p[2]]
                    (n,) = struct.unpack_from(endian + _struct_code(ct), body, off)
                    off += np.dtype(ct).itemsize
                    items = struct.unpack_from(endian + str(n) + _struct_code(it), body, off)
                    off += np.dtype(it).itemsize * n
                    rows[p[3]].append([float(x) for x in items])
        values[name] = rows
    return values


def _struct_code(nptype: str) -> str:
    return {"i1": "b", "u1": "B", "i2": "h", "u2": "H",
            "i4": "i", "u4": "I", "f4": "f", "f8": "d"}[nptype]


def _assemble_ply(values: dict, path: Path) -> TriangleMesh:
    if "vertex" not in values:
        raise MeshFormatError(f"{path.name}: no vertex element")
    vert = values["vertex"]
    for key in ("x", "y", "z"):
        if key not in vert:
            raise MeshFormatError(f"{path.name}: vertex missing {key}")
    v = np.stack([np.asarray(vert["x"]), np.asarray(vert["y"]), np.asarray(vert["z"])], axis=1)
    colors = None
    if all(k in vert for k in ("red", "green", "blue")):
        c = np.stack([np.asarray(vert["red"]), np.asarray(vert["green"]),
                      np.asarray(vert["blue"])], axis=1).astype(np.float64)
        colors = c / 255.0 if c.max(initial=0.0) > 1.0 else c
    faces = []
    face_elem = values.get("face", {})
    idx_lists = face_elem.get("vertex_indices", face_elem.get("vertex_index", []))
    for poly in idx_lists:
        poly = [int(i) for i in poly]
        if len(poly) < 3:
            raise MeshFormatError(f"{path.name}: face with {len(poly)} vertices")
        for k in range(1, len(poly) - 1):  # fan triangulation
            faces.append((poly[0], poly[k], poly[k + 1]))
    return TriangleMesh(v, np.asarray(faces, dtype=np.int64).reshape(-1, 3), colors)


def _load_obj(path: Path) -> TriangleMesh:
    verts, colors, faces = [], [], []
    for line in path.read_text().splitlines():
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
            if len(tok) >= 7:  # non-standard but common: v x y z r g b
                colors.append([float(x) for x in tok[4:7]])
        elif tok[0] == "f":
            idx = [int(t.split("/")[0]) for t in tok[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            if len(idx) < 3:
                raise MeshFormatError(f"{path.name}: face with {len(idx)} vertices")
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    if not verts:
        raise MeshFormatError(f"{path.name}: no vertices")
    c = np.asarray(colors) if len(colors) == len(verts) and colors else None
    return TriangleMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64).reshape(-1, 3), c)


def save_mesh_ply(path: str | Path, mesh: TriangleMesh, binary: bool = True) -> None:
    """Write a mesh as PLY (binary little-endian by default)."""
    path = Path(path)
    n, m = len(mesh.vertices), len(mesh.faces)
    has_color = mesh.vertex_colors is not None
    lines = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
             f"element vertex {n}",
             "property float x", "property float y", "property float z"]
    if has_color:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines += [f"element face {m}", "property list uchar int vertex_indices", "end_header"]
    header = ("\n".join(lines) + "\n").encode("ascii")

    with open(path, "wb") as f:
        f.write(header)
        if binary:
            v32 = mesh.vertices.astype("<f4")
            if has_color:
                c8 = np.clip(np.round(mesh.vertex_colors * 255.0), 0, 255).astype(np.uint8)
                for i in range(n):
                    f.write(v32[i].tobytes() + c8[i].tobytes())
            else:
                f.write(v32.tobytes())
            for face in mesh.faces:
                f.write(struct.pack("<B3i", 3, *[int(x) for x in face]))
        else:
            for i in range(n):
                row = " ".join(f"{x:.9g}" for x in mesh.vertices[i])
                if has_color:
                    c = np.clip(np.round(mesh.vertex_colors[i] * 255.0), 0, 255).astype(int)
                    row += " " + " ".join(str(x) for x in c)
                f.write((row + "\n").encode("ascii"))
            for face in mesh.faces:
                f.write((f"3 {face[0]} {face[1]} {face[2]}\n").encode("ascii"))


def symmetry_sidecar_path(mesh_path: str | Path) -> Path:
    """Sidecar convention: <mesh>.symmetries.json next to the mesh file."""
    mesh_path = Path(mesh_path)
    return mesh_path.with_suffix(".symmetries.json")


def load_symmetries(mesh_path: str | Path, steps_per_turn: int = 36) -> tuple[Pose, ...]:
    """Load the symmetry set for a mesh from its JSON sidecar, if present.

    Sidecar schema::

        {
          "symmetries_discrete": [[16 floats, row-major 4x4], ...],
          "symmetries_continuous": [{"axis": [x,y,z], "offset": [x,y,z]}, ...]
        }

    Continuous axes are discretized into ``steps_per_turn`` rotations per full
    turn. The identity is always included (first).
    """
    poses = [Pose.identity()]
    sidecar = symmetry_sidecar_path(mesh_path)
    if not sidecar.exists():
        return tuple(poses)
    data = json.loads(sidecar.read_text())
    for flat in data.get("symmetries_discrete", []):
        M = np.asarray(flat, dtype=np.float64).reshape(4, 4)
        poses.append(Pose(M[:3, :3], M[:3, 3]))
    for entry in data.get("symmetries_continuous", []):
        axis = np.asarray(entry["axis"], dtype=np.float64)
        offset = np.asarray(entry.get("offset", [0.0, 0.0, 0.0]), dtype=np.float64)
        for k in range(1, steps_per_turn):
            R = axis_angle_rotation(axis, 2.0 * np.pi * k / steps_per_turn)
            poses.append(Pose(R, offset - R @ offset))
    return tuple(poses)
