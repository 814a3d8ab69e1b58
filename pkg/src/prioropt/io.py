"""Readers and writers for PLY, OBJ, PPM/PGM and JSON-lines logs."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import TriMesh


def write_ply_points(path, columns: dict) -> Path:
    """ASCII PLY vertex list; ``columns`` maps property name to a 1-D array."""
    path = Path(path)
    names = list(columns)
    data = np.column_stack([np.asarray(columns[k], dtype=np.float64) for k in names])
    lines = ["ply", "format ascii 1.0", f"element vertex {len(data)}"]
    lines += [f"property double {k}" for k in names]
    lines.append("end_header")
    body = "\n".join(" ".join(repr(float(x)) for x in row) for row in data)
    path.write_text("\n".join(lines) + "\n" + body + ("\n" if len(data) else ""))
    return path


def read_ply_points(path) -> dict:
    path = Path(path)
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        names, count = [], 0
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise ValueError(f"{path}: only ASCII point PLY is supported")
            if tok[0] == "element" and tok[1] == "vertex":
                count = int(tok[2])
            elif tok[0] == "property":
                names.append(tok[-1])
            elif tok[0] == "end_header":
                break
        data = np.loadtxt(fh, ndmin=2, max_rows=count) if count else np.zeros((0, len(names)))
    if data.shape != (count, len(names)):
        raise ValueError(f"{path}: expected {count} rows of {len(names)} values")
    return {k: data[:, i].copy() for i, k in enumerate(names)}


def write_points(path, points, normals=None) -> Path:
    cols = {"x": points[:, 0], "y": points[:, 1], "z": points[:, 2]}
    if normals is not None:
        cols.update(nx=normals[:, 0], ny=normals[:, 1], nz=normals[:, 2])
    return write_ply_points(path, cols)


def read_points(path):
    cols = read_ply_points(path)
    pts = np.column_stack([cols["x"], cols["y"], cols["z"]])
    nrm = np.column_stack([cols["nx"], cols["ny"], cols["nz"]]) if "nx" in cols else None
    return pts, nrm


def write_sdf_samples(path, points, sdf) -> Path:
    return write_ply_points(path, {"x": points[:, 0], "y": points[:, 1], "z": points[:, 2], "sdf": sdf})


def read_sdf_samples(path):
    cols = read_ply_points(path)
    return np.column_stack([cols["x"], cols["y"], cols["z"]]), cols["sdf"]


def write_obj(path, mesh: TriMesh) -> Path:
    path = Path(path)
    normals = mesh.vertex_normals() if mesh.normals is None and not mesh.empty else mesh.normals
    out = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    if normals is not None:
        out += [f"vn {x!r} {y!r} {z!r}" for x, y, z in normals.tolist()]
        out += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in (mesh.triangles + 1).tolist()]
    else:
        out += [f"f {a} {b} {c}" for a, b, c in (mesh.triangles + 1).tolist()]
    path.write_text("\n".join(out) + "\n")
    return path


def read_obj(path) -> TriMesh:
    verts, norms, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(t) for t in tok[1:4]])
        elif tok[0] == "vn":
            norms.append([float(t) for t in tok[1:4]])
        elif tok[0] == "f":
            idx = [int(t.split("/")[0]) - 1 for t in tok[1:]]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    normals = np.array(norms) if len(norms) == len(verts) and norms else None
    return TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), normals)


def write_ply_mesh(path, mesh: TriMesh) -> Path:
    """Binary little-endian PLY with float64 vertices and int32 triangle lists."""
    path = Path(path)
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(mesh.vertices)}\n"
              "property double x\nproperty double y\nproperty double z\n"
              f"element face {len(mesh.triangles)}\n"
              "property list uchar int vertex_indices\nend_header\n").encode("ascii")
    faces = np.zeros(len(mesh.triangles), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    faces["n"] = 3
    faces["idx"] = mesh.triangles
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(mesh.vertices.astype("<f8").tobytes())
        fh.write(faces.tobytes())
    return path


def read_ply_mesh(path) -> TriMesh:
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").split("\n")
    nv = int(next(l for l in header if l.startswith("element vertex")).split()[-1])
    nf = int(next(l for l in header if l.startswith("element face")).split()[-1])
    verts = np.frombuffer(raw, dtype="<f8", count=nv * 3, offset=end).reshape(nv, 3)
    faces = np.frombuffer(raw, dtype=[("n", "u1"), ("idx", "<i4", (3,))], count=nf, offset=end + nv * 24)
    return TriMesh(verts.copy(), faces["idx"].astype(np.int64))


def _to_bytes(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image) -> Path:
    """Binary P6 from an H x W x 3 array in [0, 1]."""
    path = Path(path)
    img = _to_bytes(image)
    h, w, _ = img.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    return path


def write_pgm(path, image) -> Path:
    path = Path(path)
    img = _to_bytes(image)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    return path


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} image")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos + 1)
    shape = (h, w, channels) if channels > 1 else (h, w)
    return data.reshape(shape).astype(np.float64) / maxval


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


class JsonlLog:
    """Append-only JSON-lines iteration log; ``None`` path discards records."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.write_text("")

    def __call__(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
