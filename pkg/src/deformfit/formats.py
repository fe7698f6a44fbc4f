"""Readers and writers for the on-disk formats (OBJ, PLY, PNG, .flo, PFM, weights)."""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Mesh

FLO_MAGIC = 202021.25
WEIGHTS_MAGIC = b"DOVW"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ----------------------------------------------------------------- OBJ / PLY


def write_obj(path, mesh: Mesh, vertices=None) -> None:
    v = mesh.vertices if vertices is None else np.asarray(vertices)
    lines = [f"v {x:.10g} {y:.10g} {z:.10g}" for x, y, z in v]
    if mesh.uv is not None:
        lines += [f"vt {a:.10g} {b:.10g}" for a, b in mesh.uv]
        lines += [f"f {a}/{a} {b}/{b} {c}/{c}" for a, b, c in mesh.faces + 1]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in mesh.faces + 1]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_obj(path) -> Mesh:
    verts, uvs, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(t) for t in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(t) for t in parts[1:3]])
        elif parts[0] == "f":
            idx = [int(t.split("/")[0]) - 1 for t in parts[1:]]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    uv = np.array(uvs) if len(uvs) == len(verts) and uvs else None
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), uv)


def write_sym(path, perm) -> None:
    perm = np.asarray(perm)
    pairs = [(i, int(j)) for i, j in enumerate(perm) if i <= j]
    atomic_write_text(path, "".join(f"{i} {j}\n" for i, j in pairs))


def read_sym(path, num_vertices: int) -> np.ndarray:
    perm = np.arange(num_vertices)
    for line in Path(path).read_text().split("\n"):
        if line.strip():
            i, j = (int(t) for t in line.split())
            perm[i], perm[j] = j, i
    return perm


def read_points(path) -> np.ndarray:
    """Vertex positions from an OBJ or ASCII PLY file."""
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return read_obj(path).vertices.copy()
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n, start = 0, None
    for k, line in enumerate(lines):
        tok = line.split()
        if tok[:2] == ["element", "vertex"]:
            n = int(tok[2])
        elif tok and tok[0] == "format" and tok[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        elif tok == ["end_header"]:
            start = k + 1
            break
    if start is None:
        raise ValueError(f"{path}: missing end_header")
    return np.array([[float(t) for t in lines[start + i].split()[:3]] for i in range(n)])


# ----------------------------------------------------------------- raster


def _png_bytes(arr: np.ndarray, mode: str) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def write_png_rgb(path, image) -> None:
    a = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    atomic_write_bytes(path, _png_bytes(a, "RGB"))


def write_png_gray(path, mask) -> None:
    a = np.clip(np.round(np.asarray(mask, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    atomic_write_bytes(path, _png_bytes(a, "L"))


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 255.0


def write_flo(path, flow) -> None:
    flow = np.asarray(flow, dtype="<f4")
    h, w, c = flow.shape
    if c != 2:
        raise ValueError("flow must be (H, W, 2)")
    header = struct.pack("<fii", FLO_MAGIC, w, h)
    atomic_write_bytes(path, header + flow.tobytes(order="C"))


def read_flo(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, w, h = struct.unpack("<fii", data[:12])
    if magic != FLO_MAGIC:
        raise ValueError(f"{path}: bad .flo magic {magic}")
    flow = np.frombuffer(data, dtype="<f4", count=2 * w * h, offset=12)
    return flow.reshape(h, w, 2).astype(np.float64)


def write_pfm(path, depth) -> None:
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    # PFM stores rows bottom-to-top
    atomic_write_bytes(path, header + d[::-1].tobytes(order="C"))


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"Pf":
        raise ValueError(f"{path}: only single-channel PFM is supported")
    w, h = (int(t) for t in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    d = np.frombuffer(parts[3], dtype=dtype, count=w * h).reshape(h, w)
    return d[::-1].astype(np.float64)


def write_weights(path, weights) -> None:
    w = np.asarray(weights, dtype="<f4")
    k, b = w.shape
    header = WEIGHTS_MAGIC + struct.pack("<iii", k, b, 0)
    atomic_write_bytes(path, header + w.tobytes(order="C"))


def read_weights(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: bad weights magic")
    k, b, _ = struct.unpack("<iii", data[4:16])
    return np.frombuffer(data, dtype="<f4", count=k * b, offset=16).reshape(k, b).astype(np.float64)


def write_npy(path, array) -> None:
    import io

    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(array), allow_pickle=False)
    atomic_write_bytes(path, buf.getvalue())
