"""Symmetric meshes, the hierarchical shape model and texture-space helpers."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import torch

MIRROR = np.diag([-1.0, 1.0, 1.0])
SYM_TOL = 1e-6
MAX_SUBDIVISION = 6


class ResourceLimitError(ValueError):
    pass


class SymmetryError(ValueError):
    pass


def as_index(a) -> torch.Tensor:
    """int64 torch copy of an index array (safe for read-only numpy input)."""
    if isinstance(a, torch.Tensor):
        return a.long()
    return torch.from_numpy(np.array(a, dtype=np.int64))


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh with optional per-vertex uv and a mirror permutation.

    ``sym_perm[i]`` is the index of the vertex obtained by flipping the x
    coordinate of vertex ``i``.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray | None = None
    sym_perm: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices, np.float64))
        object.__setattr__(self, "faces", _frozen(self.faces, np.int64))
        if self.uv is not None:
            object.__setattr__(self, "uv", _frozen(self.uv, np.float64))
        if self.sym_perm is not None:
            object.__setattr__(self, "sym_perm", _frozen(self.sym_perm, np.int64))
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def on_plane(self) -> np.ndarray:
        if self.sym_perm is None:
            return np.flatnonzero(np.abs(self.vertices[:, 0]) < SYM_TOL)
        return np.flatnonzero(self.sym_perm == np.arange(self.num_vertices))

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted (E, 2)."""
        e = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def neighbors(self) -> list[np.ndarray]:
        """One-ring (fan) vertex neighbours of every vertex."""
        nb = [set() for _ in range(self.num_vertices)]
        for a, b in self.edges:
            nb[a].add(b)
            nb[b].add(a)
        return [np.array(sorted(s), dtype=np.int64) for s in nb]

    @cached_property
    def face_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(edge id per face corner edge (F,3), faces adjacent to each edge (E,2), -1 if none).

        Corner edge k of face f runs from ``faces[f,k]`` to ``faces[f,(k+1)%3]``.
        """
        keys = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 3, 2), axis=2)
        edges = self.edges
        lookup = {(int(a), int(b)): i for i, (a, b) in enumerate(edges)}
        fe = np.array([[lookup[(int(k[0]), int(k[1]))] for k in fk] for fk in keys], dtype=np.int64)
        ef = -np.ones((len(edges), 2), dtype=np.int64)
        for f in range(self.num_faces):
            for eid in fe[f]:
                slot = 0 if ef[eid, 0] < 0 else 1
                ef[eid, slot] = f
        return fe, ef

    @cached_property
    def face_pairs(self) -> np.ndarray:
        """Ordered pairs (f, f') of faces sharing an edge."""
        _, ef = self.face_edges
        ef = ef[(ef >= 0).all(axis=1)]
        return np.concatenate([ef, ef[:, ::-1]], axis=0)

    def euler_characteristic(self) -> int:
        return self.num_vertices - len(self.edges) + self.num_faces

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(np.asarray(vertices), self.faces, self.uv, self.sym_perm)

    def is_symmetric(self, vertices=None, tol: float = SYM_TOL) -> bool:
        v = self.vertices if vertices is None else np.asarray(vertices)
        return bool(np.abs(v @ MIRROR - v[self.sym_perm]).max() <= tol)


def find_symmetry(vertices: np.ndarray, tol: float = SYM_TOL) -> np.ndarray:
    """Match every vertex to its x-mirrored twin; raise if any is unpaired."""
    from scipy.spatial import cKDTree

    v = np.asarray(vertices, dtype=np.float64)
    dist, idx = cKDTree(v).query(v @ MIRROR)
    if np.any(dist > tol):
        bad = np.flatnonzero(dist > tol)
        raise SymmetryError(f"{len(bad)} vertices have no mirror partner (first: {bad[0]})")
    if np.any(idx[idx] != np.arange(len(v))):
        raise SymmetryError("mirror pairing is not an involution")
    return idx


def _icosahedron():
    p = (1.0 + 5.0**0.5) / 2.0
    v = np.array(
        [
            [-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
            [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
            [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1],
        ],
        dtype=np.float64,
    )
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def build_icosphere(subdivision_level: int) -> Mesh:
    """Unit icosphere whose x=0 plane is a mirror plane of the vertex set.

    The canonical icosahedron (vertices at cyclic permutations of
    (0, +-1, +-phi)) already has every coordinate plane as a symmetry plane,
    and midpoint subdivision followed by normalisation preserves the mirror
    exactly in floating point.
    """
    if subdivision_level < 0:
        raise ValueError("subdivision level must be non-negative")
    if subdivision_level > MAX_SUBDIVISION:
        raise ResourceLimitError(
            f"subdivision level {subdivision_level} exceeds limit {MAX_SUBDIVISION}"
        )
    verts, faces = _icosahedron()
    verts = list(verts)
    for _ in range(subdivision_level):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces, dtype=np.int64)
    verts = np.array(verts)
    # outward orientation
    tri = verts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = (n * tri.mean(axis=1)).sum(axis=1) < 0
    faces[flip] = faces[flip][:, ::-1]
    perm = find_symmetry(verts)
    mesh = Mesh(verts, faces, sym_perm=perm)
    return compute_uv(mesh)


def uv_from_unit_vertices(vertices: np.ndarray) -> np.ndarray:
    """Pre-remap (u, v) in [-1, 1]^2; poles (y = z = 0) map to the origin."""
    v = np.asarray(vertices, dtype=np.float64)
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    radial = 2.0 * np.arccos(np.clip(np.abs(x), 0.0, 1.0)) / np.pi
    r = np.sqrt(y * y + z * z)
    safe = np.where(r > 0, r, 1.0)
    u = np.where(r > 0, radial * z / safe, 0.0)
    w = np.where(r > 0, radial * y / safe, 0.0)
    return np.stack([u, w], axis=1)


def compute_uv(mesh: Mesh, tol: float = 1e-3) -> Mesh:
    norms = np.linalg.norm(mesh.vertices, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValueError("uv parameterisation requires vertices on the unit sphere")
    uv = (uv_from_unit_vertices(mesh.vertices) + 1.0) / 2.0
    return Mesh(mesh.vertices, mesh.faces, uv, mesh.sym_perm)


@dataclass(frozen=True, eq=False)
class Texture:
    """RGB texture atlas, pixels (H, W, 3) in [0, 1].

    The right half of the atlas colours the x >= 0 side of the object and the
    left half, mirrored, colours the x < 0 side, so a horizontal flip of the
    atlas is the same as mirroring the object's appearance.
    """

    pixels: np.ndarray

    def __post_init__(self):
        p = np.array(self.pixels, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError("texture must be (H, W, 3)")
        if p.min(initial=0.0) < 0.0 or p.max(initial=0.0) > 1.0:
            raise ValueError("texture channels must lie in [0, 1]")
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)

    @classmethod
    def uniform(cls, color, height: int = 32, width: int = 64) -> "Texture":
        return cls(np.broadcast_to(np.asarray(color, dtype=np.float64), (height, width, 3)))


def mirror_texture(texture: Texture) -> Texture:
    return Texture(texture.pixels[:, ::-1])


# ---------------------------------------------------------------- shape model


@dataclass(frozen=True, eq=False)
class SymmetricLayout:
    """Index maps between free (half-mesh) parameters and full vertex offsets."""

    free_index: np.ndarray  # vertex index of each free parameter row
    source: np.ndarray  # free row feeding each vertex
    sign: np.ndarray  # (K, 3) multipliers applied to the free row

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "SymmetricLayout":
        if mesh.sym_perm is None:
            raise SymmetryError("mesh has no symmetry permutation")
        perm = mesh.sym_perm
        k = mesh.num_vertices
        idx = np.arange(k)
        on = perm == idx
        rep = on | (mesh.vertices[:, 0] > 0)
        free_index = np.flatnonzero(rep)
        row = -np.ones(k, dtype=np.int64)
        row[free_index] = np.arange(len(free_index))
        source = np.where(rep, row, row[perm])
        sign = np.ones((k, 3))
        sign[~rep, 0] = -1.0
        sign[on, 0] = 0.0
        if np.any(source < 0):
            raise SymmetryError("representative selection failed")
        return cls(_frozen(free_index, np.int64), _frozen(source, np.int64), _frozen(sign, np.float64))

    @property
    def num_free(self) -> int:
        return len(self.free_index)

    def expand(self, free):
        """Full (K, 3) offsets from free (..., R, 3) parameters; numpy or torch."""
        if isinstance(free, torch.Tensor):
            sign = torch.tensor(self.sign, dtype=free.dtype)
            return free[..., as_index(self.source), :] * sign
        return np.asarray(free)[..., self.source, :] * self.sign

    def restrict(self, offsets):
        """Free parameters reproducing a symmetric (K, 3) offset field."""
        free = np.array(np.asarray(offsets)[..., self.free_index, :], dtype=np.float64)
        on = self.sign[self.free_index, 0] == 0
        free[..., on, 0] = 0.0
        return free


@dataclass(frozen=True, eq=False)
class ShapeModel:
    """Rest shape ``V = V_base + dV_tmpl + dV_ins`` stored as half-mesh parameters."""

    base: Mesh
    delta_tmpl: np.ndarray = None
    delta_ins: np.ndarray = None
    layout: SymmetricLayout = field(default=None, repr=False)

    def __post_init__(self):
        layout = self.layout or SymmetricLayout.from_mesh(self.base)
        object.__setattr__(self, "layout", layout)
        shape = (layout.num_free, 3)
        for name in ("delta_tmpl", "delta_ins"):
            val = getattr(self, name)
            val = np.zeros(shape) if val is None else np.array(val, dtype=np.float64)
            if val.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {val.shape}")
            on = layout.sign[layout.free_index, 0] == 0
            val[on, 0] = 0.0
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    def template(self) -> np.ndarray:
        return self.base.vertices + self.layout.expand(self.delta_tmpl)


def compose_shape(model: ShapeModel) -> np.ndarray:
    lay = model.layout
    return model.base.vertices + lay.expand(model.delta_tmpl) + lay.expand(model.delta_ins)


def mesh_volume(vertices, faces) -> float:
    """Signed volume of a closed, outward-oriented triangle mesh."""
    t = np.asarray(vertices, dtype=np.float64)[np.asarray(faces)]
    return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)


def surface_area(vertices, faces) -> float:
    t = np.asarray(vertices, dtype=np.float64)[np.asarray(faces)]
    return float(0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1).sum())
