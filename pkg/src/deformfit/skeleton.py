"""Bone-structure initialisation and distance-based skinning weights."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .formats import atomic_write_text

DEFAULT_TEMPERATURE = 0.1
DEFAULT_EPSILON = 1e-4
QUADRANTS = ((1, 1), (-1, 1), (1, -1), (-1, -1))  # (sign x, sign z) of each leg


class DegenerateInputError(ValueError):
    pass


class MissingLegError(ValueError):
    pass


@dataclass(frozen=True)
class Bone:
    parent: int | None
    joint: tuple  # relative to the parent's joint (root: world position)
    rest_seg: tuple  # ((x, y, z), (x, y, z)) world segment at rest, start = joint


@dataclass(frozen=True, eq=False)
class Skeleton:
    bones: tuple
    weights: np.ndarray | None = None
    temperature: float = DEFAULT_TEMPERATURE
    epsilon: float = DEFAULT_EPSILON
    mirror: tuple = None  # bone index of each bone's mirror twin
    kind: tuple = field(default=None)  # "spine" or "leg<q>" per bone

    def __post_init__(self):
        n = len(self.bones)
        if self.mirror is None:
            object.__setattr__(self, "mirror", tuple(range(n)))
        if self.kind is None:
            object.__setattr__(self, "kind", ("spine",) * n)
        for b, bone in enumerate(self.bones):
            if b == 0:
                if bone.parent is not None:
                    raise ValueError("bone 0 must be the root")
            elif bone.parent is None or not 0 <= bone.parent < b:
                raise ValueError("bones must be topologically ordered with a single root")

    @property
    def num_bones(self) -> int:
        return len(self.bones)

    @property
    def parents(self) -> list:
        return [b.parent for b in self.bones]

    def joints_world(self) -> np.ndarray:
        return np.array([b.rest_seg[0] for b in self.bones], dtype=np.float64)

    def joints_local(self) -> np.ndarray:
        return np.array([b.joint for b in self.bones], dtype=np.float64)

    def segments(self) -> np.ndarray:
        return np.array([b.rest_seg for b in self.bones], dtype=np.float64)

    def with_weights(self, weights) -> "Skeleton":
        return replace(self, weights=np.asarray(weights, dtype=np.float64))


def _make_bones(segments, parents):
    segs = np.asarray(segments, dtype=np.float64)
    bones = []
    for b, (seg, p) in enumerate(zip(segs, parents)):
        joint = seg[0] if p is None else seg[0] - segs[p][0]
        bones.append(Bone(p, tuple(map(float, joint)), (tuple(map(float, seg[0])), tuple(map(float, seg[1])))))
    return tuple(bones)


def _extreme_pair(v: np.ndarray) -> tuple[int, int]:
    d2 = ((v[:, None, :] - v[None, :, :]) ** 2).sum(-1)
    best = d2.max()
    cand = np.argwhere(d2 >= best * (1 - 1e-9))
    dz = np.abs(v[cand[:, 0], 2] - v[cand[:, 1], 2])
    # ties (e.g. antipodes of a sphere): most z-aligned pair, then lowest indices
    order = np.lexsort((cand[:, 1], cand[:, 0], -np.round(dz, 9)))
    i, j = cand[order[0]]
    return int(i), int(j)


def init_spine(rest_vertices, n_spine_bones: int, on_plane=None, **kw) -> Skeleton:
    """Two chains of bones from the mesh centroid to its two extreme points.

    The extreme with larger z is the head. With ``on_plane`` given, the
    extremes are searched among those (mirror-plane) vertices only so the
    spine stays on the symmetry plane.
    """
    if n_spine_bones < 2 or n_spine_bones % 2:
        raise ValueError("n_spine_bones must be an even positive integer")
    v = np.asarray(rest_vertices, dtype=np.float64)
    pool = np.arange(len(v)) if on_plane is None or len(on_plane) < 2 else np.asarray(on_plane)
    i, j = _extreme_pair(v[pool])
    a, b = v[pool[i]], v[pool[j]]
    if np.linalg.norm(a - b) < 1e-9:
        raise DegenerateInputError("mesh has zero extent")
    head, tail = (a, b) if a[2] >= b[2] else (b, a)
    center = v.mean(axis=0)
    if on_plane is not None and len(on_plane):
        center[0] = 0.0
    half = n_spine_bones // 2
    segs, parents = [], []
    for end, first_parent in ((head, None), (tail, 0)):
        pts = [center + (end - center) * k / half for k in range(half + 1)]
        for k in range(half):
            segs.append((pts[k], pts[k + 1]))
            parents.append(first_parent if k == 0 else len(segs) - 2)
    return Skeleton(_make_bones(segs, parents), **kw)


def _spine_attach_points(skel: Skeleton):
    """Candidate spine joints and the bone that owns each."""
    pts, owners = [], []
    segs = skel.segments()
    for b in range(skel.num_bones):
        if skel.kind[b] != "spine":
            continue
        if b == 0:
            pts.append(segs[0][0])
            owners.append(0)
        pts.append(segs[b][1])
        owners.append(b)
    return np.array(pts), owners


def init_quadruped_legs(rest_vertices, skeleton: Skeleton, bones_per_leg: int, sym_perm=None) -> Skeleton:
    """Append four legs running from the nearest spine joint to the lowest vertex of each xz quadrant."""
    if bones_per_leg < 1:
        raise ValueError("bones_per_leg must be positive")
    v = np.asarray(rest_vertices, dtype=np.float64)
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    feet = {}
    for q, (sx, sz) in enumerate(QUADRANTS):
        if sym_perm is not None and sx < 0:
            feet[q] = int(sym_perm[feet[q - 1]])
            continue
        cand = np.flatnonzero((sx * x > 1e-9) & (sz * z > 1e-9))
        if len(cand) == 0:
            raise MissingLegError(f"no vertices in quadrant x{'+' if sx > 0 else '-'} z{'+' if sz > 0 else '-'}")
        # lowest y, then farthest out in xz (box corners), then index
        order = np.lexsort((cand, -np.round(x[cand] ** 2 + z[cand] ** 2, 12), np.round(y[cand], 12)))
        feet[q] = int(cand[order[0]])
    pts, owners = _spine_attach_points(skeleton)
    segs = [tuple(map(np.asarray, b.rest_seg)) for b in skeleton.bones]
    parents = list(skeleton.parents)
    kind = list(skeleton.kind)
    leg_start = []
    for q in range(4):
        foot = v[feet[q]]
        d = np.linalg.norm(pts - foot, axis=1)
        k = int(np.argmin(d))
        start = pts[k]
        leg_start.append(len(segs))
        for s in range(bones_per_leg):
            a = start + (foot - start) * s / bones_per_leg
            b = start + (foot - start) * (s + 1) / bones_per_leg
            segs.append((a, b))
            parents.append(owners[k] if s == 0 else len(segs) - 2)
            kind.append(f"leg{q}")
    mirror = list(skeleton.mirror)
    twin = {0: 1, 1: 0, 2: 3, 3: 2}
    for q in range(4):
        for s in range(bones_per_leg):
            mirror.append(leg_start[twin[q]] + s)
    return Skeleton(
        _make_bones(segs, parents),
        temperature=skeleton.temperature,
        epsilon=skeleton.epsilon,
        mirror=tuple(mirror),
        kind=tuple(kind),
    )


def segment_distance_sq(points, seg_a, seg_b) -> np.ndarray:
    """Squared distance from each point (K, 3) to each segment (B,) -> (K, B)."""
    p = np.asarray(points, dtype=np.float64)[:, None, :]
    a = np.asarray(seg_a, dtype=np.float64)[None]
    d = np.asarray(seg_b, dtype=np.float64)[None] - a
    denom = np.maximum((d * d).sum(-1), 1e-300)
    r = np.clip(((p - a) * d).sum(-1) / denom, 0.0, 1.0)
    diff = p - (a + r[..., None] * d)
    return (diff * diff).sum(-1)


def compute_skinning_weights(rest_vertices, skeleton: Skeleton, temperature=None, epsilon=None) -> np.ndarray:
    """Softmax (with temperature) over inverse squared vertex-to-bone distances."""
    t = skeleton.temperature if temperature is None else temperature
    eps = skeleton.epsilon if epsilon is None else epsilon
    if t <= 0 or eps <= 0:
        raise ValueError("temperature and epsilon must be positive")
    segs = skeleton.segments()
    d = 1.0 / (segment_distance_sq(rest_vertices, segs[:, 0], segs[:, 1]) + eps)
    logits = d / t
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


# ----------------------------------------------------------------- JSON


def skeleton_to_dict(skel: Skeleton) -> dict:
    return {
        "bones": [
            {"parent": b.parent, "joint": list(b.joint), "rest_seg": [list(b.rest_seg[0]), list(b.rest_seg[1])]}
            for b in skel.bones
        ],
        "temperature": skel.temperature,
        "epsilon": skel.epsilon,
        "mirror": list(skel.mirror),
        "kind": list(skel.kind),
    }


def skeleton_from_dict(d: dict, weights=None) -> Skeleton:
    bones = tuple(
        Bone(b["parent"], tuple(b["joint"]), (tuple(b["rest_seg"][0]), tuple(b["rest_seg"][1]))) for b in d["bones"]
    )
    return Skeleton(
        bones,
        weights=weights,
        temperature=d.get("temperature", DEFAULT_TEMPERATURE),
        epsilon=d.get("epsilon", DEFAULT_EPSILON),
        mirror=tuple(d["mirror"]) if "mirror" in d else None,
        kind=tuple(d["kind"]) if "kind" in d else None,
    )


def save_skeleton(path, skel: Skeleton) -> None:
    atomic_write_text(path, json.dumps(skeleton_to_dict(skel), indent=1))


def load_skeleton(path, weights=None) -> Skeleton:
    return skeleton_from_dict(json.loads(Path(path).read_text()), weights)
