"""Reconstruction, regularisation and pose losses.

Each term is returned unweighted unless a ``weight`` is passed; ``total_loss``
applies :class:`LossWeights`. Norms are normalised: image/mask by pixel
count, flow by masked-pixel count, Laplacian/ARAP by vertex count and the
normal term by adjacent face pair count.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np
import torch

from .geometry import Mesh, as_index
from .posing import Pose, flip_pose, mirror_pose

_DT = torch.float64

TERMS = ("im", "mask", "flow", "sym", "pose", "arap", "lap", "nrm")


@dataclass(frozen=True)
class LossWeights:
    im: float = 1.0
    mask: float = 2.0
    flow: float = 100.0
    sym: float = 0.05
    pose: float = 0.1
    arap: float = 50.0
    lap: float = 1.0
    nrm: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")

    def scaled(self, **factors) -> "LossWeights":
        return replace(self, **{k: getattr(self, k) * v for k, v in factors.items()})


def _t(x):
    if isinstance(x, np.ndarray) and not x.flags.writeable:
        x = x.copy()
    return torch.as_tensor(x, dtype=_DT)


def _same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def image_loss(rendered, observed, rendered_mask, weight: float = 1.0, keep=None):
    """weight * mean over pixels of the channel-summed masked L1 error."""
    r, o, m = _t(rendered), _t(observed), _t(rendered_mask)
    _same_shape(r, o, "image_loss")
    _same_shape(r[..., 0], m, "image_loss mask")
    per_px = (m[..., None] * (r - o)).abs().sum(-1)
    if keep is not None:
        per_px = per_px * _t(keep)
    return weight * per_px.mean()


def mask_loss(rendered_mask, observed_mask, weight: float = 1.0, keep=None):
    r, o = _t(rendered_mask), _t(observed_mask)
    _same_shape(r, o, "mask_loss")
    err = (r - o) ** 2
    if keep is not None:
        err = err * _t(keep)
    return weight * err.mean()


def flow_loss(rendered_flow, observed_flow, observed_mask, weight: float = 1.0, keep=None):
    """weight * mean over observed-mask pixels of the squared flow error summed over (u, v)."""
    r, o, m = _t(rendered_flow), _t(observed_flow), _t(observed_mask)
    _same_shape(r, o, "flow_loss")
    _same_shape(r[..., 0], m, "flow_loss mask")
    if keep is not None:
        m = m * _t(keep)
    count = m.sum()
    if float(count) == 0.0:
        return r.sum() * 0.0
    return weight * (m[..., None] * (r - o) ** 2).sum() / count


def pose_rectification(loss_at, pose: Pose, weight: float = 1.0, skeleton=None):
    """Pick the better of ``pose`` and its front-back flip; penalise distance to it.

    ``loss_at`` is evaluated without gradients. Ties keep ``pose``. The target
    is treated as a constant; the distance covers the rigid parameters only.
    """
    flipped = flip_pose(pose, skeleton)
    with torch.no_grad():
        here = float(loss_at(pose))
        there = float(loss_at(flipped))
    best = flipped if there < here else pose
    target = best.rigid_vector().detach()
    return best, weight * ((pose.rigid_vector() - target) ** 2).sum()


def sym_pose_loss(pose_of_mirrored: Pose, pose: Pose, weight: float = 1.0, skeleton=None):
    a = pose_of_mirrored.vector()
    b = mirror_pose(pose, skeleton).vector()
    _same_shape(a, b, "sym_pose_loss")
    return weight * ((a - b) ** 2).sum()


# ----------------------------------------------------------- geometry terms


def _directed_edges(mesh: Mesh):
    e = mesh.edges
    both = np.concatenate([e, e[:, ::-1]], axis=0)
    return as_index(both[:, 0]), as_index(both[:, 1])


def arap_rotations(vertices, template, mesh: Mesh) -> torch.Tensor:
    """Per-vertex rotation best mapping template fan edges onto deformed fan edges."""
    v, vt = _t(vertices).detach(), _t(template).detach()
    i, j = _directed_edges(mesh)
    e, e0 = v[i] - v[j], vt[i] - vt[j]
    cov = torch.zeros(len(v), 3, 3, dtype=_DT).index_add_(0, i, e[:, :, None] * e0[:, None, :])
    u, _, vh = torch.linalg.svd(cov)
    d = torch.sign(torch.linalg.det(u @ vh))
    d = torch.where(d == 0, torch.ones_like(d), d)
    fix = torch.ones(len(v), 3, dtype=_DT)
    fix[:, 2] = d
    rot = u @ (fix[:, :, None] * vh)
    # unchanged fans get the exact identity so the residual is exactly zero there
    moved = torch.zeros(len(v), dtype=torch.bool).index_put_((i,), (e != e0).any(1), accumulate=True)
    return torch.where(moved[:, None, None], rot, torch.eye(3, dtype=_DT))


def arap_loss(vertices, template, mesh: Mesh):
    """Mean over vertices of the fan residual under the optimal per-vertex rotation.

    The rotations are solved without gradient; at the optimum the derivative
    of the residual w.r.t. the rotation vanishes, so the gradient is exact.
    """
    v, vt = _t(vertices), _t(template)
    rot = arap_rotations(v, vt, mesh)
    i, j = _directed_edges(mesh)
    e, e0 = v[i] - v[j], vt[i] - vt[j]
    res = e - torch.einsum("nab,nb->na", rot[i], e0)
    return (res * res).sum() / len(v)


def laplacian_loss(vertices, mesh: Mesh):
    """Mean squared offset of each vertex from the centroid of its one-ring."""
    v = _t(vertices)
    i, j = _directed_edges(mesh)
    deg = torch.zeros(len(v), dtype=_DT).index_add_(0, i, torch.ones(len(i), dtype=_DT))
    nsum = torch.zeros_like(v).index_add_(0, i, v[j])
    lap = v - nsum / deg.clamp_min(1.0)[:, None]
    lap = lap[deg > 0]
    return (lap * lap).sum() / len(v)


def face_normals(vertices, faces):
    v = _t(vertices)
    f = as_index(np.asarray(faces))
    t = v[f]
    return torch.linalg.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0], dim=-1)


def normal_loss(vertices, mesh: Mesh):
    """Mean over adjacent face pairs of 1 - cos(angle between their normals).

    Written as half the squared distance of the unit normals, which is the
    same quantity but vanishes exactly for bitwise-equal normals.
    """
    pairs = mesh.face_pairs
    if len(pairs) == 0:
        return _t(vertices).sum() * 0.0
    n = face_normals(vertices, mesh.faces)
    n = n / torch.linalg.norm(n, dim=1, keepdim=True).clamp_min(1e-12)
    a, b = as_index(pairs[:, 0]), as_index(pairs[:, 1])
    d = n[a] - n[b]
    return 0.5 * (d * d).sum(1).mean()


def total_loss(terms: dict, weights: LossWeights, active=None):
    """Weighted sum of the active terms and the weighted per-term breakdown."""
    total = torch.zeros((), dtype=_DT)
    breakdown = {}
    for name in TERMS:
        if name not in terms:
            continue
        if active is not None and name not in active:
            breakdown[name] = 0.0
            continue
        val = getattr(weights, name) * terms[name]
        total = total + val
        breakdown[name] = float(val.detach()) if isinstance(val, torch.Tensor) else float(val)
    return total, breakdown
