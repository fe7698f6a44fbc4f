"""Pose parameterisation, kinematic chains, linear blend skinning and pose mirroring.

All numeric routines take and return float64 torch tensors so gradients can
flow through them; numpy inputs are converted on entry.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .formats import atomic_write_text
from .skeleton import Skeleton

UP = (0.0, 1.0, 0.0)
DEFAULT_TRANSLATION_CAP = 1.6
_DT = torch.float64


def _t(x) -> torch.Tensor:
    if isinstance(x, np.ndarray) and not x.flags.writeable:
        x = x.copy()
    return torch.as_tensor(x, dtype=_DT)


class GimbalError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid pose (forward vector + translation) and per-bone Euler angles for bones 2..B."""

    forward: object = (0.0, 0.0, 1.0)
    translation: object = (0.0, 0.0, 0.0)
    bone_euler: object = None

    def __post_init__(self):
        f = _t(self.forward)
        if float(torch.linalg.norm(f.detach())) <= 1e-6:
            raise ValueError("forward vector must be non-zero")
        object.__setattr__(self, "forward", f)
        object.__setattr__(self, "translation", _t(self.translation))
        if self.bone_euler is not None:
            object.__setattr__(self, "bone_euler", _t(self.bone_euler).reshape(-1, 3))

    @classmethod
    def rest(cls, num_bones: int = 1) -> "Pose":
        return cls(bone_euler=torch.zeros(max(num_bones - 1, 0), 3, dtype=_DT))

    def angles(self, num_bones: int) -> torch.Tensor:
        if self.bone_euler is None:
            return torch.zeros(num_bones - 1, 3, dtype=_DT)
        if self.bone_euler.shape[0] != num_bones - 1:
            raise ValueError(f"pose has {self.bone_euler.shape[0]} bone rotations, skeleton needs {num_bones - 1}")
        return self.bone_euler

    def vector(self) -> torch.Tensor:
        parts = [self.forward, self.translation]
        if self.bone_euler is not None:
            parts.append(self.bone_euler.reshape(-1))
        return torch.cat(parts)

    def rigid_vector(self) -> torch.Tensor:
        return torch.cat([self.forward, self.translation])

    def detach(self) -> "Pose":
        be = None if self.bone_euler is None else self.bone_euler.detach().clone()
        return Pose(self.forward.detach().clone(), self.translation.detach().clone(), be)


def squash_translation(raw, cap: float = DEFAULT_TRANSLATION_CAP):
    """Smoothly limit every component to (-cap, cap)."""
    return cap * torch.tanh(_t(raw) / cap)


def unsquash_translation(t, cap: float = DEFAULT_TRANSLATION_CAP):
    t = torch.clamp(_t(t) / cap, -1 + 1e-12, 1 - 1e-12)
    return cap * torch.atanh(t)


def rotation_from_forward(forward, check: bool = True) -> torch.Tensor:
    """Rotation whose columns are (x, y, z) with z along ``forward`` and zero roll.

    Works on (..., 3) batches. With ``check`` a forward vector parallel to the
    up direction raises :class:`GimbalError`.
    """
    f = _t(forward)
    z = f / torch.linalg.norm(f, dim=-1, keepdim=True).clamp_min(1e-12)
    up = torch.tensor(UP, dtype=_DT).expand_as(z)
    x = torch.linalg.cross(up, z, dim=-1)
    nx = torch.linalg.norm(x, dim=-1, keepdim=True)
    if check and bool((nx.detach() < 1e-6).any()):
        raise GimbalError("forward vector is parallel to the up direction")
    x = x / nx.clamp_min(1e-9)
    y = torch.linalg.cross(z, x, dim=-1)
    return torch.stack([x, y, z], dim=-1)


def euler_to_matrix(angles) -> torch.Tensor:
    """Intrinsic x-then-y-then-z rotation, R = Rx @ Ry @ Rz, for (..., 3) angles."""
    a = _t(angles)
    cx, cy, cz = torch.cos(a).unbind(-1)
    sx, sy, sz = torch.sin(a).unbind(-1)
    one, zero = torch.ones_like(cx), torch.zeros_like(cx)
    rx = torch.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], -1).reshape(a.shape[:-1] + (3, 3))
    ry = torch.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1).reshape(a.shape[:-1] + (3, 3))
    rz = torch.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], -1).reshape(a.shape[:-1] + (3, 3))
    return rx @ ry @ rz


def _homogeneous(r, t) -> torch.Tensor:
    g = torch.zeros(r.shape[:-2] + (4, 4), dtype=_DT)
    g[..., :3, :3] = r
    g[..., :3, 3] = t
    g[..., 3, 3] = 1.0
    return g


def rigid_matrix(pose: Pose, check: bool = False) -> torch.Tensor:
    return _homogeneous(rotation_from_forward(pose.forward, check=check), pose.translation)


def chain_transforms(skeleton: Skeleton, pose: Pose, check: bool = False) -> torch.Tensor:
    """World transforms G_b(pose) of every bone, (B, 4, 4), composed root-first."""
    nb = skeleton.num_bones
    joints = _t(skeleton.joints_local())
    rots = euler_to_matrix(pose.angles(nb))
    eye = torch.eye(3, dtype=_DT)
    out = [rigid_matrix(pose, check) @ _homogeneous(eye, joints[0])]
    for b in range(1, nb):
        g = _homogeneous(rots[b - 1], joints[b])
        out.append(out[skeleton.bones[b].parent] @ g)
    return torch.stack(out)


def rest_transforms(skeleton: Skeleton) -> torch.Tensor:
    return chain_transforms(skeleton, Pose.rest(skeleton.num_bones))


def rigid_transform(vertices, pose: Pose) -> torch.Tensor:
    v = _t(vertices)
    r = rotation_from_forward(pose.forward, check=False)
    return v @ r.T + pose.translation


def skin(vertices_rest, skeleton: Skeleton, pose: Pose, weights=None) -> torch.Tensor:
    """Linear blend skinning: V_i(pose) = (sum_b w_ib G_b(pose) G_b(rest)^-1) V_i."""
    v = _t(vertices_rest)
    w = _t(skeleton.weights if weights is None else weights)
    if w is None:
        raise ValueError("skeleton has no skinning weights")
    g = chain_transforms(skeleton, pose)
    rest_joint = _t(skeleton.joints_world())
    # G_b(rest) is a pure translation by the world joint position
    rel_r = g[:, :3, :3]
    rel_t = g[:, :3, 3] - (rel_r @ rest_joint[:, :, None])[..., 0]
    blend_r = torch.einsum("kb,bij->kij", w, rel_r)
    blend_t = w @ rel_t
    return torch.einsum("kij,kj->ki", blend_r, v) + blend_t


def pose_vertices(vertices_rest, pose: Pose, skeleton: Skeleton | None = None, weights=None) -> torch.Tensor:
    if skeleton is None or skeleton.num_bones == 1 and pose.bone_euler is None:
        return rigid_transform(vertices_rest, pose)
    return skin(vertices_rest, skeleton, pose, weights)


# ------------------------------------------------------------- symmetry ops

_M = (-1.0, 1.0, 1.0)
_ANGLE_SIGN = (1.0, -1.0, -1.0)


def _mirror_angles(angles, mirror_map):
    if angles is None:
        return None
    full = torch.cat([torch.zeros(1, 3, dtype=_DT), angles], dim=0)
    idx = torch.as_tensor(list(mirror_map), dtype=torch.long)
    return (full[idx] * _t(_ANGLE_SIGN))[1:]


def _bone_map(pose: Pose, skeleton):
    if skeleton is not None:
        return skeleton.mirror
    n = 1 if pose.bone_euler is None else pose.bone_euler.shape[0] + 1
    return tuple(range(n))


def mirror_pose(pose: Pose, skeleton: Skeleton | None = None) -> Pose:
    """Conjugate by the x-flip: R -> mRm, t -> mt, bone b takes bone m(b)'s mirrored angles."""
    m = _t(_M)
    return Pose(pose.forward * m, pose.translation * m, _mirror_angles(pose.bone_euler, _bone_map(pose, skeleton)))


def flip_pose(pose: Pose, skeleton: Skeleton | None = None) -> Pose:
    """Front-back hypothesis: r m g m with r a half-turn about y (forward and t negate z)."""
    rm = _t((1.0, 1.0, -1.0))
    return Pose(pose.forward * rm, pose.translation * rm, _mirror_angles(pose.bone_euler, _bone_map(pose, skeleton)))


def azimuth_elevation(forward) -> tuple[np.ndarray, np.ndarray]:
    """Azimuth (about y, 0 = facing the camera) and elevation of forward vectors, degrees."""
    f = np.atleast_2d(np.asarray(torch.as_tensor(forward).detach(), dtype=np.float64))
    az = np.degrees(np.arctan2(f[:, 0], f[:, 2]))
    el = np.degrees(np.arctan2(f[:, 1], np.hypot(f[:, 0], f[:, 2])))
    return az, el


def azimuth_error(a, b) -> np.ndarray:
    d = np.abs((np.asarray(a) - np.asarray(b) + 180.0) % 360.0 - 180.0)
    return d


# ----------------------------------------------------------------- JSON


def pose_to_dict(pose: Pose) -> dict:
    d = {"forward": pose.forward.detach().tolist(), "translation": pose.translation.detach().tolist()}
    if pose.bone_euler is not None and pose.bone_euler.numel():
        d["bone_euler"] = pose.bone_euler.detach().tolist()
    return d


def pose_from_dict(d: dict) -> Pose:
    for key in ("forward", "translation"):
        if key not in d or len(d[key]) != 3:
            raise ValueError(f"pose entry needs a 3-vector '{key}'")
    be = d.get("bone_euler") or None
    return Pose(d["forward"], d["translation"], be)


def save_poses(path, poses) -> None:
    atomic_write_text(path, json.dumps([pose_to_dict(p) for p in poses], indent=1))


def load_poses(path) -> list:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise ValueError("pose file must hold a JSON array")
    return [pose_from_dict(d) for d in data]
