"""Synthetic articulated sequences with exact masks, images and forward flow."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import formats
from .geometry import Mesh, Texture, build_icosphere
from .posing import Pose, load_poses, pose_vertices, save_poses
from .renderer import Camera, project, rasterize_hard, render_flow
from .skeleton import compute_skinning_weights, init_spine, load_skeleton, save_skeleton


class OffscreenError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    subdivision: int = 3
    axes: tuple = (0.55, 0.5, 1.3)
    # radial bumps on the mirror plane: (y, z, amplitude, width)
    bumps: tuple = ((0.45, 0.75, 0.45, 0.35), (-0.1, -0.9, 0.15, 0.3))
    n_spine_bones: int = 6
    n_frames: int = 36
    azimuth_start: float = 0.0
    azimuth_end: float = 360.0  # exclusive
    elevation: float = 0.0
    translation_amplitude: float = 0.0
    neck_amplitude: float = 0.0  # radians of pitch for each head-chain bone past the root
    tail_amplitude: float = 0.0  # radians of yaw for each tail-chain bone
    articulation_cycles: float = 2.0
    texture: str = "checker"
    texture_height: int = 32
    width: int = 64
    height: int = 64
    fov_deg: float = 25.0
    distance: float = 10.0
    background: tuple = (0.0, 0.0, 0.0)
    image_noise: float = 0.0
    flow_noise: float = 0.0
    mask_erosion: int = 0
    seed: int = 0

    def camera(self) -> Camera:
        return Camera(fov_deg=self.fov_deg, position=(0.0, 0.0, self.distance), width=self.width, height=self.height)


@dataclass
class GroundTruth:
    mesh: Mesh  # base icosphere (uv, symmetry)
    rest_vertices: np.ndarray
    skeleton: object
    poses: list
    texture: Texture


@dataclass
class Sequence:
    images: np.ndarray  # (N, H, W, 3)
    masks: np.ndarray  # (N, H, W)
    flows: np.ndarray | None  # (N - 1, H, W, 2) forward flow t -> t+1
    camera: Camera
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)


def rest_shape(spec: SceneSpec, mesh: Mesh) -> np.ndarray:
    """Ellipsoid with radial bumps centred on the mirror plane (so it stays symmetric)."""
    p = mesh.vertices
    gain = np.ones(len(p))
    for y, z, amp, width in spec.bumps:
        d2 = p[:, 0] ** 2 + (p[:, 1] - y) ** 2 + (p[:, 2] - z) ** 2
        gain += amp * np.exp(-d2 / width**2)
    return p * gain[:, None] * np.asarray(spec.axes)


def make_texture(spec: SceneSpec) -> Texture:
    """Mirror-symmetric atlas: a pattern for the right half, flipped into the left."""
    h = spec.texture_height
    half = h  # atlas is (h, 2h)
    if spec.texture == "solid":
        return Texture.uniform((0.8, 0.5, 0.3), h, 2 * h)
    yy, xx = np.mgrid[0:h, 0:half] + 0.5
    cells = (np.floor(yy / (h / 4)) + np.floor(xx / (half / 4))) % 2
    base = np.stack([0.25 + 0.6 * yy / h, 0.3 + 0.4 * cells, 0.8 - 0.5 * xx / half], axis=-1)
    base = np.clip(base * (0.6 + 0.4 * cells[..., None]), 0.0, 1.0)
    return Texture(np.concatenate([base[:, ::-1], base], axis=1))


def make_poses(spec: SceneSpec, skeleton) -> list:
    n = spec.n_frames
    nb = skeleton.num_bones
    half = spec.n_spine_bones // 2
    poses = []
    el = math.radians(spec.elevation)
    for k in range(n):
        a = math.radians(spec.azimuth_start + (spec.azimuth_end - spec.azimuth_start) * k / n)
        fwd = (math.sin(a) * math.cos(el), math.sin(el), math.cos(a) * math.cos(el))
        phase = 2 * math.pi * spec.articulation_cycles * k / n
        t = (spec.translation_amplitude * math.sin(phase), 0.5 * spec.translation_amplitude * math.cos(phase), 0.0)
        ang = np.zeros((nb - 1, 3))
        for b in range(1, half):
            ang[b - 1, 0] = spec.neck_amplitude * math.sin(phase)
        for b in range(half + 1, 2 * half):
            ang[b - 1, 1] = spec.tail_amplitude * math.sin(phase)
        poses.append(Pose(fwd, t, ang))
    return poses


def _check_onscreen(posed, camera: Camera, frame: int, margin: float = 1.0):
    xy, _, valid = project(posed, camera)
    xy = xy.numpy()
    if not valid.all() or xy.min() < margin or xy[:, 0].max() > camera.width - margin or xy[:, 1].max() > camera.height - margin:
        raise OffscreenError(f"frame {frame}: object leaves the image")


def generate(spec: SceneSpec) -> tuple[Sequence, GroundTruth]:
    """Render a sequence and return it with the ground truth that produced it."""
    if spec.n_frames < 2:
        raise ValueError("a sequence needs at least two frames")
    rng = np.random.default_rng(spec.seed)
    mesh = build_icosphere(spec.subdivision)
    rest = rest_shape(spec, mesh)
    skel = init_spine(rest, spec.n_spine_bones, mesh.on_plane)
    skel = skel.with_weights(compute_skinning_weights(rest, skel))
    poses = make_poses(spec, skel)
    tex = make_texture(spec)
    cam = spec.camera()
    images, masks, flows = [], [], []
    for k, pose in enumerate(poses):
        with torch.no_grad():
            posed = pose_vertices(rest, pose, skel)
        _check_onscreen(posed, cam, k)
        out = rasterize_hard(mesh, posed, tex, cam, spec.background)
        img, m = out.image, out.mask
        if spec.image_noise > 0:
            img = np.clip(img + rng.normal(0.0, spec.image_noise, img.shape), 0.0, 1.0)
        if spec.mask_erosion > 0:
            m = ndimage.binary_erosion(m > 0.5, iterations=spec.mask_erosion).astype(np.float64)
        images.append(img)
        masks.append(m)
        if k + 1 < len(poses):
            f = render_flow(mesh, skel, rest, pose, poses[k + 1], cam)
            if spec.flow_noise > 0:
                f = f + rng.normal(0.0, spec.flow_noise, f.shape) * (out.mask[..., None] > 0)
            flows.append(f)
    seq = Sequence(np.stack(images), np.stack(masks), np.stack(flows), cam, {"scene": asdict(spec)})
    return seq, GroundTruth(mesh, rest, skel, poses, tex)


# ------------------------------------------------------------------ dataset layout


def _camera_dict(cam: Camera) -> dict:
    return {"mode": cam.mode, "fov_deg": cam.fov_deg, "position": list(cam.position), "width": cam.width, "height": cam.height}


def write_dataset(root, seq: Sequence, gt: GroundTruth | None = None) -> None:
    """frames/*.png, masks/*.png, flows/*.flo, manifest.json and optionally gt/."""
    root = Path(root)
    n = len(seq)
    frames = [f"frames/{k:05d}.png" for k in range(n)]
    masks = [f"masks/{k:05d}.png" for k in range(n)]
    flows = [f"flows/{k:05d}.flo" for k in range(n - 1)] if seq.flows is not None else []
    for k in range(n):
        formats.write_png_rgb(root / frames[k], seq.images[k])
        formats.write_png_gray(root / masks[k], seq.masks[k])
    for k, name in enumerate(flows):
        formats.write_flo(root / name, seq.flows[k])
    manifest = {"frames": frames, "masks": masks, "flows": flows, "camera": _camera_dict(seq.camera), **seq.meta}
    if gt is not None:
        g = root / "gt"
        formats.write_obj(g / "shape.obj", gt.mesh, gt.rest_vertices)
        formats.write_sym(g / "sym.txt", gt.mesh.sym_perm)
        save_skeleton(g / "skeleton.json", gt.skeleton)
        formats.write_weights(g / "weights.bin", gt.skeleton.weights)
        save_poses(g / "poses.json", gt.poses)
        formats.write_png_rgb(g / "texture.png", gt.texture.pixels)
        manifest["ground_truth"] = "gt"
    formats.atomic_write_text(root / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(root, require_flow: bool = False) -> Sequence:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    images = np.stack([formats.read_png(root / f) for f in manifest["frames"]])
    masks = np.stack([formats.read_png(root / f) for f in manifest["masks"]])
    if masks.ndim == 4:
        masks = masks[..., 0]
    masks = (masks > 0.5).astype(np.float64)
    flows = None
    names = manifest.get("flows") or []
    missing = [f for f in names if not (root / f).exists()]
    if names and not missing:
        flows = np.stack([formats.read_flo(root / f) for f in names])
    if require_flow and (flows is None or len(flows) != len(images) - 1):
        raise FileNotFoundError(f"{root}: forward flow files are missing ({len(missing) or 'all'})")
    c = manifest.get("camera", {})
    cam = Camera(
        mode=c.get("mode", "perspective"),
        fov_deg=c.get("fov_deg", 25.0),
        position=tuple(c.get("position", (0.0, 0.0, 10.0))),
        width=images.shape[2],
        height=images.shape[1],
    )
    meta = {k: v for k, v in manifest.items() if k not in ("frames", "masks", "flows", "camera")}
    return Sequence(images, masks, flows, cam, meta)


def load_ground_truth(root) -> GroundTruth | None:
    g = Path(root) / "gt"
    if not (g / "shape.obj").exists():
        return None
    shape = formats.read_obj(g / "shape.obj")
    mesh = build_icosphere(_subdivision_for(shape.num_vertices))
    weights = formats.read_weights(g / "weights.bin")
    skel = load_skeleton(g / "skeleton.json", weights)
    tex = Texture(formats.read_png(g / "texture.png"))
    return GroundTruth(mesh, shape.vertices.copy(), skel, load_poses(g / "poses.json"), tex)


def _subdivision_for(num_vertices: int) -> int:
    for n in range(7):
        if 10 * 4**n + 2 == num_vertices:
            return n
    raise ValueError(f"{num_vertices} vertices is not an icosphere")
