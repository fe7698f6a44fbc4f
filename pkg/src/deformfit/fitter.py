"""Per-sequence analysis-by-synthesis fitting in three phases.

Phase 1 learns the symmetric template and per-frame rigid poses from masks.
Phase 2 adds front-back pose rectification. Phase 3 builds a skeleton on the
template and adds per-frame articulation, per-frame shape offsets and
textures, with image, flow and ARAP terms.

All per-frame quantities are free parameters optimised directly; parameter
names are ``group/frame`` (``fwd/3``) so :class:`~deformfit.diffcore.Adam`
can give each group its own learning rate.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import formats
from .diffcore import Adam
from .geometry import Mesh, SymmetricLayout, Texture, build_icosphere
from .objectives import (
    LossWeights,
    arap_loss,
    flow_loss,
    image_loss,
    laplacian_loss,
    mask_loss,
    normal_loss,
    total_loss,
)
from .posing import (
    Pose,
    flip_pose,
    pose_vertices,
    save_poses,
    skin,
    squash_translation,
    unsquash_translation,
)
from .renderer import Camera, flow_from_visibility, rasterize_hard, rasterize_soft
from .skeleton import Skeleton, compute_skinning_weights, init_quadruped_legs, init_spine, save_skeleton

log = logging.getLogger(__name__)
_DT = torch.float64


class FitDivergedError(FloatingPointError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class FitConfig:
    phase1_epochs: int = 6
    phase2_epochs: int = 2
    phase3_epochs: int = 13
    iters_per_epoch: int = 20
    frames_per_batch: int = 8
    subdivision: int = 3
    n_spine_bones: int = 6
    bones_per_leg: int = 0
    temperature: float = 0.1
    epsilon: float = 1e-4
    sharpness: float = 0.02
    lr_template: float = 1e-2
    lr_pose: float = 2e-2
    lr_instance: float = 1e-3
    lr_bones: float = 1e-2
    lr_texture: float = 3e-2
    lr_decay: float = 0.7
    lr_decay_after: int = 8
    smooth_decay: float = 0.7
    smooth_floor: float = 0.05
    average_probability: float = 0.5
    translation_cap: float = 1.6
    texture_height: int = 32
    rectify: str = "snap"  # "snap" | "penalty"
    init_template: str = "ellipsoid"  # "ellipsoid" (sized from the masks) | "sphere"
    yaw_search_step: float = 15.0  # degrees; 0 disables the per-epoch local yaw search
    yaw_search_span: float = 180.0
    yaw_continuity: float = 2e-3  # cost of a half-turn between neighbouring frames
    init_forward: tuple = (0.0, 0.0, 1.0)
    use_image: bool = True
    use_flow: bool = True
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if min(self.phase1_epochs, self.phase2_epochs, self.phase3_epochs) < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.iters_per_epoch < 1 or self.frames_per_batch < 1:
            raise ValueError("iters_per_epoch and frames_per_batch must be positive")
        if self.rectify not in ("snap", "penalty"):
            raise ValueError("rectify must be 'snap' or 'penalty'")
        if self.init_template not in ("ellipsoid", "sphere"):
            raise ValueError("init_template must be 'ellipsoid' or 'sphere'")
        if not 0.0 <= self.average_probability <= 1.0:
            raise ValueError("average_probability must lie in [0, 1]")

    @property
    def total_epochs(self) -> int:
        return self.phase1_epochs + self.phase2_epochs + self.phase3_epochs

    def phase_of(self, epoch: int) -> int:
        if epoch < self.phase1_epochs:
            return 1
        if epoch < self.phase1_epochs + self.phase2_epochs:
            return 2
        return 3


# ------------------------------------------------------------------ results


@dataclass
class FitResult:
    mesh: Mesh
    template_free: np.ndarray  # (R, 3)
    forwards: np.ndarray  # (N, 3)
    translations: np.ndarray  # (N, 3) effective (already squashed)
    instance_free: np.ndarray  # (N, R, 3)
    textures: np.ndarray  # (N, H, 2H, 3) full atlases
    skeleton: Skeleton | None = None
    bone_euler: np.ndarray | None = None  # (N, B - 1, 3)
    phase: int = 0
    history: list = field(default_factory=list)

    @property
    def layout(self) -> SymmetricLayout:
        return SymmetricLayout.from_mesh(self.mesh)

    def __len__(self) -> int:
        return len(self.forwards)

    def template(self) -> np.ndarray:
        return self.mesh.vertices + self.layout.expand(self.template_free)

    def rest_vertices(self, k: int) -> np.ndarray:
        return self.template() + self.layout.expand(self.instance_free[k])

    def mean_shape(self) -> np.ndarray:
        return self.template() + self.layout.expand(self.instance_free.mean(axis=0))

    def texture(self, k: int | None = None) -> Texture:
        px = self.textures.mean(axis=0) if k is None else self.textures[k]
        return Texture(np.clip(px, 0.0, 1.0))

    def pose(self, k: int, articulation_frame: int | None = None) -> Pose:
        a = k if articulation_frame is None else articulation_frame
        be = None if self.bone_euler is None else self.bone_euler[a]
        return Pose(self.forwards[k], self.translations[k], be)

    def posed(self, shape_frame: int, articulation_frame: int, rigid_frame: int) -> torch.Tensor:
        rest = self.rest_vertices(shape_frame)
        pose = Pose(
            self.forwards[rigid_frame],
            self.translations[rigid_frame],
            None if self.bone_euler is None else self.bone_euler[articulation_frame],
        )
        if self.skeleton is None:
            return pose_vertices(rest, pose)
        w = compute_skinning_weights(rest, self.skeleton)
        return skin(rest, self.skeleton, pose, w)

    def render_mask(self, camera: Camera):
        """Callable (shape_frame, articulation_frame, rigid_frame) -> hard mask."""

        def render(s, a, r):
            with torch.no_grad():
                return rasterize_hard(self.mesh, self.posed(s, a, r), None, camera).mask

        return render


# ------------------------------------------------------------------ helpers


def symmetric_atlas(half: torch.Tensor) -> torch.Tensor:
    """(3, H, H) right half -> (3, H, 2H) atlas whose left half is its mirror image."""
    return torch.cat([torch.flip(half, dims=[2]), half], dim=2)


def sequence_average(shapes, textures):
    """Mean rest shape and mean texture over a window of frames."""
    if len(shapes) == 0:
        raise ValueError("cannot average an empty window")
    s = torch.stack(list(shapes)).mean(0)
    t = None if textures is None else torch.stack(list(textures)).mean(0)
    return s, t


class _Model:
    """Trainable parameters and the differentiable forward model."""

    def __init__(self, mesh: Mesh, n_frames: int, cfg: FitConfig):
        self.mesh = mesh
        self.cfg = cfg
        self.layout = SymmetricLayout.from_mesh(mesh)
        self.base = torch.tensor(mesh.vertices, dtype=_DT)
        self.n = n_frames
        r = self.layout.num_free
        self.params: dict = {"tmpl": torch.zeros(r, 3, dtype=_DT)}
        fwd = torch.tensor(cfg.init_forward, dtype=_DT)
        for k in range(n_frames):
            self.params[f"fwd/{k}"] = fwd.clone()
            self.params[f"trans/{k}"] = torch.zeros(3, dtype=_DT)
            self.params[f"ins/{k}"] = torch.zeros(r, 3, dtype=_DT)
            h = cfg.texture_height
            self.params[f"tex/{k}"] = torch.full((3, h, h), 0.5, dtype=_DT)
        self.skeleton: Skeleton | None = None
        self._x_free = torch.tensor(self.layout.sign[self.layout.free_index, 0] != 0)

    # parameters -------------------------------------------------------

    def groups(self, phase: int) -> set:
        g = {"tmpl", "fwd", "trans"}
        if phase >= 3:
            g |= {"ins", "bones", "tex"}
        return g

    def trainable(self, phase: int) -> list:
        active = self.groups(phase)
        return [n for n in self.params if Adam.group_of(n) in active]

    def build_skeleton(self):
        rest = self.template().detach().numpy()
        cfg = self.cfg
        skel = init_spine(rest, cfg.n_spine_bones, self.mesh.on_plane, temperature=cfg.temperature, epsilon=cfg.epsilon)
        if cfg.bones_per_leg > 0:
            skel = init_quadruped_legs(rest, skel, cfg.bones_per_leg, self.mesh.sym_perm)
        self.skeleton = skel
        for k in range(self.n):
            self.params[f"bones/{k}"] = torch.zeros(skel.num_bones - 1, 3, dtype=_DT)

    # forward model ----------------------------------------------------

    def _free(self, name):
        # on-plane vertices have no x freedom
        p = self.params[name]
        return torch.stack([p[:, 0] * self._x_free, p[:, 1], p[:, 2]], dim=1)

    def template(self) -> torch.Tensor:
        return self.base + self.layout.expand(self._free("tmpl"))

    def rest(self, k: int, phase: int) -> torch.Tensor:
        v = self.template()
        if phase >= 3:
            v = v + self.layout.expand(self._free(f"ins/{k}"))
        return v

    def atlas(self, k: int) -> torch.Tensor:
        return symmetric_atlas(self.params[f"tex/{k}"].clamp(0.0, 1.0))

    def pose(self, k: int, phase: int) -> Pose:
        be = self.params.get(f"bones/{k}") if phase >= 3 else None
        return Pose(self.params[f"fwd/{k}"], squash_translation(self.params[f"trans/{k}"], self.cfg.translation_cap), be)

    def set_pose(self, k: int, pose: Pose):
        with torch.no_grad():
            self.params[f"fwd/{k}"].copy_(pose.forward)
            self.params[f"trans/{k}"].copy_(unsquash_translation(pose.translation, self.cfg.translation_cap))
            if pose.bone_euler is not None and f"bones/{k}" in self.params:
                self.params[f"bones/{k}"].copy_(pose.bone_euler)

    def weights_for(self, rest: torch.Tensor) -> np.ndarray:
        return compute_skinning_weights(rest.detach().numpy(), self.skeleton)

    def place(self, rest, pose: Pose, weights=None):
        if self.skeleton is None or pose.bone_euler is None:
            return pose_vertices(rest, pose)
        return skin(rest, self.skeleton, pose, weights)

    # export -----------------------------------------------------------

    def snapshot(self, phase: int, history) -> FitResult:
        with torch.no_grad():
            p = self.params
            free = lambda n: self._free(n).numpy().copy()  # noqa: E731
            fwd = np.stack([p[f"fwd/{k}"].numpy() for k in range(self.n)])
            tr = np.stack([squash_translation(p[f"trans/{k}"], self.cfg.translation_cap).numpy() for k in range(self.n)])
            ins = np.stack([free(f"ins/{k}") for k in range(self.n)])
            tex = np.stack([self.atlas(k).permute(1, 2, 0).numpy() for k in range(self.n)])
            bones = None
            skel = self.skeleton
            if skel is not None:
                bones = np.stack([p[f"bones/{k}"].numpy() for k in range(self.n)])
            res = FitResult(self.mesh, free("tmpl"), fwd, tr, ins, tex, None, bones, phase, list(history))
            if skel is not None:
                res.skeleton = skel.with_weights(compute_skinning_weights(res.mean_shape(), skel))
            return res


# ------------------------------------------------------------------ fitting


def _observed(seq):
    return (
        torch.tensor(seq.images, dtype=_DT),
        torch.tensor(seq.masks, dtype=_DT),
        None if seq.flows is None else torch.tensor(seq.flows, dtype=_DT),
    )


def fit_sequence(seq, config: FitConfig = FitConfig(), callback=None, checkpoint_dir=None, stop_after_phase: int = 3) -> FitResult:
    """Fit a symmetric deformable model to one observed sequence.

    ``seq`` needs ``images``, ``masks``, ``flows`` (or None) and ``camera``.
    ``callback(row)`` receives one history row per iteration.
    """
    cfg = config
    n = len(seq.masks)
    if n < 1:
        raise ValueError("empty sequence")
    if cfg.weights.flow > 0 and cfg.use_flow and cfg.phase3_epochs > 0 and stop_after_phase >= 3 and seq.flows is None:
        raise FileNotFoundError("flow loss is enabled but the sequence has no forward flow")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    cam: Camera = seq.camera
    mesh = build_icosphere(cfg.subdivision)
    model = _Model(mesh, n, cfg)
    images, masks, flows = _observed(seq)
    lrs = {
        "tmpl": cfg.lr_template,
        "fwd": cfg.lr_pose,
        "trans": cfg.lr_pose,
        "ins": cfg.lr_instance,
        "bones": cfg.lr_bones,
        "tex": cfg.lr_texture,
    }
    opt = Adam(lrs)
    if cfg.init_template == "ellipsoid":
        _init_ellipsoid(model, seq.masks, cam)
    if checkpoint_dir is not None:
        formats.atomic_write_text(Path(checkpoint_dir) / "config.txt", config_echo(cfg))
    history: list = []
    window = min(cfg.frames_per_batch, n)
    phase = 0
    last_epoch = min(cfg.total_epochs, sum((cfg.phase1_epochs, cfg.phase2_epochs, cfg.phase3_epochs)[:stop_after_phase]))
    for epoch in range(last_epoch):
        new_phase = cfg.phase_of(epoch)
        if new_phase != phase:
            if phase and checkpoint_dir is not None:
                save_fit(model.snapshot(phase, history), Path(checkpoint_dir) / f"phase{phase}")
            phase = new_phase
            if phase == 3 and model.skeleton is None:
                model.build_skeleton()
            log.info("phase %d from epoch %d", phase, epoch)
        opt.scale = cfg.lr_decay ** max(0, epoch - cfg.lr_decay_after + 1) if epoch >= cfg.lr_decay_after else 1.0
        p3_epoch = epoch - cfg.phase1_epochs - cfg.phase2_epochs
        smooth = max(cfg.smooth_floor, cfg.smooth_decay ** max(0, p3_epoch))
        weights = cfg.weights.scaled(lap=smooth, nrm=smooth)
        if phase < 3 and cfg.yaw_search_step > 0:
            _yaw_search(model, phase, masks, cam, opt)
        for it in range(cfg.iters_per_epoch):
            start = int(rng.integers(0, n - window + 1))
            frames = list(range(start, start + window))
            average = phase >= 3 and rng.random() < cfg.average_probability
            names = model.trainable(phase)
            leaves = {nm: model.params[nm].requires_grad_(True) for nm in names}
            total, terms = _window_loss(model, frames, phase, average, weights, images, masks, flows, cam)
            if not torch.isfinite(total):
                for t in leaves.values():
                    t.requires_grad_(False)
                raise FitDivergedError(f"non-finite loss at epoch {epoch} iteration {it}", model.snapshot(phase, history))
            grads = torch.autograd.grad(total, list(leaves.values()), allow_unused=True)
            for t in leaves.values():
                t.requires_grad_(False)
            opt.step(model.params, dict(zip(leaves, grads)))
            if phase >= 2:
                _rectify(model, frames, phase, images, masks, cam, opt)
            row = {"epoch": epoch, "iteration": it, "phase": phase, "total": float(total.detach()), **terms}
            history.append(row)
            if callback is not None:
                callback(row)
    result = model.snapshot(phase, history)
    if checkpoint_dir is not None and phase:
        save_fit(result, Path(checkpoint_dir) / f"phase{phase}")
    return result


def _frame_loss_at(model: _Model, k, rest, pose, phase, images, masks, cam, weights=None, texture=None):
    """Photometric + silhouette loss of one frame under a candidate pose (no flow)."""
    posed = model.place(rest, pose, weights)
    out = rasterize_soft(model.mesh, posed, texture, cam, model.cfg.sharpness, model.cfg.background)
    w = model.cfg.weights
    loss = w.mask * mask_loss(out.mask, masks[k])
    if texture is not None:
        loss = loss + w.im * image_loss(out.image, images[k], out.mask)
    return loss


def _window_loss(model: _Model, frames, phase, average, weights: LossWeights, images, masks, flows, cam):
    cfg = model.cfg
    rests = {k: model.rest(k, phase) for k in frames}
    textured = phase >= 3 and cfg.use_image
    atlases = {k: model.atlas(k) for k in frames} if textured else {}
    if average:
        mean_rest, mean_tex = sequence_average([rests[k] for k in frames], [atlases[k] for k in frames] if textured else None)
        rests = {k: mean_rest for k in frames}
        if textured:
            atlases = {k: mean_tex for k in frames}
    acc = {name: [] for name in ("mask", "im", "flow", "arap", "lap", "nrm", "pose")}
    tmpl = model.template()
    for k in frames:
        rest = rests[k]
        pose = model.pose(k, phase)
        w = model.weights_for(rest) if phase >= 3 else None
        posed = model.place(rest, pose, w)
        out = rasterize_soft(model.mesh, posed, atlases.get(k), cam, cfg.sharpness, cfg.background)
        acc["mask"].append(mask_loss(out.mask, masks[k]))
        if textured:
            acc["im"].append(image_loss(out.image, images[k], out.mask))
        if phase >= 3 and cfg.use_flow and flows is not None and k + 1 in rests and k < len(flows):
            nxt = model.place(rest, model.pose(k + 1, phase), w)
            pred = flow_from_visibility(out.face_id, out.bary, model.mesh.faces, posed, nxt, cam)
            # image-normalised units keep the flow weight independent of resolution
            unit = 2.0 / cam.width
            acc["flow"].append(flow_loss(pred * unit, flows[k] * unit, masks[k]))
        if phase >= 3:
            acc["arap"].append(arap_loss(rest, tmpl, model.mesh))
            acc["lap"].append(laplacian_loss(rest, model.mesh))
            acc["nrm"].append(normal_loss(rest, model.mesh))
        if phase >= 2 and cfg.rectify == "penalty":
            best = _best_pose(model, k, rest, pose, phase, images, masks, cam, w, atlases.get(k))
            acc["pose"].append(((pose.rigid_vector() - best.rigid_vector().detach()) ** 2).sum())
    if phase < 3:
        acc["lap"].append(laplacian_loss(tmpl, model.mesh))
        acc["nrm"].append(normal_loss(tmpl, model.mesh))
    terms = {name: torch.stack(vals).mean() for name, vals in acc.items() if vals}
    return total_loss(terms, weights)


def _best_pose(model, k, rest, pose, phase, images, masks, cam, weights=None, texture=None):
    flipped = flip_pose(pose, model.skeleton if phase >= 3 else None)
    with torch.no_grad():
        here = float(_frame_loss_at(model, k, rest, pose, phase, images, masks, cam, weights, texture))
        there = float(_frame_loss_at(model, k, rest, flipped, phase, images, masks, cam, weights, texture))
    return flipped if there < here else pose


def _rectify(model: _Model, frames, phase, images, masks, cam, opt: Adam):
    """Snap each frame's pose to its flipped hypothesis when that explains the frame better."""
    if model.cfg.rectify != "snap":
        return
    with torch.no_grad():
        for k in frames:
            rest = model.rest(k, phase)
            pose = model.pose(k, phase).detach()
            w = model.weights_for(rest) if phase >= 3 else None
            tex = model.atlas(k) if phase >= 3 and model.cfg.use_image else None
            best = _best_pose(model, k, rest, pose, phase, images, masks, cam, w, tex)
            if best is not pose:
                model.set_pose(k, best)
                for g in ("fwd", "trans", "bones"):
                    opt.state.pop(f"{g}/{k}", None)


def mask_semi_axes(mask) -> tuple[float, float]:
    """Semi-axes (major, minor) in pixels of the ellipse with the mask's second moments."""
    ys, xs = np.nonzero(np.asarray(mask) > 0.5)
    if len(xs) < 3:
        return 0.0, 0.0
    cov = np.cov(np.stack([xs, ys]))
    ev = np.sort(np.linalg.eigvalsh(cov))[::-1]
    return tuple(2.0 * np.sqrt(np.maximum(ev, 0.0)))


def _init_ellipsoid(model: _Model, masks, cam: Camera):
    """Start from an ellipsoid elongated along z, sized from the observed silhouettes.

    The longest major semi-axis over the sequence sets the length, the
    thinnest minor semi-axis the width and the median minor semi-axis the
    height.
    """
    axes = np.array([mask_semi_axes(m) for m in masks])
    axes = axes[axes[:, 0] > 0]
    if len(axes) == 0:
        return
    to_world = cam.object_distance / cam.focal_px
    a = np.array([axes[:, 1].min(), np.median(axes[:, 1]), axes[:, 0].max()]) * to_world
    a = np.maximum(a, 0.05)
    offsets = model.mesh.vertices * (a - 1.0)
    with torch.no_grad():
        model.params["tmpl"].copy_(torch.tensor(model.layout.restrict(offsets)))


def _rotate_yaw(forward: torch.Tensor, angle: float) -> torch.Tensor:
    c, s_ = math.cos(angle), math.sin(angle)
    f = forward
    return torch.stack([c * f[0] + s_ * f[2], f[1], -s_ * f[0] + c * f[2]])


def viterbi(unary: np.ndarray, pairwise: np.ndarray) -> list:
    """Minimum-cost label sequence; unary (N, C), pairwise (N - 1, C, C) from label t to t+1."""
    n = len(unary)
    cost = unary[0].copy()
    back = np.zeros(unary.shape, dtype=np.int64)
    for t in range(1, n):
        total = cost[:, None] + pairwise[t - 1]
        back[t] = np.argmin(total, axis=0)
        cost = total[back[t], np.arange(unary.shape[1])] + unary[t]
    path = [int(np.argmin(cost))]
    for t in range(n - 1, 0, -1):
        path.append(int(back[t][path[-1]]))
    return path[::-1]


def _yaw_search(model: _Model, phase, masks, cam, opt: Adam):
    """Re-pick every frame's heading among yaw candidates with a temporal-continuity prior.

    Candidates are the current heading rotated by multiples of the search
    step within +-span; the unary cost is the frame's mask loss and the
    pairwise cost grows linearly with the heading change between neighbours.
    """
    cfg = model.cfg
    steps = int(round(cfg.yaw_search_span / cfg.yaw_search_step))
    offsets = [math.radians(cfg.yaw_search_step * j) for j in range(-steps, steps + 1)]
    cands, unary, yaws = [], [], []
    with torch.no_grad():
        rest = model.rest(0, phase)
        for k in range(model.n):
            pose = model.pose(k, phase).detach()
            row_c, row_u, row_y = [], [], []
            for a in offsets:
                cand = Pose(_rotate_yaw(pose.forward, a), pose.translation, pose.bone_euler)
                out = rasterize_soft(model.mesh, model.place(rest, cand), None, cam, cfg.sharpness)
                row_c.append(cand)
                row_u.append(cfg.weights.mask * float(mask_loss(out.mask, masks[k])))
                row_y.append(math.atan2(float(cand.forward[0]), float(cand.forward[2])))
            cands.append(row_c)
            unary.append(row_u)
            yaws.append(row_y)
    yaws = np.array(yaws)
    diff = np.abs(yaws[:-1, :, None] - yaws[1:, None, :])
    diff = np.minimum(diff, 2 * np.pi - diff) / np.pi
    path = viterbi(np.array(unary), cfg.yaw_continuity * diff)
    for k, j in enumerate(path):
        if offsets[j] != 0.0:
            model.set_pose(k, cands[k][j])
            for g in ("fwd", "trans"):
                opt.state.pop(f"{g}/{k}", None)


# ------------------------------------------------------------------ inference


def infer_pose(image, mask, result: FitResult, camera: Camera, init: Pose | None = None, iters: int = 150, lr: float = 2e-2, config: FitConfig = FitConfig()):
    """Pose of a new frame under a fitted model (shape and texture frozen).

    Runs from ``init`` and from its front-back flip and keeps the better.
    Returns ``(pose, final_loss)``.
    """
    mask_t = torch.tensor(np.asarray(mask, dtype=np.float64))
    if float(mask_t.sum()) == 0:
        raise ValueError("observed mask is empty")
    img_t = torch.tensor(np.asarray(image, dtype=np.float64))
    rest = torch.tensor(result.mean_shape())
    tex = torch.tensor(result.textures.mean(axis=0)).permute(2, 0, 1)
    skel = result.skeleton
    nb = 1 if skel is None else skel.num_bones
    init = init or Pose(config.init_forward, (0.0, 0.0, 0.0), np.zeros((nb - 1, 3)) if skel is not None else None)
    w = config.weights
    best = None
    for start in (init, flip_pose(init, skel)):
        params = {
            "fwd": start.forward.clone(),
            "trans": unsquash_translation(start.translation, config.translation_cap),
        }
        if skel is not None:
            params["bones"] = start.angles(nb).clone()
        opt = Adam({"fwd": lr, "trans": lr, "bones": lr})
        loss = None
        for _ in range(iters):
            for t in params.values():
                t.requires_grad_(True)
            pose = Pose(params["fwd"], squash_translation(params["trans"], config.translation_cap), params.get("bones"))
            posed = pose_vertices(rest, pose, skel)
            out = rasterize_soft(result.mesh, posed, tex, camera, config.sharpness, config.background)
            loss = w.mask * mask_loss(out.mask, mask_t) + w.im * image_loss(out.image, img_t, out.mask)
            grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
            for t in params.values():
                t.requires_grad_(False)
            opt.step(params, dict(zip(params, grads)))
        final = float(loss.detach())
        pose = Pose(params["fwd"], squash_translation(params["trans"], config.translation_cap), params.get("bones"))
        if best is None or final < best[1]:
            best = (pose.detach(), final)
    if best[1] > 0.05:
        log.warning("pose inference did not converge (final loss %.4f)", best[1])
    return best


# ------------------------------------------------------------------ checkpoints


def config_echo(cfg: FitConfig) -> str:
    """``section.key = value`` lines for every field, weights included."""
    lines = []
    for key, value in sorted(asdict(cfg).items()):
        if isinstance(value, dict):
            lines += [f"weights.{k} = {v!r}" for k, v in sorted(value.items())]
        else:
            lines.append(f"fit.{key} = {value!r}")
    return "\n".join(lines) + "\n"


def save_fit(result: FitResult, out_dir) -> None:
    """Template/mean mesh, poses, skeleton, texture and raw arrays for reloading."""
    out = Path(out_dir)
    formats.write_obj(out / "template.obj", result.mesh, result.template())
    formats.write_obj(out / "shape.obj", result.mesh, result.mean_shape())
    formats.write_sym(out / "sym.txt", result.mesh.sym_perm)
    save_poses(out / "poses.json", [result.pose(k) for k in range(len(result))])
    if result.phase >= 3:
        formats.write_png_rgb(out / "texture.png", result.texture().pixels)
    if result.skeleton is not None:
        save_skeleton(out / "skeleton.json", result.skeleton)
        formats.write_weights(out / "weights.bin", result.skeleton.weights)
    arrays = {
        "template_free": result.template_free,
        "forwards": result.forwards,
        "translations": result.translations,
        "instance_free": result.instance_free,
        "textures": result.textures,
    }
    if result.bone_euler is not None:
        arrays["bone_euler"] = result.bone_euler
    for name, arr in arrays.items():
        formats.write_npy(out / "state" / f"{name}.npy", arr)
    meta = {"phase": result.phase, "subdivision": _subdivision_of(result.mesh), "frames": len(result)}
    formats.atomic_write_text(out / "state" / "meta.json", json.dumps(meta, indent=1, sort_keys=True))
    if result.history:
        keys = sorted({k for row in result.history for k in row})
        lines = [",".join(keys)] + [",".join(_fmt(row.get(k, "")) for k in keys) for row in result.history]
        formats.atomic_write_text(out / "history.csv", "\n".join(lines) + "\n")


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _subdivision_of(mesh: Mesh) -> int:
    for n in range(7):
        if 10 * 4**n + 2 == mesh.num_vertices:
            return n
    raise ValueError("mesh is not an icosphere")


def load_fit(out_dir) -> FitResult:
    from .skeleton import load_skeleton

    out = Path(out_dir)
    st = out / "state"
    meta = json.loads((st / "meta.json").read_text())
    mesh = build_icosphere(meta["subdivision"])
    arr = {p.stem: np.load(p) for p in st.glob("*.npy")}
    skel = None
    if (out / "skeleton.json").exists():
        skel = load_skeleton(out / "skeleton.json", formats.read_weights(out / "weights.bin"))
    return FitResult(
        mesh,
        arr["template_free"],
        arr["forwards"],
        arr["translations"],
        arr["instance_free"],
        arr["textures"],
        skel,
        arr.get("bone_euler"),
        meta["phase"],
    )


