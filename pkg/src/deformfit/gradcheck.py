"""Finite-difference gradient suite over the differentiable building blocks."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import FDReport, fd_check
from .evaluation import chamfer_torch
from .geometry import Texture, build_icosphere
from .objectives import arap_loss, flow_loss, image_loss, laplacian_loss, mask_loss, normal_loss
from .posing import Pose, skin
from .renderer import Camera, flow_from_visibility, rasterize_hard, rasterize_soft, stable_pixels
from .skeleton import compute_skinning_weights, init_spine

SMOOTH_TOL = 1e-5
RENDER_TOL = 5e-3
SMOOTH_H = 1e-5  # float64 central differences; truncation error ~h^2
RENDER_H = {"shape": 1e-4, "fwd": 1e-4, "trans": 1e-4, "bones": 1e-4, "tex": 1e-2}


@dataclass
class CaseResult:
    name: str
    report: FDReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def _scene(seed: int):
    rng = np.random.default_rng(seed)
    mesh = build_icosphere(2)
    rest = mesh.vertices * np.array([0.6, 0.5, 1.3])
    skel = init_spine(rest, 4, mesh.on_plane)
    skel = skel.with_weights(compute_skinning_weights(rest, skel))
    return rng, mesh, rest, skel


def smooth_cases(seed: int = 0) -> dict:
    """name -> (loss_fn, params) for the analytic (non-rendering) paths."""
    rng, mesh, rest, skel = _scene(seed)
    small = build_icosphere(1)
    r = torch.tensor(rest)
    probe = torch.tensor(rng.normal(size=rest.shape))

    def skinning(p):
        return (skin(r, skel, Pose(p["fwd"], p["trans"], p["bones"])) * probe).sum()

    v0 = torch.tensor(small.vertices + 0.1 * rng.normal(size=small.vertices.shape))
    t0 = torch.tensor(small.vertices)
    a = torch.tensor(rng.normal(size=(40, 3)))
    b = torch.tensor(rng.normal(size=(50, 3)))
    return {
        "skinning": (skinning, {
            "fwd": torch.tensor([0.3, 0.2, 1.0], dtype=torch.float64),
            "trans": torch.tensor([0.1, -0.2, 0.3], dtype=torch.float64),
            "bones": torch.tensor(rng.normal(scale=0.3, size=(skel.num_bones - 1, 3))),
        }),
        "arap": (lambda p: arap_loss(p["shape"], p["template"], small), {"shape": v0, "template": t0}),
        "laplacian": (lambda p: laplacian_loss(p["shape"], small), {"shape": v0}),
        "normal": (lambda p: normal_loss(p["shape"], small), {"shape": v0}),
        "chamfer": (lambda p: chamfer_torch(p["a"], p["b"]), {"a": a, "b": b}),
    }


def render_case(resolution: int = 32, seed: int = 0, sharpness: float = 0.02):
    """Full textured loss (mask + image + flow) through the soft renderer, with a guard."""
    rng, mesh, rest, skel = _scene(seed)
    cam = Camera(width=resolution, height=resolution)
    th = 16
    target_tex = Texture(rng.uniform(size=(th, 2 * th, 3)))
    true_pose = Pose((0.5, 0.0, 1.0), (0.1, 0.05, 0.0), rng.normal(scale=0.2, size=(skel.num_bones - 1, 3)))
    next_pose = Pose((0.6, 0.0, 1.0), (0.12, 0.05, 0.0), rng.normal(scale=0.2, size=(skel.num_bones - 1, 3)))
    with torch.no_grad():
        tp = skin(rest * 1.05, skel, true_pose)
        tgt = rasterize_hard(mesh, tp, target_tex, cam)
        tflow = flow_from_visibility(tgt.face_id, tgt.bary, mesh.faces, tp, skin(rest * 1.05, skel, next_pose), cam)
    base = torch.tensor(rest)
    obs_mask = tgt.mask

    def posed(p):
        v = base + p["shape"]
        return v, skin(v, skel, Pose(p["fwd"], p["trans"], p["bones"]))

    def loss(p, keep):
        v, pv = posed(p)
        out = rasterize_soft(mesh, pv, p["tex"], cam, sharpness)
        nxt = skin(v, skel, next_pose)
        flow = flow_from_visibility(out.face_id, out.bary, mesh.faces, pv, nxt, cam)
        return (
            2.0 * mask_loss(out.mask, obs_mask, keep=keep)
            + image_loss(out.image, tgt.image, out.mask, keep=keep)
            + flow_loss(flow * (2.0 / resolution), tflow * (2.0 / resolution), obs_mask, keep=keep)
        )

    def guard(b, lo, hi):
        states = [posed(q)[1] for q in (b, lo, hi)]
        keep = stable_pixels(mesh, states, cam, sharpness, (th, 2 * th))
        # the L1 image term has a kink where a residual changes sign
        signs = [
            np.sign(rasterize_hard(mesh, s, q["tex"].detach().permute(1, 2, 0).numpy(), cam).image - tgt.image)
            for s, q in zip(states, (b, lo, hi))
        ]
        return keep & (signs[0] == signs[1]).all(-1) & (signs[0] == signs[2]).all(-1)

    params = {
        "shape": torch.tensor(rng.normal(scale=0.01, size=rest.shape)),
        "fwd": torch.tensor([0.35, 0.05, 1.0], dtype=torch.float64),
        "trans": torch.tensor([0.0, 0.08, 0.0], dtype=torch.float64),
        "bones": torch.tensor(rng.normal(scale=0.1, size=(skel.num_bones - 1, 3))),
        "tex": torch.tensor(rng.uniform(size=(3, th, 2 * th))),
    }
    return loss, params, guard


def run_suite(resolution: int = 32, seed: int = 0, samples: int = 10, cases=None) -> list:
    """Run every case; ``cases`` may add or replace smooth cases (name -> (fn, params))."""
    results = []
    smooth = smooth_cases(seed)
    if cases:
        smooth.update(cases)
    for name, (fn, params) in smooth.items():
        t = time.perf_counter()
        rep = fd_check(fn, params, h=SMOOTH_H, sample_count=samples, seed=seed, tolerance=SMOOTH_TOL)
        results.append(CaseResult(name, rep, time.perf_counter() - t))
    loss, params, guard = render_case(resolution, seed)
    t = time.perf_counter()
    rep = fd_check(loss, params, h=RENDER_H, sample_count=samples, seed=seed, guard=guard, tolerance=RENDER_TOL)
    results.append(CaseResult("soft_render", rep, time.perf_counter() - t))
    return results


def format_results(results) -> str:
    lines = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:<12s} {status:<4s} worst {r.report.worst:.3e} (tol {r.report.tolerance:.0e}, {r.seconds:.1f}s)")
        for group, err in sorted(r.report.max_rel_error.items()):
            lines.append(f"    {group:<10s} {err:.3e}")
    return "\n".join(lines)
