"""Shape and pose metrics: volume matching, trimmed ICP, Chamfer distance, mask IoU."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from .formats import atomic_write_text
from .geometry import mesh_volume
from .posing import azimuth_elevation, euler_to_matrix
from .renderer import mask_iou

log = logging.getLogger(__name__)

REFERENCE_WIDTH_CM = 10.0


def is_closed(faces) -> bool:
    f = np.asarray(faces)
    e = np.sort(f[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(len(counts)) and bool((counts == 2).all())


def enclosed_volume(vertices, faces) -> float:
    """Mesh volume, or the bounding-box volume (with a warning) for open meshes."""
    v = np.asarray(vertices, dtype=np.float64)
    if faces is not None and is_closed(faces):
        return abs(mesh_volume(v, faces))
    log.warning("mesh is not closed; using its bounding-box volume")
    return float(np.prod(v.max(axis=0) - v.min(axis=0)))


def volume_match(pred_vertices, pred_faces, ref_vertices, ref_faces) -> float:
    """Scale ``s`` such that the predicted mesh scaled by ``s`` encloses the reference volume."""
    vp = enclosed_volume(pred_vertices, pred_faces)
    vr = enclosed_volume(ref_vertices, ref_faces)
    if vp <= 0 or vr <= 0:
        raise ValueError("cannot volume-match a mesh with zero volume")
    return float(np.cbrt(vr / vp))


def sample_surface(vertices, faces, count: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on a triangle mesh."""
    rng = np.random.default_rng(seed)
    t = np.asarray(vertices, dtype=np.float64)[np.asarray(faces)]
    area = 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)
    f = rng.choice(len(t), size=count, p=area / area.sum())
    r1, r2 = rng.random(count), rng.random(count)
    s = np.sqrt(r1)
    w = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    return (t[f] * w[..., None]).sum(1)


# ------------------------------------------------------------------ ICP


@dataclass
class ICPResult:
    rotation: np.ndarray
    translation: np.ndarray
    residual: float  # RMS distance over the kept correspondences
    history: list = field(default_factory=list)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation


def kabsch(src: np.ndarray, dst: np.ndarray):
    """Least-squares rotation and translation with dst ~ R src + t."""
    cs, cd = src.mean(0), dst.mean(0)
    u, _, vt = np.linalg.svd((dst - cd).T @ (src - cs))
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    return r, cd - r @ cs


def _icp_run(src, tree, dst, r, t, max_iters, tol, keep):
    history = []
    best = None
    for _ in range(max_iters):
        moved = src @ r.T + t
        dist, idx = tree.query(moved)
        order = np.argsort(dist, kind="stable")[:keep]
        res = float(np.sqrt(np.mean(dist[order] ** 2)))
        history.append(res)
        if best is not None and best[2] - res <= tol:
            if res < best[2]:
                best = (r, t, res)
            break
        best = (r, t, res)
        r, t = kabsch(src[order], dst[idx[order]])
    return best[0], best[1], best[2], history


def icp_align(src, dst, max_iters: int = 60, tol: float = 1e-10, trim: float = 0.05, yaw_restarts: int = 8) -> ICPResult:
    """Trimmed point-to-point ICP aligning ``src`` onto ``dst``.

    Each restart starts from a rotation about the vertical axis through the
    centroids; the run with the lowest residual wins. The worst ``trim``
    fraction of correspondences is discarded at every iteration.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 3 or len(dst) < 3:
        raise ValueError("ICP needs at least three points per cloud")
    keep = max(3, int(round(len(src) * (1.0 - trim))))
    tree = cKDTree(dst)
    cs, cd = src.mean(0), dst.mean(0)
    best = None
    for k in range(max(1, yaw_restarts)):
        a = 2 * np.pi * k / max(1, yaw_restarts)
        r0 = np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])
        r, t, res, hist = _icp_run(src, tree, dst, r0, cd - r0 @ cs, max_iters, tol, keep)
        if best is None or res < best.residual:
            best = ICPResult(r, t, res, hist)
    return best


# ------------------------------------------------------------------ Chamfer


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    unit_scale: float = 1.0  # metres per model unit

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3 or len(p) == 0:
            raise ValueError("point cloud must be a non-empty (N, 3) array")
        object.__setattr__(self, "points", p)


def unit_scale_for_width(points, width_cm: float = REFERENCE_WIDTH_CM) -> float:
    """Metres per model unit that make the cloud's x-extent ``width_cm`` wide."""
    p = np.asarray(points)
    extent = float(p[:, 0].max() - p[:, 0].min())
    if extent <= 0:
        raise ValueError("point cloud has zero x-extent")
    return width_cm / 100.0 / extent


def _nearest_dist(a, b) -> np.ndarray:
    _, idx = cKDTree(b).query(a)
    return np.sqrt(((a - b[idx]) ** 2).sum(1))


def chamfer_units(a, b) -> float:
    """Symmetric mean nearest-neighbour distance, in model units."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    # correctly rounded sums make the result independent of summation order
    da, db = _nearest_dist(a, b), _nearest_dist(b, a)
    return 0.5 * (math.fsum(da) / len(da) + math.fsum(db) / len(db))


def chamfer(a: PointCloud, b: PointCloud) -> float:
    """Chamfer distance in centimetres. Both clouds must share one calibration."""
    if not np.isclose(a.unit_scale, b.unit_scale, rtol=1e-12, atol=0.0):
        raise ValueError("point clouds carry different unit scales")
    return chamfer_units(a.points, b.points) * a.unit_scale * 100.0


def chamfer_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable Chamfer (model units) with nearest neighbours chosen by brute force."""
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    da = torch.sqrt(d2.min(dim=1).values.clamp_min(1e-24))
    db = torch.sqrt(d2.min(dim=0).values.clamp_min(1e-24))
    return 0.5 * (da.mean() + db.mean())


@dataclass
class ShapeScore:
    chamfer_cm: float
    chamfer_units: float
    scale: float
    icp: ICPResult


def compare_shapes(pred_vertices, pred_faces, ref_vertices, ref_faces, samples: int = 5000, seed: int = 0) -> ShapeScore:
    """Volume-match, ICP-align and Chamfer-score a predicted mesh against a reference."""
    s = volume_match(pred_vertices, pred_faces, ref_vertices, ref_faces)
    pp = sample_surface(np.asarray(pred_vertices) * s, pred_faces, samples, seed)
    # one seed for both: identical surfaces give identical samples and score 0
    rp = sample_surface(ref_vertices, ref_faces, samples, seed)
    icp = icp_align(pp, rp)
    aligned = icp.apply(pp)
    scale = unit_scale_for_width(rp)
    cm = chamfer(PointCloud(aligned, scale), PointCloud(rp, scale))
    return ShapeScore(cm, chamfer_units(aligned, rp), s, icp)


# ------------------------------------------------------------------ masks and poses


def mask_forward_iou(render_mask, observed_masks, dt: int, transfer_articulation: bool = False) -> float:
    """Mean IoU between frame t's model posed for t+dt and the observed mask at t+dt.

    ``render_mask(shape_frame, articulation_frame, rigid_frame)`` returns a
    binary mask. The fixed variant keeps frame t's articulation; the
    transferred variant takes articulation from frame t+dt as well.
    """
    n = len(observed_masks)
    if dt < 0 or dt >= n:
        raise ValueError(f"dt must be in [0, {n - 1}]")
    scores = []
    for t in range(n - dt):
        art = t + dt if transfer_articulation else t
        scores.append(mask_iou(render_mask(t, art, t + dt), observed_masks[t + dt]))
    return float(np.mean(scores))


@dataclass
class PoseHistogram:
    counts: np.ndarray
    azimuth_edges: np.ndarray
    elevation_edges: np.ndarray


def pose_distribution(forwards, azimuth_bins: int = 36, elevation_bins: int = 18) -> PoseHistogram:
    az, el = azimuth_elevation(np.asarray(forwards))
    ae = np.linspace(-180.0, 180.0, azimuth_bins + 1)
    ee = np.linspace(-90.0, 90.0, elevation_bins + 1)
    counts, _, _ = np.histogram2d(az, el, bins=[ae, ee])
    return PoseHistogram(counts.astype(np.int64), ae, ee)


def random_rigid(rng, max_tilt_deg: float = 20.0, max_shift: float = 0.5):
    """Rotation with free yaw and bounded tilt, plus a bounded translation."""
    yaw = rng.uniform(-np.pi, np.pi)
    tilt = np.radians(rng.uniform(-max_tilt_deg, max_tilt_deg, size=2))
    r = euler_to_matrix(torch.tensor([tilt[0], yaw, tilt[1]])).numpy()
    return r, rng.uniform(-max_shift, max_shift, size=3)


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write_text(path, buf.getvalue())
