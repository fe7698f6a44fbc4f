import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation
from scipy.stats import chisquare

from deformfit.evaluation import (
    PointCloud,
    chamfer,
    chamfer_units,
    enclosed_volume,
    icp_align,
    mask_forward_iou,
    pose_distribution,
    random_rigid,
    sample_surface,
    volume_match,
    write_csv,
)
from deformfit.geometry import build_icosphere
from deformfit.posing import Pose, azimuth_elevation, flip_pose
from oracles import chamfer_brute, tetra_volume


def test_volume_match_cases():
    m = build_icosphere(2)
    assert volume_match(m.vertices, m.faces, m.vertices, m.faces) == pytest.approx(1.0, abs=1e-12)
    assert volume_match(2 * m.vertices, m.faces, m.vertices, m.faces) == pytest.approx(0.5, rel=1e-12)
    n = build_icosphere(3)
    want = (tetra_volume(n.vertices, n.faces) / tetra_volume(m.vertices, m.faces)) ** (1 / 3)
    assert volume_match(m.vertices, m.faces, n.vertices, n.faces) == pytest.approx(want, rel=1e-12)
    assert want > 1.0


def test_open_mesh_falls_back_to_bbox(caplog):
    m = build_icosphere(1)
    v = enclosed_volume(m.vertices, m.faces[:-1])
    ext = m.vertices.max(0) - m.vertices.min(0)
    assert v == pytest.approx(float(np.prod(ext)))
    assert "not closed" in caplog.text


def test_sample_surface_on_sphere():
    m = build_icosphere(4)
    p = sample_surface(m.vertices, m.faces, 2000)
    r = np.linalg.norm(p, axis=1)
    assert r.max() <= 1.0 + 1e-12 and r.min() > 0.99
    assert np.abs(p.mean(0)).max() < 0.05


def test_chamfer_goldens():
    a = PointCloud(np.random.default_rng(0).normal(size=(50, 3)), 0.1)
    assert chamfer(a, a) == 0.0
    p = PointCloud([[0.0, 0, 0]], 0.1)
    q = PointCloud([[1.0, 0, 0]], 0.1)
    assert chamfer(p, q) == pytest.approx(10.0)
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        chamfer(p, PointCloud([[1.0, 0, 0]], 0.2))


@pytest.mark.parametrize("seed", range(20))
def test_chamfer_equals_brute_force(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(100, 3)), r.normal(size=(100, 3)) + 0.3
    assert chamfer_units(a, b) == chamfer_brute(a, b)


@given(st.integers(0, 10_000))
def test_chamfer_symmetry_and_union(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(30, 3)), r.normal(size=(40, 3))
    assert chamfer_units(a, b) == chamfer_units(b, a)
    assert chamfer_units(a, np.concatenate([a, b])) <= chamfer_units(a, b)


def test_icp_identity():
    p = sample_surface(*_bird(), 500)
    res = icp_align(p, p)
    assert np.allclose(res.rotation, np.eye(3), atol=1e-9) and np.allclose(res.translation, 0, atol=1e-9)
    assert res.residual < 1e-9


def _bird():
    m = build_icosphere(3)
    v = m.vertices * [0.6, 0.5, 1.3]
    v[:, 1] += 0.3 * np.exp(-((v[:, 2] - 0.9) ** 2) / 0.1)
    return v, m.faces


def test_icp_recovers_yaw_and_shift():
    src = sample_surface(*_bird(), 800)
    r = Rotation.from_euler("y", 20, degrees=True).as_matrix()
    t = np.array([0.3, -0.1, 0.2])
    res = icp_align(src, src @ r.T + t)
    assert np.abs(res.rotation - r).max() < 1e-3 and np.abs(res.translation - t).max() < 1e-3
    assert res.residual < 1e-6


def test_icp_history_non_increasing():
    v, f = _bird()
    src = sample_surface(v, f, 600, seed=1)
    dst = sample_surface(v, f, 600, seed=2) @ Rotation.from_euler("y", 25, degrees=True).as_matrix().T
    res = icp_align(src, dst)
    assert all(b <= a + 1e-12 for a, b in zip(res.history, res.history[1:]))


def test_icp_tolerates_outliers():
    src = sample_surface(*_bird(), 800)
    rng = np.random.default_rng(4)
    r, t = random_rigid(rng)
    dst = src @ r.T + t
    # replace 10% of the target by far-away clutter
    idx = rng.choice(len(dst), 80, replace=False)
    dst[idx] = rng.uniform(-4, 4, size=(80, 3)) + [6, 0, 0]
    res = icp_align(src, dst, trim=0.12)
    ang = Rotation.from_matrix(res.rotation @ r.T).magnitude()
    assert math.degrees(ang) < 1.0
    assert np.abs(res.translation - t).max() < 0.05


def test_icp_rejects_tiny_clouds():
    with pytest.raises(ValueError):
        icp_align(np.zeros((2, 3)), np.zeros((5, 3)))


def test_mask_forward_iou_perfect_and_disjoint():
    masks = [np.zeros((8, 8)) for _ in range(4)]
    for k, m in enumerate(masks):
        m[k : k + 3, 2:5] = 1
    assert mask_forward_iou(lambda s, a, r: masks[r], masks, 0) == 1.0
    assert mask_forward_iou(lambda s, a, r: masks[r], masks, 2) == 1.0
    assert mask_forward_iou(lambda s, a, r: 1 - masks[r], masks, 1) == 0.0
    with pytest.raises(ValueError):
        mask_forward_iou(lambda s, a, r: masks[r], masks, 4)


def test_mask_forward_iou_arguments():
    calls = []
    masks = [np.ones((2, 2))] * 6
    mask_forward_iou(lambda s, a, r: calls.append((s, a, r)) or masks[r], masks, 5)
    mask_forward_iou(lambda s, a, r: calls.append((s, a, r)) or masks[r], masks, 5, transfer_articulation=True)
    assert calls == [(0, 0, 5), (0, 5, 5)]


def test_pose_distribution_rest_single_bin():
    h = pose_distribution([[0, 0, 1.0]] * 7)
    assert h.counts.sum() == 7 and (h.counts > 0).sum() == 1
    i, j = np.argwhere(h.counts)[0]
    assert h.azimuth_edges[i] <= 0 < h.azimuth_edges[i + 1]
    assert h.elevation_edges[j] <= 0 < h.elevation_edges[j + 1]


def test_pose_distribution_uniform_azimuth():
    a = np.random.default_rng(0).uniform(-np.pi, np.pi, 3600)
    h = pose_distribution(np.stack([np.sin(a), np.zeros_like(a), np.cos(a)], 1))
    per_az = h.counts.sum(1)
    assert chisquare(per_az).pvalue > 0.01


def test_flip_changes_azimuth():
    rng = np.random.default_rng(1)
    poses = [Pose((math.sin(a), 0.2 * rng.normal(), math.cos(a))) for a in rng.uniform(-3, 3, 20)]
    az0, _ = azimuth_elevation(np.stack([p.forward.numpy() for p in poses]))
    az1, _ = azimuth_elevation(np.stack([flip_pose(p).forward.numpy() for p in poses]))
    # flipping the forward z component reflects azimuth about 90 degrees
    d = np.mod(az1 - (180.0 - az0) + 180.0, 360.0) - 180.0
    assert np.abs(d).max() < 1e-9
    h0 = pose_distribution([p.forward.numpy() for p in poses])
    h1 = pose_distribution([flip_pose(p).forward.numpy() for p in poses])
    assert h0.counts.sum() == h1.counts.sum() == 20


def test_write_csv(tmp_path):
    write_csv(tmp_path / "x.csv", ["a", "b"], [[1, 2.5], [3, 4]])
    assert (tmp_path / "x.csv").read_text() == "a,b\n1,2.5\n3,4\n"
