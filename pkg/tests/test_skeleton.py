import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deformfit import formats
from deformfit.geometry import build_icosphere
from deformfit.skeleton import (
    Bone,
    DegenerateInputError,
    MissingLegError,
    Skeleton,
    compute_skinning_weights,
    init_quadruped_legs,
    init_spine,
    load_skeleton,
    save_skeleton,
    segment_distance_sq,
)
from oracles import skinning_weights_loop


def _ellipsoid(axes, level=3):
    m = build_icosphere(level)
    return m, m.vertices * np.asarray(axes)


def test_spine_on_sphere_runs_along_z():
    m = build_icosphere(3)
    s = init_spine(m.vertices, 6)
    assert s.num_bones == 6
    segs = s.segments()
    assert np.allclose(segs[:, :, :2], 0.0, atol=1e-9)
    assert np.isclose(segs[2, 1, 2], 1.0) and np.isclose(segs[5, 1, 2], -1.0)


def test_spine_on_ellipsoid_joint_positions():
    _, v = _ellipsoid((1.0, 0.5, 2.0))
    s = init_spine(v, 6)
    ends = sorted({round(float(p[2]), 9) for seg in s.segments() for p in seg})
    assert np.allclose(ends, [-2, -4 / 3, -2 / 3, 0, 2 / 3, 4 / 3, 2], atol=1e-9)
    assert s.parents == [None, 0, 1, 0, 3, 4]
    # head chain has positive z
    assert s.segments()[2, 1, 2] > 0


def test_spine_connected_and_local_joints():
    _, v = _ellipsoid((0.6, 0.5, 1.3))
    s = init_spine(v, 6)
    segs = s.segments()
    for b, bone in enumerate(s.bones[1:], start=1):
        p = bone.parent
        if p != 0 or b == 1:
            assert np.allclose(segs[b, 0], segs[p, 1])
        assert np.allclose(np.asarray(bone.joint), segs[b, 0] - segs[p, 0])


def test_spine_degenerate():
    with pytest.raises(DegenerateInputError):
        init_spine(np.zeros((5, 3)), 2)
    with pytest.raises(ValueError):
        init_spine(np.eye(3), 3)


def test_horse_bone_count():
    m, v = _ellipsoid((0.6, 0.8, 1.5))
    s = init_quadruped_legs(v, init_spine(v, 6), 4)
    assert s.num_bones == 6 + 4 * 4
    assert s.parents[6] is not None


def test_box_feet_are_bottom_corners():
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
    extra = np.array([[0, 0, 2.0], [0, 0, -2.0]])
    v = np.concatenate([corners, extra])
    s = init_quadruped_legs(v, init_spine(v, 2), 1)
    feet = s.segments()[2:, 1]
    expected = {(1, -1, 1), (-1, -1, 1), (1, -1, -1), (-1, -1, -1)}
    assert {tuple(np.round(f).astype(int)) for f in feet} == expected


def test_leg_roots_attach_to_nearest_spine_joint():
    m, v = _ellipsoid((0.6, 0.8, 1.5))
    spine = init_spine(v, 6)
    s = init_quadruped_legs(v, spine, 2)
    joints = [spine.segments()[0, 0]] + [seg[1] for seg in spine.segments()]
    for q in range(4):
        seg = s.segments()[6 + 2 * q]
        foot = s.segments()[6 + 2 * q + 1, 1]
        best = min(joints, key=lambda j: float(np.linalg.norm(j - foot)))
        assert np.allclose(seg[0], best)


def test_missing_leg_quadrant():
    v = np.array([[0.5, 0, 0.5], [-0.5, 0, 0.5], [0, 0, 2.0], [0, 0, -0.1]])
    with pytest.raises(MissingLegError, match="z-"):
        init_quadruped_legs(v, init_spine(v, 2), 1)


def _two_bones():
    return Skeleton((Bone(None, (0, 0, 0), ((0, 0, 0), (0, 0, 1))), Bone(0, (0, 0, 0), ((0, 0, 0), (0, 0, -1)))))


def test_single_bone_weights_are_one():
    s = Skeleton((Bone(None, (0, 0, 0), ((0, 0, 0), (0, 0, 1))),))
    assert np.array_equal(compute_skinning_weights(np.random.default_rng(0).normal(size=(10, 3)), s), np.ones((10, 1)))


def test_equidistant_vertex():
    w = compute_skinning_weights(np.array([[1.0, 0.0, 0.0]]), _two_bones())
    assert np.allclose(w, 0.5)


def test_scalar_weight_example():
    s = Skeleton((Bone(None, (0, 0, 0), ((0, 0.1, 0), (1, 0.1, 0))), Bone(0, (0, 0, 0), ((0, 1, 0), (1, 1, 0)))))
    w = compute_skinning_weights(np.array([[0.5, 0.0, 0.0]]), s, temperature=1.0, epsilon=1e-4)
    d1, d2 = 1 / (0.01 + 1e-4), 1 / (1.0 + 1e-4)
    assert np.isclose(d1, 99.0099, atol=1e-4) and np.isclose(d2, 0.9999, atol=1e-4)
    expected_second = math.exp(d2 - d1) / (1 + math.exp(d2 - d1))
    assert np.isclose(w[0, 1], expected_second, rtol=1e-9)
    assert 1.0 - w[0, 0] < 1e-40


def test_weights_match_loop_oracle():
    m, v = _ellipsoid((0.6, 0.5, 1.3), level=2)
    s = init_spine(v, 6)
    w = compute_skinning_weights(v, s, 0.3, 1e-3)
    assert np.allclose(w, skinning_weights_loop(v, s.segments(), 0.3, 1e-3), atol=1e-12)


@given(st.integers(0, 10_000), st.floats(0.01, 5.0))
def test_rows_stochastic(seed, temp):
    v = np.random.default_rng(seed).normal(size=(30, 3))
    w = compute_skinning_weights(v, init_spine(v, 4), temperature=temp)
    assert np.all(np.abs(w.sum(1) - 1.0) < 1e-9)
    assert w.min() >= 0.0 and w.max() <= 1.0


def test_weights_mirror_symmetric_with_legs():
    m, v = _ellipsoid((0.6, 0.8, 1.5))
    s = init_quadruped_legs(v, init_spine(v, 6, m.on_plane), 2, m.sym_perm)
    w = compute_skinning_weights(v, s)
    mb = np.asarray(s.mirror)
    assert np.abs(w[m.sym_perm][:, mb] - w).max() < 1e-6


def test_locality_at_low_temperature():
    m, v = _ellipsoid((0.6, 0.5, 1.3), level=2)
    s = init_spine(v, 6)
    w = compute_skinning_weights(v, s, temperature=1e-3)
    segs = s.segments()
    d = 1.0 / (segment_distance_sq(v, segs[:, 0], segs[:, 1]) + s.epsilon)
    top = np.sort(d, axis=1)
    clear = top[:, -1] - top[:, -2] > 0.05
    assert np.array_equal(w[clear].argmax(1), d[clear].argmax(1))
    assert (w[clear].max(1) > 0.999).all()


def test_segment_distance_clamps():
    d = segment_distance_sq(np.array([[0, 0, 3.0], [1, 0, 0.5]]), np.array([[0, 0, 0.0]]), np.array([[0, 0, 1.0]]))
    assert np.allclose(d[:, 0], [4.0, 1.0])


def test_skeleton_json_roundtrip(tmp_path):
    m, v = _ellipsoid((0.6, 0.8, 1.5))
    s = init_quadruped_legs(v, init_spine(v, 6), 1)
    s = s.with_weights(compute_skinning_weights(v, s))
    save_skeleton(tmp_path / "s.json", s)
    formats.write_weights(tmp_path / "w.bin", s.weights)
    back = load_skeleton(tmp_path / "s.json", formats.read_weights(tmp_path / "w.bin"))
    assert back.parents == s.parents and back.mirror == s.mirror
    assert np.allclose(back.segments(), s.segments())
    assert np.allclose(back.weights, s.weights, atol=1e-7)


def test_skeleton_rejects_cycles():
    with pytest.raises(ValueError):
        Skeleton((Bone(None, (0, 0, 0), ((0, 0, 0), (0, 0, 1))), Bone(1, (0, 0, 0), ((0, 0, 0), (0, 0, 1)))))
