import math

import numpy as np
import pytest
import torch

from deformfit.diffcore import Adam, NonFiniteGradientError, adam_step, fd_check, gradient
from deformfit.geometry import build_icosphere
from deformfit.gradcheck import RENDER_H, RENDER_TOL, SMOOTH_TOL, render_case, run_suite, smooth_cases
from deformfit.objectives import arap_loss, mask_loss
from deformfit.posing import Pose, skin
from deformfit.renderer import Camera, rasterize_soft, stable_pixels
from deformfit.skeleton import compute_skinning_weights, init_spine


def test_gradient_polynomial():
    g = gradient(lambda p: p["x"] ** 2, {"x": torch.tensor(3.0, dtype=torch.float64)})
    assert float(g["x"]) == 6.0


def test_gradient_unused_param_is_zero():
    g = gradient(lambda p: p["a"].sum(), {"a": torch.ones(2, dtype=torch.float64), "b": torch.ones(3, dtype=torch.float64)})
    assert torch.equal(g["b"], torch.zeros(3, dtype=torch.float64))


def test_gradient_non_finite_names_parameter():
    with pytest.raises(NonFiniteGradientError, match="b"):
        gradient(lambda p: p["a"].sum() + torch.sqrt(p["b"]).sum(), {"a": torch.ones(1, dtype=torch.float64), "b": torch.zeros(1, dtype=torch.float64)})
    with pytest.raises(NonFiniteGradientError):
        gradient(lambda p: p["a"].sum() / 0.0, {"a": torch.ones(1, dtype=torch.float64)})


def test_gradient_linear_and_deterministic(rng):
    m = build_icosphere(1)
    v0 = torch.tensor(m.vertices)
    params = {"v": torch.tensor(m.vertices + rng.normal(scale=0.1, size=m.vertices.shape))}
    l1 = lambda p: arap_loss(p["v"], v0, m)  # noqa: E731
    l2 = lambda p: (p["v"] ** 3).sum()  # noqa: E731
    g = gradient(lambda p: 2.0 * l1(p) - 0.5 * l2(p), params)["v"]
    ref = 2.0 * gradient(l1, params)["v"] - 0.5 * gradient(l2, params)["v"]
    assert (g - ref).abs().max() < 1e-12
    assert torch.equal(g, gradient(lambda p: 2.0 * l1(p) - 0.5 * l2(p), params)["v"])


def test_mask_gradient_wrt_translation_fd():
    m = build_icosphere(2)
    cam = Camera(width=32, height=32)
    target = rasterize_soft(m, torch.tensor(m.vertices * 1.1) + torch.tensor([0.2, 0.1, 0.0]), None, cam, 0.02).mask.detach()
    base = torch.tensor(m.vertices)

    def loss(p, keep):
        return mask_loss(rasterize_soft(m, base + p["trans"], None, cam, 0.02).mask, target, keep=keep)

    def guard(b, lo, hi):
        return stable_pixels(m, [base + q["trans"] for q in (b, lo, hi)], cam, 0.02)

    rep = fd_check(loss, {"trans": torch.tensor([0.05, -0.03, 0.1], dtype=torch.float64)}, h=1e-3, sample_count=3, guard=guard)
    assert rep.worst < 1e-3


def test_skin_gradient_wrt_bone_angle_fd():
    m = build_icosphere(2)
    v = m.vertices * [0.6, 0.5, 1.3]
    s = init_spine(v, 6, m.on_plane)
    s = s.with_weights(compute_skinning_weights(v, s))
    probe = torch.tensor(np.random.default_rng(0).normal(size=v.shape))
    rep = fd_check(
        lambda p: (skin(v, s, Pose((0.2, 0, 1), (0, 0, 0), p["bones"])) * probe).sum(),
        {"bones": torch.tensor(np.random.default_rng(1).normal(scale=0.3, size=(5, 3)))},
        h=1e-5,
        sample_count=15,
    )
    assert rep.worst < 1e-5


def test_adam_zero_gradient():
    p = torch.tensor([1.0, 2.0], dtype=torch.float64)
    new, st = adam_step(p, torch.zeros(2, dtype=torch.float64), None, 0.1)
    assert torch.equal(new, p) and st.t == 1


def test_adam_first_step_closed_form():
    g = 5.0
    new, _ = adam_step(np.array([0.0]), np.array([g]), None, lr=0.01)
    # bias correction makes the first step lr * g / (|g| + eps)
    assert np.isclose(new[0], -0.01 * g / (abs(g) + 1e-8))
    assert np.isclose(abs(new[0]), 0.01, rtol=1e-8)


def test_adam_constant_gradient_scalar_simulation():
    x, st = np.array([0.0]), None
    xs = []
    m = v = 0.0
    ref = 0.0
    for t in range(1, 101):
        x, st = adam_step(x, np.array([2.0]), st, lr=1e-3)
        m = 0.9 * m + 0.1 * 2.0
        v = 0.999 * v + 0.001 * 4.0
        ref -= 1e-3 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        xs.append(x[0])
    assert np.isclose(xs[-1], ref, rtol=1e-12)
    steps = -np.diff(xs)
    assert (steps > 0).all() and np.allclose(steps[10:], 1e-3, rtol=1e-6)


def test_adam_matches_torch_optim(rng):
    init = rng.normal(size=(4, 3))
    grads = [rng.normal(size=(4, 3)) for _ in range(20)]
    ours = {"w": torch.tensor(init)}
    opt = Adam({"w": 0.05})
    ref = torch.tensor(init, requires_grad=True)
    topt = torch.optim.Adam([ref], lr=0.05, betas=(0.9, 0.999), eps=1e-8)
    for g in grads:
        opt.step(ours, {"w": torch.tensor(g)})
        topt.zero_grad()
        ref.grad = torch.tensor(g)
        topt.step()
    assert torch.allclose(ours["w"], ref.detach(), atol=1e-12)


def test_adam_degenerate_sign_descent():
    new, _ = adam_step(np.zeros(3), np.array([2.0, -0.5, 1e-6]), None, lr=0.1, beta1=0.0, beta2=0.0, eps=0.0)
    assert np.allclose(new, [-0.1, 0.1, -0.1])


def test_adam_groups_and_scale():
    opt = Adam({"fwd": 0.1, "tex": 0.01}, scale=0.5)
    assert opt.lr("fwd/3") == 0.05 and opt.lr("tex/0") == 0.005


def test_fd_check_quadratic():
    a = torch.tensor(np.random.default_rng(0).normal(size=(5, 5)))
    rep = fd_check(lambda p: (p["x"] @ a @ p["x"]), {"x": torch.ones(5, dtype=torch.float64)}, h=1e-3, sample_count=5)
    assert rep.worst < 1e-8


def test_fd_check_arap_icosphere():
    m = build_icosphere(1)
    v0 = torch.tensor(m.vertices)
    rep = fd_check(
        lambda p: arap_loss(p["v"], v0, m),
        {"v": torch.tensor(m.vertices + np.random.default_rng(2).normal(scale=0.1, size=m.vertices.shape))},
        h=1e-3,
        sample_count=12,
    )
    assert rep.worst < 1e-4


def test_fd_check_detects_wrong_gradient():
    class Flip(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.clone()

        @staticmethod
        def backward(ctx, g):
            return -g

    rep = fd_check(lambda p: (Flip.apply(p["x"]) ** 2).sum(), {"x": torch.ones(3, dtype=torch.float64)}, h=1e-4, tolerance=1e-5)
    assert not rep.passed and rep.worst > 1.0


@pytest.mark.parametrize("name", ["skinning", "arap", "laplacian", "normal", "chamfer"])
def test_smooth_paths_within_tolerance(name):
    fn, params = smooth_cases(0)[name]
    rep = fd_check(fn, params, h=1e-5, sample_count=10, tolerance=SMOOTH_TOL)
    assert rep.passed, rep.format()


def test_render_path_within_tolerance():
    loss, params, guard = render_case(32, 0)
    rep = fd_check(loss, params, h=RENDER_H, sample_count=20, guard=guard, tolerance=RENDER_TOL)
    assert rep.passed, rep.format()
    assert set(rep.max_rel_error) == {"shape", "fwd", "trans", "bones", "tex"}


def test_suite_is_deterministic():
    a = run_suite(samples=3)
    b = run_suite(samples=3)
    assert [r.report.samples for r in a] == [r.report.samples for r in b]
