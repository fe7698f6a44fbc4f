import hashlib
import json
import os

import numpy as np
import pytest
import torch

from deformfit import formats, gradcheck
from deformfit.cli import main
from deformfit.fitter import load_fit
from deformfit.posing import Pose, mirror_pose, save_poses
from deformfit.renderer import flip_horizontal, mask_iou

SMALL = """
[scene]
subdivision = 2
n_frames = 8
width = 32
height = 32
azimuth_start = 20
azimuth_end = 100
neck_amplitude = 0.3
[fit]
subdivision = 2
phase1_epochs = {p1}
phase2_epochs = {p2}
phase3_epochs = {p3}
iters_per_epoch = 3
frames_per_batch = 4
texture_height = 8
yaw_search_step = 45
"""


def _ini(path, p1=1, p2=1, p3=1, extra=""):
    path.write_text(SMALL.format(p1=p1, p2=p2, p3=p3) + extra)
    return str(path)


def _tree_digest(root):
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(hashlib.sha256(f.read_bytes()).digest())
    return h.hexdigest()


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _ini(root / "c.ini")
    assert main(["synth", "--config", cfg, "--out", str(root / "data")]) == 0
    assert main(["fit", str(root / "data"), "--config", cfg, "--out", str(root / "fit")]) == 0
    return root


def test_synth_default_manifest_counts(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d")]) == 0
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert (len(m["frames"]), len(m["masks"]), len(m["flows"])) == (36, 36, 35)
    assert all((tmp_path / "d" / f).exists() for f in m["frames"] + m["masks"] + m["flows"])
    assert (tmp_path / "d" / "gt" / "shape.obj").exists()


def test_synth_is_bit_identical(tmp_path):
    cfg = _ini(tmp_path / "c.ini")
    for name in ("a", "b"):
        assert main(["synth", "--config", cfg, "--seed", "3", "--out", str(tmp_path / name)]) == 0
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_unwritable_directory(tmp_path):
    if os.geteuid() == 0:
        # root ignores mode bits, but nothing may create entries under /proc
        target = "/proc/deformfit-out"
    else:
        ro = tmp_path / "ro"
        ro.mkdir()
        ro.chmod(0o500)
        target = str(ro / "x")
    assert main(["synth", "--out", target]) == 2


def test_output_path_is_a_file(tmp_path, capsys):
    f = tmp_path / "file"
    f.write_text("")
    assert main(["synth", "--out", str(f / "x")]) == 2
    assert str(f) in capsys.readouterr().err


def test_bad_config_line(tmp_path, capsys):
    cfg = _ini(tmp_path / "c.ini", extra="oops = 1\n")
    line = SMALL.count("\n") + 1
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "d")]) == 2
    err = capsys.readouterr().err
    assert f"c.ini:{line}:" in err and "oops" in err


def test_bad_arguments(tmp_path):
    assert main(["synth"]) == 2
    assert main(["synth", "--out", str(tmp_path), "--resolution", "4"]) == 2
    assert main(["render", str(tmp_path)]) == 2


def test_fit_missing_flow(fitted, tmp_path):
    import shutil

    data = tmp_path / "data"
    shutil.copytree(fitted / "data", data)
    (data / "flows" / "00002.flo").unlink()
    cfg = _ini(tmp_path / "c.ini")
    assert main(["fit", str(data), "--config", cfg, "--out", str(tmp_path / "fit")]) == 2
    # without phase 3 the flow is never needed
    cfg = _ini(tmp_path / "c1.ini", p3=0)
    assert main(["fit", str(data), "--config", cfg, "--out", str(tmp_path / "fit")]) == 0


def test_fit_outputs(fitted):
    fit = fitted / "fit"
    for phase in ("phase1", "phase2", "phase3", "final"):
        assert (fit / phase / "template.obj").exists() and (fit / phase / "poses.json").exists()
    report = (fit / "report.txt").read_text()
    assert "chamfer_cm" in report and "mask_iou_mean" in report and "mask_iou_frame_00007" in report
    echo = (fit / "config.txt").read_text()
    assert "fit.phase1_epochs = 1" in echo and "weights.flow = 100.0" in echo
    assert load_fit(fit / "final").bone_euler is not None


def test_phase1_only_checkpoint(fitted, tmp_path):
    cfg = _ini(tmp_path / "c.ini", p1=1, p2=0, p3=0)
    assert main(["fit", str(fitted / "data"), "--config", cfg, "--out", str(tmp_path / "fit")]) == 0
    ck = tmp_path / "fit" / "phase1"
    assert (ck / "template.obj").exists() and not (ck / "skeleton.json").exists()
    assert not (ck / "texture.png").exists()
    poses = json.loads((ck / "poses.json").read_text())
    assert len(poses) == 8 and all(set(p) == {"forward", "translation"} for p in poses)
    assert not (tmp_path / "fit" / "phase2").exists()


def test_fit_is_bit_identical(fitted, tmp_path):
    cfg = _ini(tmp_path / "c.ini")
    assert main(["fit", str(fitted / "data"), "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    assert _tree_digest(tmp_path / "again") == _tree_digest(fitted / "fit")


def test_eval_outputs(fitted, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", str(fitted / "fit" / "final"), str(fitted / "data"), "--iou", "0", "5", "20", "--chamfer", "--pose-hist", "--out", str(out)]) == 0
    summary = json.loads((out / "eval.json").read_text())
    assert {"forward_iou_dt0_fixed", "forward_iou_dt5_fixed", "forward_iou_dt5_transferred", "chamfer_cm"} <= set(summary)
    assert "forward_iou_dt20_fixed" not in summary
    assert 0.0 <= summary["forward_iou_dt0_fixed"] <= 1.0
    lines = (out / "pose_hist.csv").read_text().splitlines()
    assert lines[0] == "azimuth_lo,azimuth_hi,elevation_lo,elevation_hi,count"
    assert len(lines) == 1 + 36 * 18 and sum(int(r.split(",")[-1]) for r in lines[1:]) == 8


def test_eval_chamfer_of_ground_truth_is_zero(fitted, tmp_path):
    from deformfit.datagen import load_ground_truth
    from deformfit.fitter import save_fit

    gt = load_ground_truth(fitted / "data")
    res = load_fit(fitted / "fit" / "final")
    layout = res.layout
    res.template_free = layout.restrict(gt.rest_vertices - res.mesh.vertices)
    res.instance_free = np.zeros_like(res.instance_free)
    save_fit(res, tmp_path / "perfect")
    assert main(["eval", str(tmp_path / "perfect"), str(fitted / "data"), "--chamfer", "--out", str(tmp_path / "ev")]) == 0
    assert json.loads((tmp_path / "ev" / "eval.json").read_text())["chamfer_cm"] == 0.0


def test_eval_chamfer_without_ground_truth(fitted, tmp_path):
    import shutil

    shutil.copytree(fitted / "data", tmp_path / "d")
    shutil.rmtree(tmp_path / "d" / "gt")
    assert main(["eval", str(fitted / "fit" / "final"), str(tmp_path / "d"), "--chamfer", "--out", str(tmp_path / "e")]) == 2


def test_render_turntable_deterministic(fitted, tmp_path):
    for name in ("a", "b"):
        assert main(["render", str(fitted / "fit" / "final"), "--turntable", "8", "--resolution", "32", "--out", str(tmp_path / name)]) == 0
    pngs = sorted(p.name for p in (tmp_path / "a").glob("0*.png"))
    assert len(pngs) == 8
    assert all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in pngs)


def test_render_mirrored_pose_is_flipped_render(fitted, tmp_path):
    res = load_fit(fitted / "fit" / "final")
    rng = np.random.default_rng(0)
    p = Pose((0.6, 0.1, 0.8), (0.1, 0.05, 0.0), rng.normal(scale=0.3, size=res.bone_euler.shape[1:]))
    save_poses(tmp_path / "p.json", [p, mirror_pose(p, res.skeleton)])
    assert main(["render", str(fitted / "fit" / "final"), "--poses", str(tmp_path / "p.json"), "--resolution", "48", "--out", str(tmp_path / "r")]) == 0
    a, b = formats.read_png(tmp_path / "r" / "0000.png"), formats.read_png(tmp_path / "r" / "0001.png")
    ma, mb = formats.read_png(tmp_path / "r" / "mask_0000.png"), formats.read_png(tmp_path / "r" / "mask_0001.png")
    assert mask_iou(flip_horizontal(ma), mb) >= 0.99
    assert np.abs(flip_horizontal(a) - b).mean() <= 0.01


def test_render_bad_pose_file(fitted, tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["render", str(fitted / "fit" / "final"), "--poses", str(tmp_path / "bad.json"), "--out", str(tmp_path / "r")]) == 2
    (tmp_path / "bad2.json").write_text('[{"forward": "x"}]')
    assert main(["render", str(fitted / "fit" / "final"), "--poses", str(tmp_path / "bad2.json"), "--out", str(tmp_path / "r")]) == 2


def test_gradcheck_clean(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for name in ("skinning", "arap", "laplacian", "normal", "chamfer", "soft_render"):
        assert name in out


def test_gradcheck_detects_sign_flip(monkeypatch, capsys):
    class Flipped(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x * x).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return -2 * x * g

    original = gradcheck.smooth_cases

    def with_bad_case(seed):
        cases = original(seed)
        cases["flipped"] = (lambda p: Flipped.apply(p["w"]), {"w": torch.linspace(0.5, 1.5, 4, dtype=torch.float64)})
        return cases

    monkeypatch.setattr(gradcheck, "smooth_cases", with_bad_case)
    assert main(["gradcheck"]) == 1
    assert "flipped      FAIL" in capsys.readouterr().out
