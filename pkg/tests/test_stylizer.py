import numpy as np
import pytest
import torch

from colorista.archive import ArchiveError
from colorista.stylizer import (
    RenderJob,
    StylePlan,
    list_frames,
    psnr,
    remove_style,
    stylize_video,
    write_frame,
)

from conftest import make_frames


def plan_for(style_path, **kw):
    return StylePlan(entries=[(style_path, 0)], **kw)


def job_for(tmp_path, checkpoint, frames_dir, style_path, **kw):
    return RenderJob(
        input_dir=str(frames_dir),
        output_dir=str(tmp_path / "out"),
        checkpoint=str(checkpoint),
        plan=kw.pop("plan", plan_for(str(style_path))),
        **kw,
    )


def test_style_plan_validation(tmp_path):
    with pytest.raises(ValueError):
        StylePlan(entries=[])
    with pytest.raises(ValueError):
        StylePlan(entries=[("a.png", 5)])  # first start must be 0
    with pytest.raises(ValueError):
        StylePlan(entries=[("a.png", 0), ("b.png", 0)])  # not increasing
    with pytest.raises(ValueError):
        StylePlan(entries=[("a.png", 0)], lam=1.5)
    with pytest.raises(ValueError):
        StylePlan(entries=[("a.png", 0)], consecutive=5)
    with pytest.raises(ValueError):
        StylePlan(entries=[("a.png", 0)], smooth_kernel=0)
    plan = StylePlan(entries=[("a.png", 0), ("b.png", 10), ("c.png", 30)])
    assert plan.active_index(0) == 0
    assert plan.active_index(9) == 0
    assert plan.active_index(10) == 1
    assert plan.active_index(45) == 2


def test_parse_styles_formats():
    plan = StylePlan.parse_styles("a.png")
    assert plan.entries == [("a.png", 0)]
    plan = StylePlan.parse_styles("a.png,b.png@40,c.png@90")
    assert plan.entries == [("a.png", 0), ("b.png", 40), ("c.png", 90)]
    with pytest.raises(ValueError):
        StylePlan.parse_styles("a.png,b.png")  # later styles need @START
    with pytest.raises(ValueError):
        StylePlan.parse_styles("a.png,b.png@x")


def test_render_job_validation(tmp_path):
    plan = plan_for("s.png")
    with pytest.raises(Exception):
        RenderJob("in", "out", "c.cnet", plan, temporal_mode="warp_everything")
    with pytest.raises(ValueError):
        RenderJob("in", "out", "c.cnet", plan, precision="float16")
    job = RenderJob("in", "out", "c.cnet", plan)
    d = job.to_dict()
    assert d["plan"]["smooth_kernel"] == 20


def test_stylize_single_style(tmp_path, tiny_checkpoint):
    frames_dir = tmp_path / "frames"
    make_frames(frames_dir, 2, seed=1)
    style = make_frames(tmp_path / "style", 1, seed=2)[0]
    job = job_for(tmp_path, tiny_checkpoint, frames_dir, style)
    report = stylize_video(job)
    assert report.frames == 2
    outs = list_frames(tmp_path / "out")
    assert [p.name for p in outs] == ["000000.png", "000001.png"]
    from colorista.training import load_image
    img = load_image(outs[0])
    assert img.shape == (3, 16, 16)
    assert len(report.per_frame_seconds) == 2


def test_stylize_deterministic(tmp_path, tiny_checkpoint):
    frames_dir = tmp_path / "frames"
    make_frames(frames_dir, 3, seed=3)
    style = make_frames(tmp_path / "style", 1, seed=4)[0]
    job_a = job_for(tmp_path, tiny_checkpoint, frames_dir, style)
    job_a.output_dir = str(tmp_path / "out_a")
    job_b = job_for(tmp_path, tiny_checkpoint, frames_dir, style)
    job_b.output_dir = str(tmp_path / "out_b")
    stylize_video(job_a)
    stylize_video(job_b)
    for a, b in zip(list_frames(job_a.output_dir), list_frames(job_b.output_dir)):
        assert a.read_bytes() == b.read_bytes()


def test_truncated_render_is_prefix_of_full(tmp_path, tiny_checkpoint):
    frames_dir = tmp_path / "frames"
    make_frames(frames_dir, 6, seed=5)
    styles = make_frames(tmp_path / "style", 2, seed=6)
    plan = StylePlan(entries=[(str(styles[0]), 0), (str(styles[1]), 3)], smooth_kernel=4)

    full = job_for(tmp_path, tiny_checkpoint, frames_dir, styles[0], plan=plan)
    full.output_dir = str(tmp_path / "full")
    stylize_video(full)

    part = job_for(tmp_path, tiny_checkpoint, frames_dir, styles[0], plan=plan)
    part.output_dir = str(tmp_path / "part")
    part.max_frames = 4
    report = stylize_video(part)
    assert report.frames == 4

    full_frames = list_frames(full.output_dir)
    part_frames = list_frames(part.output_dir)
    assert len(full_frames) == 6 and len(part_frames) == 4
    for a, b in zip(full_frames[:4], part_frames):
        assert a.read_bytes() == b.read_bytes()


def test_no_recurrence_permutation_invariance(tmp_path, tiny_checkpoint):
    rng = np.random.default_rng(7)
    frames = [(rng.random((16, 16, 3)) * 255).astype(np.uint8) for _ in range(3)]
    from PIL import Image

    dir_a = tmp_path / "a"
    dir_b = tmp_path / "b"
    dir_a.mkdir()
    dir_b.mkdir()
    order_b = [1, 0, 2]
    for i, arr in enumerate(frames):
        Image.fromarray(arr).save(dir_a / f"{i:03d}.png")
    for j, src in enumerate(order_b):
        Image.fromarray(frames[src]).save(dir_b / f"{j:03d}.png")
    style = make_frames(tmp_path / "style", 1, seed=8)[0]

    job_a = job_for(tmp_path, tiny_checkpoint, dir_a, style, temporal_mode="no_recurrence")
    job_a.output_dir = str(tmp_path / "out_a")
    job_b = job_for(tmp_path, tiny_checkpoint, dir_b, style, temporal_mode="no_recurrence")
    job_b.output_dir = str(tmp_path / "out_b")
    stylize_video(job_a)
    stylize_video(job_b)
    outs_a = list_frames(job_a.output_dir)
    outs_b = list_frames(job_b.output_dir)
    for j, src in enumerate(order_b):
        assert outs_b[j].read_bytes() == outs_a[src].read_bytes()


def test_plan_checkpoint_mismatch_needs_force(tmp_path, tiny_checkpoint):
    frames_dir = tmp_path / "frames"
    make_frames(frames_dir, 1, seed=9)
    style = make_frames(tmp_path / "style", 1, seed=10)[0]
    plan = StylePlan(entries=[(str(style), 0)], whiten=2)

    job = job_for(tmp_path, tiny_checkpoint, frames_dir, style, plan=plan)
    with pytest.warns(UserWarning, match="differ"):
        with pytest.raises(RuntimeError, match="force"):
            stylize_video(job)

    job.force = True
    with pytest.warns(UserWarning):
        report = stylize_video(job)
    assert report.frames == 1
    assert any("whiten" in w for w in report.warnings)


def test_forced_consecutive_above_trained_cycles_stages(tmp_path, tiny_checkpoint):
    frames_dir = tmp_path / "frames"
    make_frames(frames_dir, 1, seed=11)
    style = make_frames(tmp_path / "style", 1, seed=12)[0]
    plan = StylePlan(entries=[(str(style), 0)], consecutive=2)
    job = job_for(tmp_path, tiny_checkpoint, frames_dir, style, plan=plan, force=True)
    with pytest.warns(UserWarning):
        report = stylize_video(job)
    assert report.frames == 1


def test_missing_checkpoint_raises(tmp_path):
    frames_dir = tmp_path / "frames"
    make_frames(frames_dir, 1, seed=13)
    style = make_frames(tmp_path / "style", 1, seed=14)[0]
    job = job_for(tmp_path, tmp_path / "nope.cnet", frames_dir, style)
    with pytest.raises(ArchiveError):
        stylize_video(job)


def test_unreadable_frame_reports_index(tmp_path, tiny_checkpoint):
    frames_dir = tmp_path / "frames"
    make_frames(frames_dir, 2, seed=15)
    (frames_dir / "frame_0001.png").write_bytes(b"this is not an image")
    style = make_frames(tmp_path / "style", 1, seed=16)[0]
    job = job_for(tmp_path, tiny_checkpoint, frames_dir, style)
    with pytest.raises(RuntimeError, match="frame 1"):
        stylize_video(job)


def test_remove_style_round(tmp_path, tiny_checkpoint):
    frames_dir = tmp_path / "frames"
    make_frames(frames_dir, 2, seed=17)
    out_a = tmp_path / "out_a"
    out_b = tmp_path / "out_b"
    r1 = remove_style(frames_dir, out_a, tiny_checkpoint)
    r2 = remove_style(frames_dir, out_b, tiny_checkpoint)
    assert r1.frames == 2
    for a, b in zip(list_frames(out_a), list_frames(out_b)):
        assert a.read_bytes() == b.read_bytes()

    style = make_frames(tmp_path / "style", 1, seed=18)[0]
    out_c = tmp_path / "out_c"
    remove_style(frames_dir, out_c, tiny_checkpoint, style=style)
    # a style reference changes the result relative to self-reference
    diff = any(
        a.read_bytes() != c.read_bytes()
        for a, c in zip(list_frames(out_a), list_frames(out_c))
    )
    assert diff


def test_empty_input_dir(tmp_path, tiny_checkpoint):
    frames_dir = tmp_path / "frames"
    frames_dir.mkdir()
    style = make_frames(tmp_path / "style", 1, seed=19)[0]
    job = job_for(tmp_path, tiny_checkpoint, frames_dir, style)
    with pytest.raises(ValueError, match="no frames"):
        stylize_video(job)


def test_psnr_values():
    a = torch.zeros(3, 8, 8)
    assert psnr(a, a) == float("inf")
    b = torch.full((3, 8, 8), 0.1)
    assert psnr(a, b) == pytest.approx(20.0, rel=1e-6)  # mse 0.01


def test_write_frame_round_trip(tmp_path):
    from colorista.training import load_image

    g = torch.Generator().manual_seed(20)
    img = torch.rand(3, 16, 16, generator=g)
    p = tmp_path / "f.png"
    write_frame(p, img)
    back = load_image(p)
    assert (back - img).abs().max() <= (0.5 / 255) + 1e-6
