import numpy as np
import pytest

from dynsplat import synth
from dynsplat.datasets import load_tum_sequence
from dynsplat.geometry import Pose, project, unproject
from dynsplat.metrics import (MetricsError, SequenceResult, emit_report,
                              mask_iou, parse_metrics_csv, psnr)


def test_static_scene_has_empty_masks():
    spec = synth.SceneSpec(height=16, width=16, n_frames=4, seed=0,
                           distractor_radius=0.4,
                           distractor_velocity=(0.0, 0.0))
    seq = synth.generate_sequence(spec)
    for m in seq.masks:
        assert m.sum() == 0


def test_moving_distractor_marks_pixels():
    spec = synth.SceneSpec(height=32, width=32, n_frames=4, seed=0,
                           distractor_radius=0.5,
                           distractor_velocity=(0.05, 0.0))
    seq = synth.generate_sequence(spec)
    assert seq.masks[0].sum() > 0


def test_mask_centroid_moves_at_expected_rate():
    # static camera; world velocity chosen for ~2 px/frame at the disk depth
    spec = synth.SceneSpec(height=64, width=64, n_frames=6, seed=3,
                           distractor_radius=0.35,
                           distractor_start=(-0.15, 0.0),
                           distractor_velocity=(2.0 * 1.8 / 70.0, 0.0),
                           camera_translation_step=(0.0, 0.0, 0.0))
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        seq = synth.generate_sequence(spec)
    cents = []
    for m in seq.masks:
        ys, xs = np.nonzero(m)
        cents.append(xs.mean())
    steps = np.diff(cents)
    assert np.all(np.abs(steps - 2.0) < 0.35)


def test_generator_deterministic():
    spec = synth.SceneSpec(height=16, width=16, n_frames=3, seed=9)
    a = synth.generate_sequence(spec)
    b = synth.generate_sequence(spec)
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa.pixels, fb.pixels)
    for da, db in zip(a.depths, b.depths):
        np.testing.assert_array_equal(da, db)


def test_degenerate_camera_path_warns():
    spec = synth.SceneSpec(height=16, width=16, n_frames=2, seed=0,
                           camera_translation_step=(0.0, 0.0, 0.0))
    with pytest.warns(UserWarning, match="zero baseline"):
        synth.generate_sequence(spec)


def test_ground_truth_warp_consistency():
    """Static pixels warped by gt pose+depth into another frame match colors."""
    spec = synth.SceneSpec(height=32, width=32, n_frames=4, seed=7,
                           distractor_radius=0.0,
                           camera_translation_step=(0.01, 0.0, 0.0))
    seq = synth.generate_sequence(spec)
    intr = seq.intrinsics
    src, dst = 0, 3
    errs = []
    for v in range(4, 28, 3):
        for u in range(4, 28, 3):
            pt_cam = unproject(np.array([u, v], float), seq.depths[src][v, u], intr)
            world = seq.poses[src].apply(pt_cam)
            cam2 = seq.poses[dst].inverse().apply(world)
            if cam2[2] <= 0:
                continue
            uv = project(cam2, intr)
            ui, vi = int(round(uv[0])), int(round(uv[1]))
            if 0 <= ui < 32 and 0 <= vi < 32:
                errs.append(np.abs(seq.frames[dst].pixels[vi, ui]
                                   - seq.frames[src].pixels[v, u]).max())
    assert np.median(errs) < 0.06  # sub-pixel texture shift only


def test_write_and_load_roundtrip(tmp_path):
    spec = synth.SceneSpec(height=16, width=16, n_frames=5, seed=2,
                           distractor_radius=0.5,
                           distractor_velocity=(0.05, 0.0))
    seq = synth.generate_sequence(spec)
    synth.write_sequence(seq, tmp_path)
    back = load_tum_sequence(tmp_path)
    assert len(back.frames) == 5
    assert len(back.associations) == 5
    assert back.skipped_lines == 0
    assert back.gt_masks is not None and back.gt_depths is not None
    np.testing.assert_array_equal(back.gt_masks[2], seq.masks[2])
    assert back.intrinsics.fx == seq.intrinsics.fx
    # quaternion round trip within 1e-6
    for (t0, p0), (t1, p1) in zip(seq.stamped_poses(), back.gt_poses):
        np.testing.assert_allclose(p0.rotation, p1.rotation, atol=1e-6)
        np.testing.assert_allclose(p0.translation, p1.translation, atol=1e-6)


def test_loader_association_window(tmp_path):
    spec = synth.SceneSpec(height=16, width=16, n_frames=5, seed=2)
    seq = synth.generate_sequence(spec)
    synth.write_sequence(seq, tmp_path)
    # push one ground-truth timestamp far from any frame
    gt = (tmp_path / "groundtruth.txt").read_text().splitlines()
    parts = gt[2].split()
    parts[0] = f"{float(parts[0]) + 0.5:.6f}"
    gt[2] = " ".join(parts)
    (tmp_path / "groundtruth.txt").write_text("\n".join(gt) + "\n")
    back = load_tum_sequence(tmp_path)
    assert len(back.associations) == 4  # frame 2 lost its partner


def test_loader_skips_malformed_lines(tmp_path):
    spec = synth.SceneSpec(height=16, width=16, n_frames=3, seed=1)
    seq = synth.generate_sequence(spec)
    synth.write_sequence(seq, tmp_path)
    with open(tmp_path / "rgb.txt", "a") as fh:
        fh.write("garbage line without timestamp\n")
    back = load_tum_sequence(tmp_path)
    assert back.skipped_lines == 1
    assert len(back.frames) == 3


def test_blob_training_set_reproducible():
    a = synth.blob_training_set(5, 2, n_frames=3, size=32)
    b = synth.blob_training_set(5, 2, n_frames=3, size=32)
    np.testing.assert_array_equal(a[0].frames[1].pixels, b[0].frames[1].pixels)
    assert a[0].masks[1].sum() > 0
    static = synth.blob_training_set(5, 1, n_frames=3, size=32, moving=False)
    assert all(m.sum() == 0 for m in static[0].masks)


# --- metrics ------------------------------------------------------------------


def test_psnr_identical_capped():
    img = np.random.default_rng(0).random((8, 8, 3))
    assert psnr(img, img, np.ones((8, 8))) == 99.0


def test_psnr_uniform_difference():
    a = np.zeros((8, 8, 3))
    b = np.full((8, 8, 3), 0.1)
    assert psnr(a, b, np.ones((8, 8))) == pytest.approx(20.0, abs=1e-9)


def test_psnr_region_masks_out_corruption():
    rng = np.random.default_rng(1)
    ref = rng.random((8, 8, 3))
    noisy = ref.copy()
    region = np.ones((8, 8))
    region[:4] = 0.0
    noisy[:4] = rng.random((4, 8, 3))  # corrupt only outside the region
    assert psnr(noisy, ref, region) == 99.0


def test_psnr_empty_region_raises():
    img = np.zeros((4, 4, 3))
    with pytest.raises(MetricsError):
        psnr(img, img, np.zeros((4, 4)))


def test_mask_iou_cases():
    a = np.zeros((4, 4))
    b = np.zeros((4, 4))
    assert mask_iou(a, b) == 1.0
    a[0, :2] = 1
    b[0, 1:3] = 1
    assert mask_iou(a, b) == pytest.approx(1 / 3)


def test_emit_report_empty(tmp_path):
    path = emit_report([], tmp_path)
    lines = path.read_text().splitlines()
    assert lines == ["sequence,ate_rmse_cm,ate_std_cm,psnr_db,ssim,mask_iou"]


def test_emit_report_roundtrip(tmp_path):
    rows = [SequenceResult("synth0", 1.234567, 0.5, 31.25, 0.912345, 0.75)]
    emit_report(rows, tmp_path, config_echo={"seed": 3})
    back = parse_metrics_csv(tmp_path / "metrics.csv")
    assert len(back) == 1
    assert back[0].sequence == "synth0"
    assert back[0].ate_rmse_cm == pytest.approx(1.234567, abs=1e-6)
    assert back[0].ssim == pytest.approx(0.912345, abs=1e-6)
    assert (tmp_path / "report.txt").read_text().startswith("seed = 3")


def test_emit_report_with_plot(tmp_path):
    rows = [SequenceResult("s", 0.0, 0.0, 40.0, 1.0, 1.0)]
    est = np.random.default_rng(0).random((5, 2))
    gt = est + 0.01
    emit_report(rows, tmp_path, trajectories={"s": (est, gt)})
    assert (tmp_path / "trajectory_s.png").is_file()
