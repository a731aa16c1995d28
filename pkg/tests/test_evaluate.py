"""Tests for pose alignment and view metrics."""

from __future__ import annotations

import numpy as np
import pytest

from omnisplat import evaluate, geom, raster
from omnisplat.errors import DataError


def _random_poses(rng: np.random.Generator, n: int) -> list:
    out = []
    for _ in range(n):
        q = geom.normalize_quat(rng.standard_normal(4))
        t = rng.standard_normal(3)
        out.append(geom.CameraPose(q=q, t=t))
    return out


def _apply_similarity(poses: list, s: float, R: np.ndarray, t: np.ndarray) -> list:
    """Move every camera by the world-frame similarity x -> s*R*x + t."""
    out = []
    for p in poses:
        c = geom.camera_center(p)
        c2 = s * (R @ c) + t
        R_w2c = p.rotmat() @ R.T
        q = geom.rotmat_to_quat(R_w2c)
        out.append(geom.CameraPose(q=q, t=-R_w2c @ c2))
    return out


# ---------------------------------------------------------------- umeyama


def test_umeyama_recovers_similarity():
    rng = np.random.default_rng(2)
    src = rng.standard_normal((12, 3))
    R = geom.quat_to_rotmat(geom.normalize_quat(rng.standard_normal(4)))
    s = 1.7
    t = np.array([0.3, -1.2, 2.0])
    dst = s * src @ R.T + t
    s2, R2, t2 = evaluate.umeyama(src, dst)
    assert s2 == pytest.approx(s, rel=1e-10)
    assert np.allclose(R2, R, atol=1e-10)
    assert np.allclose(t2, t, atol=1e-9)


def test_umeyama_returns_proper_rotation_under_reflection():
    # a mirrored correspondence must still come back with det(R) = +1
    rng = np.random.default_rng(3)
    src = rng.standard_normal((20, 3))
    dst = src.copy()
    dst[:, 2] *= -1.0
    _, R, _ = evaluate.umeyama(src, dst)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-10)


def test_umeyama_validation():
    with pytest.raises(DataError):
        evaluate.umeyama(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(DataError):
        evaluate.umeyama(np.zeros((5, 3)), np.zeros((4, 3)))
    with pytest.raises(DataError):
        evaluate.umeyama(np.zeros((5, 2)), np.zeros((5, 2)))


def test_umeyama_degenerate_source_cluster():
    # all source points coincide: scale falls back to 1 instead of blowing up
    src = np.zeros((4, 3))
    dst = np.array([[1.0, 0, 0], [1, 0, 0], [1, 0, 0], [1, 0, 0]])
    s, _, t = evaluate.umeyama(src, dst)
    assert s == 1.0
    assert np.allclose(t, [1.0, 0.0, 0.0])


# ---------------------------------------------------------------- pose rmse


def test_pose_rmse_zero_on_identical():
    poses = _random_poses(np.random.default_rng(5), 6)
    rot, pos = evaluate.pose_rmse(poses, poses, align=True)
    # arccos near the identity amplifies rounding to ~sqrt(eps) degrees
    assert rot < 1e-5
    assert pos < 1e-9


def test_pose_rmse_invariant_to_similarity():
    rng = np.random.default_rng(6)
    gt = _random_poses(rng, 8)
    R = geom.quat_to_rotmat(geom.normalize_quat(rng.standard_normal(4)))
    moved = _apply_similarity(gt, 0.6, R, np.array([2.0, 0.5, -1.0]))
    rot, pos = evaluate.pose_rmse(moved, gt, align=True)
    assert rot < 1e-5
    assert pos < 1e-9


def test_pose_rmse_without_alignment_sees_offset():
    rng = np.random.default_rng(7)
    gt = _random_poses(rng, 5)
    # rotate every camera in place by exactly 1 degree about its own axis
    est = []
    for p in gt:
        dq = geom.axis_angle_to_quat(np.array([0.0, 1.0, 0.0]), np.deg2rad(1.0))
        est.append(geom.CameraPose(q=geom.quat_multiply(p.q, dq), t=p.t.copy()))
    rot, _ = evaluate.pose_rmse(est, gt, align=False)
    assert rot == pytest.approx(1.0, rel=1e-6)


def test_pose_rmse_validation():
    poses = _random_poses(np.random.default_rng(8), 3)
    with pytest.raises(DataError):
        evaluate.pose_rmse(poses, poses[:-1])
    with pytest.raises(DataError):
        evaluate.pose_rmse([], [])


# ---------------------------------------------------------------- mapping


def test_map_pose_round_trip():
    rng = np.random.default_rng(9)
    est_world = _random_poses(rng, 6)
    R = geom.quat_to_rotmat(geom.normalize_quat(rng.standard_normal(4)))
    s, t = 1.4, np.array([0.2, -0.7, 0.9])
    gt_world = _apply_similarity(est_world, s, R, t)

    s2, R2, t2 = evaluate.align_estimated_world(est_world, gt_world)
    for p_est, p_gt in zip(est_world, gt_world):
        mapped = evaluate.map_pose_to_estimated(p_gt, s2, R2, t2)
        assert np.allclose(
            geom.camera_center(mapped), geom.camera_center(p_est), atol=1e-9
        )
        assert np.allclose(mapped.rotmat(), p_est.rotmat(), atol=1e-9)


def test_mapped_pose_renders_like_estimated(tiny_scene):
    # rendering from a mapped ground-truth pose must match rendering from
    # the estimated pose it corresponds to
    sc = tiny_scene
    rng = np.random.default_rng(10)
    R = geom.quat_to_rotmat(geom.normalize_quat(rng.standard_normal(4)))
    s, t = 1.0, np.array([0.05, -0.02, 0.04])
    gt_world = _apply_similarity(sc.poses, s, R, t)
    s2, R2, t2 = evaluate.align_estimated_world(sc.poses, gt_world)
    mapped = evaluate.map_pose_to_estimated(gt_world[0], s2, R2, t2)
    a, _ = raster.render(sc.cloud, sc.poses[0], sc.cam, raster.RenderOptions())
    b, _ = raster.render(sc.cloud, mapped, sc.cam, raster.RenderOptions())
    assert np.max(np.abs(a - b)) < 1e-6


# ---------------------------------------------------------------- view metrics


def test_eval_views(tiny_scene):
    sc = tiny_scene
    metrics = evaluate.eval_views(sc.cloud, sc.poses, sc.images, sc.cam)
    assert len(metrics) == len(sc.poses)
    for m in metrics:
        # references are quantized renders of the same cloud
        assert m.psnr > 40.0
        assert m.ssim > 0.99

    with pytest.raises(DataError):
        evaluate.eval_views(sc.cloud, sc.poses, sc.images[:-1], sc.cam)
