"""Pose and image-quality evaluation.

Estimated camera trajectories are gauge-free (a global similarity can
move every camera and Gaussian without changing any rendering), so pose
error is measured after a closed-form similarity alignment of camera
centers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom, loss, raster, scene
from .errors import DataError


def umeyama(src: np.ndarray, dst: np.ndarray) -> tuple:
    """Least-squares similarity: dst ~ s * R @ src + t.

    src, dst are (N,3) point sets in correspondence. Returns (s, R, t).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise DataError("umeyama expects matching (N,3) arrays, got %s and %s" % (src.shape, dst.shape))
    n = src.shape[0]
    if n < 3:
        raise DataError("umeyama needs at least 3 points, got %d" % n)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / n
    U, S, Vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        d[2] = -1.0
    R = U @ np.diag(d) @ Vt
    var_s = float((xs * xs).sum()) / n
    if var_s < 1e-18:
        s = 1.0
    else:
        s = float((S * d).sum()) / var_s
    t = mu_d - s * (R @ mu_s)
    return s, R, t


def pose_rmse(
    est: list, gt: list, align: bool = True
) -> tuple:
    """RMSE over cameras: (rotation degrees, position world units).

    est and gt are matching lists of CameraPose (world-to-camera). With
    align=True the estimated camera centers are first mapped onto the
    ground-truth frame by a similarity transform.
    """
    if len(est) != len(gt):
        raise DataError("pose_rmse: %d estimated vs %d ground-truth poses" % (len(est), len(gt)))
    if not est:
        raise DataError("pose_rmse: empty pose lists")
    c_est = np.stack([geom.camera_center(p) for p in est])
    c_gt = np.stack([geom.camera_center(p) for p in gt])
    if align:
        s, R_al, t_al = umeyama(c_est, c_gt)
    else:
        s, R_al, t_al = 1.0, np.eye(3), np.zeros(3)
    pos_sq = 0.0
    rot_sq = 0.0
    for p_e, p_g, ce in zip(est, gt, c_est):
        c_mapped = s * (R_al @ ce) + t_al
        cg = geom.camera_center(p_g)
        pos_sq += float(((c_mapped - cg) ** 2).sum())
        # Rotation residual after applying the alignment rotation to the
        # estimated world frame: R_e' = R_e @ R_al^T.
        R_res = p_g.rotmat() @ (p_e.rotmat() @ R_al.T).T
        rot_sq += geom.rotation_angle_deg(R_res) ** 2
    n = len(est)
    return float(np.sqrt(rot_sq / n)), float(np.sqrt(pos_sq / n))


def align_estimated_world(est: list, gt: list) -> tuple:
    """Similarity (s, R, t) mapping estimated camera centers onto gt centers."""
    c_est = np.stack([geom.camera_center(p) for p in est])
    c_gt = np.stack([geom.camera_center(p) for p in gt])
    return umeyama(c_est, c_gt)


def map_pose_to_estimated(
    gt_pose: geom.CameraPose, s: float, R_al: np.ndarray, t_al: np.ndarray
) -> geom.CameraPose:
    """Express a ground-truth camera in the estimated world frame.

    Inverse of the alignment from align_estimated_world: a camera at
    center c_gt with world-to-camera rotation R_gt becomes a camera the
    estimated scene can render from.
    """
    c_gt = geom.camera_center(gt_pose)
    c_est = (R_al.T @ (c_gt - t_al)) / s
    R_est = gt_pose.rotmat() @ R_al
    q = geom.rotmat_to_quat(R_est)
    t = -R_est @ c_est
    return geom.CameraPose(q=q, t=t)


@dataclass
class ViewMetrics:
    psnr: float
    ssim: float


def eval_views(
    cloud: scene.GaussianCloud,
    poses: list,
    images: list,
    cam: geom.SphericalCamera,
    opts: raster.RenderOptions | None = None,
) -> list:
    """Render each pose and compare with its reference image."""
    if len(poses) != len(images):
        raise DataError("eval_views: %d poses vs %d images" % (len(poses), len(images)))
    if opts is None:
        opts = raster.RenderOptions()
    out = []
    for pose, ref in zip(poses, images):
        img, _ = raster.render(cloud, pose, cam, opts)
        p = loss.psnr(img, ref)
        s, _, _ = loss.ssim(img, ref)
        out.append(ViewMetrics(psnr=float(p), ssim=float(s)))
    return out
