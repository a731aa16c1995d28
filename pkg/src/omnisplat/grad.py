"""Analytic backward pass for the omnidirectional rasterizer.

Given dL/dImage, produces exact reverse-mode gradients for every
Gaussian parameter and for the camera pose. Per-record partials come
from a reverse compositing sweep over the blend history recorded by the
forward pass; everything upstream (conic, covariance, projection,
spherical harmonics) is chained analytically in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom, raster, scene
from ._kernels import composite_backward
from .errors import DataError, NumericalError


@dataclass
class CloudGrads:
    """Gradients for every Gaussian parameter block.

    mean2d_norms holds this call's per-Gaussian 2D position-gradient
    norms (pixels); touched flags which Gaussians were splatted. Both
    feed the densification statistics.
    """

    d_positions: np.ndarray
    d_log_scales: np.ndarray
    d_rotations: np.ndarray
    d_opacity_logits: np.ndarray
    d_sh: np.ndarray
    mean2d_norms: np.ndarray
    touched: np.ndarray


@dataclass
class PoseGrad:
    d_q: np.ndarray
    d_t: np.ndarray


@dataclass
class DensifyStats:
    """Running per-Gaussian averages of 2D position-gradient norms."""

    norm_sum: np.ndarray
    counts: np.ndarray

    @staticmethod
    def zeros(n: int) -> "DensifyStats":
        return DensifyStats(np.zeros(n), np.zeros(n, dtype=np.int64))

    def reset(self):
        self.norm_sum[:] = 0.0
        self.counts[:] = 0

    def means(self) -> np.ndarray:
        out = np.zeros_like(self.norm_sum)
        seen = self.counts > 0
        out[seen] = self.norm_sum[seen] / self.counts[seen]
        return out


def accumulate_densify_stats(stats: DensifyStats, grads: CloudGrads) -> DensifyStats:
    stats.norm_sum += grads.mean2d_norms
    stats.counts += grads.touched.astype(np.int64)
    return stats


def _check_block(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise NumericalError("non-finite gradient in block %s" % name)


def backward(
    cloud: scene.GaussianCloud,
    pose: geom.CameraPose,
    cam: geom.SphericalCamera,
    opts: raster.RenderOptions,
    aux: raster.RenderAux,
    dL_dimage: np.ndarray,
    pose_frozen: bool = False,
) -> tuple:
    """Backpropagate dL/dImage through the full forward pipeline.

    aux must come from a render() call with these exact inputs; the
    projection intermediates are recomputed here (deterministically
    identical) while the per-pixel blend history is read from aux.
    """
    if aux.fingerprint != raster._fingerprint(cloud, pose, cam, opts):
        raise DataError("stale render aux: forward inputs changed since render()")
    dL_dimage = np.ascontiguousarray(dL_dimage, dtype=np.float64)
    if dL_dimage.shape != (aux.H, aux.W, 3):
        raise DataError(
            "dL_dimage shape %s does not match render %dx%d"
            % (dL_dimage.shape, aux.H, aux.W)
        )

    n = cloud.n
    K = cloud.sh_coeffs.shape[1] if n else 1
    grads = CloudGrads(
        d_positions=np.zeros((n, 3)),
        d_log_scales=np.zeros((n, 3)),
        d_rotations=np.zeros((n, 4)),
        d_opacity_logits=np.zeros(n),
        d_sh=np.zeros((n, K, 3)),
        mean2d_norms=np.zeros(n),
        touched=np.zeros(n, dtype=bool),
    )
    pgrad = PoseGrad(d_q=np.zeros(4), d_t=np.zeros(3))
    if n == 0:
        return grads, pgrad

    prep = raster.prepare(cloud, pose, cam, opts)
    records = aux.records
    m = len(records)

    d_mean_rec = np.zeros((m, 2))
    d_conic_rec = np.zeros((m, 3))
    d_rgb_rec = np.zeros((m, 3))
    d_sigma_rec = np.zeros(m)
    if m:
        T_buf = aux.final_T.copy()
        S_buf = aux.final_T[:, :, None] * opts.bg_array()[None, None, :]
        S_buf = np.ascontiguousarray(S_buf)
        composite_backward(
            records.bbox,
            aux.offsets,
            np.ascontiguousarray(records.mean2d[:, 0]),
            np.ascontiguousarray(records.mean2d[:, 1]),
            np.ascontiguousarray(records.conic[:, 0]),
            np.ascontiguousarray(records.conic[:, 1]),
            np.ascontiguousarray(records.conic[:, 2]),
            records.rgb,
            records.opacity,
            aux.alpha_raw,
            aux.applied,
            dL_dimage,
            T_buf,
            S_buf,
            d_mean_rec,
            d_conic_rec,
            d_rgb_rec,
            d_sigma_rec,
        )

    # Reduce seam-duplicated records onto their survivor rows. np.add.at
    # runs sequentially in record order, keeping accumulation deterministic.
    ns = prep.idx.size
    d_mean = np.zeros((ns, 2))
    d_conic = np.zeros((ns, 3))
    d_rgb = np.zeros((ns, 3))
    d_sigma = np.zeros(ns)
    touched_sur = np.zeros(ns, dtype=bool)
    if m:
        np.add.at(d_mean, records.sur, d_mean_rec)
        np.add.at(d_conic, records.sur, d_conic_rec)
        np.add.at(d_rgb, records.sur, d_rgb_rec)
        np.add.at(d_sigma, records.sur, d_sigma_rec)
        touched_sur[records.sur] = True

    idx = prep.idx
    R = prep.R
    t = prep.t

    # --- color branch ---
    # rgb = max(rgb_pre, 0); the clamp passes gradient only where active.
    d_rgb_pre = np.where(prep.rgb_pre > 0.0, d_rgb, 0.0)
    kk = (prep.sh_degree + 1) ** 2
    grads.d_sh[idx, :kk, :] = prep.basis[:, :, None] * d_rgb_pre[:, None, :]

    basis_grad = scene.sh_basis_grad(prep.dirs, prep.sh_degree)
    coeff_dot = np.einsum(
        "nkc,nc->nk", cloud.sh_coeffs[idx][:, :kk, :], d_rgb_pre
    )
    d_dir = np.einsum("nkj,nk->nj", basis_grad, coeff_dot)

    # dir = w / |w| with w = P - camera_center = P + R^T t
    dn = prep.dirs_raw_norm
    d_w = (d_dir - prep.dirs * np.sum(prep.dirs * d_dir, axis=1)[:, None]) / dn[
        :, None
    ]
    d_pos = d_w.copy()
    if not pose_frozen:
        sum_dw = d_w.sum(axis=0)
        pgrad.d_t += R @ sum_dw
        # w_d = P_d + sum_c R[c,d] t[c]  ->  dL/dR[c,d] += t[c] * dL/dw_d
        dR_pose = np.outer(t, sum_dw)
    else:
        dR_pose = np.zeros((3, 3))

    # --- opacity branch ---
    sg = prep.sigma
    grads.d_opacity_logits[idx] = d_sigma * sg * (1.0 - sg)

    # --- kernel shape branch: conic -> cov2d -> (M, cov3d) ---
    A = np.empty((ns, 2, 2))
    A[:, 0, 0] = prep.conic[:, 0]
    A[:, 0, 1] = prep.conic[:, 1]
    A[:, 1, 0] = prep.conic[:, 1]
    A[:, 1, 1] = prep.conic[:, 2]
    G = np.empty((ns, 2, 2))
    G[:, 0, 0] = d_conic[:, 0]
    G[:, 0, 1] = 0.5 * d_conic[:, 1]
    G[:, 1, 0] = 0.5 * d_conic[:, 1]
    G[:, 1, 1] = d_conic[:, 2]
    # d(B^-1) = -B^-1 dB B^-1  ->  dL/dB = -A G A  (A, G symmetric)
    dB = -np.einsum("nij,njk,nkl->nil", A, G, A)

    Mmat = prep.M
    cov3d = prep.cov3d
    dM = 2.0 * np.einsum("nij,njk,nkl->nil", dB, Mmat, cov3d)
    dcov3d = np.einsum("nji,njk,nkl->nil", Mmat, dB, Mmat)

    # cov3d = R_g diag(e^{2s}) R_g^T
    Rg = geom.quat_to_rotmat(cloud.rotations[idx])
    D = np.exp(2.0 * cloud.log_scales[idx])
    dRg = 2.0 * np.einsum("nij,njk,nk->nik", dcov3d, Rg, D)
    inner = np.einsum("nji,njk,nkl->nil", Rg, dcov3d, Rg)
    grads.d_log_scales[idx] = (
        2.0 * D * np.stack([inner[:, 0, 0], inner[:, 1, 1], inner[:, 2, 2]], axis=1)
    )
    dRdq_g = geom.drotmat_dquat(cloud.rotations[idx])
    grads.d_rotations[idx] = np.einsum("nij,nijk->nk", dRg, dRdq_g)

    # M = J R splits into the J path (through x) and the explicit R path.
    dJ = np.einsum("nij,kj->nik", dM, R)
    if not pose_frozen:
        # Explicit R inside J R Sigma R^T J^T, expanded from the projected
        # covariance: with M = J R, dL/dR = J^T dL/dM summed over Gaussians.
        # This is the additive rotation term of the 2D-kernel pose branch,
        # separate from the x_i-mediated terms below.
        dR_pose += np.einsum("nji,njk->ik", prep.J, dM)

    # --- projected mean and Jacobian: both live on x = R P + t ---
    d_x = np.einsum("nji,nj->ni", prep.J, d_mean)
    dJdx = geom.projection_jacobian_dx(cam, prep.x)
    d_x += np.einsum("nij,nijk->nk", dJ, dJdx)

    d_pos += d_x @ R
    if not pose_frozen:
        pgrad.d_t += d_x.sum(axis=0)
        dR_pose += np.einsum("ni,nj->ij", d_x, cloud.positions[idx])
        dRdq_p = geom.drotmat_dquat(pose.q)
        pgrad.d_q += np.einsum("ij,ijk->k", dR_pose, dRdq_p)

    grads.d_positions[idx] = d_pos
    grads.mean2d_norms[idx] = np.where(
        touched_sur, np.sqrt(np.sum(d_mean * d_mean, axis=1)), 0.0
    )
    full_touched = np.zeros(n, dtype=bool)
    full_touched[idx] = touched_sur
    grads.touched = full_touched

    _check_block("positions", grads.d_positions)
    _check_block("log_scales", grads.d_log_scales)
    _check_block("rotations", grads.d_rotations)
    _check_block("opacity_logits", grads.d_opacity_logits)
    _check_block("sh_coeffs", grads.d_sh)
    _check_block("pose.q", pgrad.d_q)
    _check_block("pose.t", pgrad.d_t)
    return grads, pgrad
