"""Forward omnidirectional rasterizer.

Pipeline per frame: transform Gaussians to camera space, project means
through the equirectangular map, build each splat's 2D kernel from the
projection Jacobian, sort by Euclidean distance, and composite
front-to-back, recording the blend history the backward pass needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom, scene
from ._kernels import composite_forward
from .errors import DataError, NumericalError


@dataclass(frozen=True)
class RenderOptions:
    """Rendering knobs; defaults match common splatting practice."""

    background: tuple = (0.0, 0.0, 0.0)
    near_clip: float = 0.01
    alpha_cull: float = 1.0 / 255.0
    alpha_min: float = 1.0 / 255.0
    transmittance_stop: float = 1e-4
    blur_px: float = 0.3
    sigma_extent: float = 3.0
    eps_det: float = 1e-12
    active_sh_degree: int | None = None

    def bg_array(self) -> np.ndarray:
        return np.asarray(self.background, dtype=np.float64).reshape(3)


# Options with every cull/skip heuristic disabled; the forward pass is then
# a smooth function of the parameters (used by gradient checks and by the
# brute-force equivalence tests).
def exact_options(background=(0.0, 0.0, 0.0)) -> RenderOptions:
    return RenderOptions(
        background=background,
        near_clip=0.01,
        alpha_cull=0.0,
        alpha_min=0.0,
        transmittance_stop=0.0,
        sigma_extent=1e9,
    )


@dataclass
class Prepared:
    """Per-frame intermediates for the surviving (non-culled) Gaussians."""

    idx: np.ndarray  # survivor -> cloud index
    R: np.ndarray
    t: np.ndarray
    ccenter: np.ndarray
    x: np.ndarray  # camera-space positions
    dist: np.ndarray
    J: np.ndarray
    M: np.ndarray  # J @ R
    cov3d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    mean2d: np.ndarray
    sigma: np.ndarray
    dirs: np.ndarray
    dirs_raw_norm: np.ndarray
    basis: np.ndarray
    rgb_pre: np.ndarray
    rgb: np.ndarray
    sh_degree: int
    cull_counts: dict


@dataclass
class SplatRecords:
    """Struct-of-arrays splat list; seam-crossing splats appear twice."""

    index: np.ndarray  # cloud index per record
    sur: np.ndarray  # survivor row per record (into Prepared arrays)
    mean2d: np.ndarray
    conic: np.ndarray  # (M, 3) packed [a, b, c] for [[a, b], [b, c]]
    dist: np.ndarray
    rgb: np.ndarray
    opacity: np.ndarray
    seam_shift: np.ndarray
    bbox: np.ndarray  # (M, 4) [r0, r1, c0, c1), columns after seam shift

    def __len__(self) -> int:
        return self.index.shape[0]

    def take(self, order: np.ndarray) -> "SplatRecords":
        return SplatRecords(
            self.index[order],
            self.sur[order],
            self.mean2d[order],
            self.conic[order],
            self.dist[order],
            self.rgb[order],
            self.opacity[order],
            self.seam_shift[order],
            self.bbox[order],
        )


@dataclass
class RenderAux:
    """Blend history consumed by the backward pass."""

    H: int
    W: int
    offsets: np.ndarray
    alpha_raw: np.ndarray
    applied: np.ndarray
    final_T: np.ndarray
    depth_accum: np.ndarray
    records: SplatRecords
    dirs: np.ndarray  # per-survivor viewing directions
    sur_index: np.ndarray  # survivor -> cloud index
    n_gaussians: int
    fingerprint: tuple


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_finite_cloud(cloud: scene.GaussianCloud):
    for name, arr in (
        ("positions", cloud.positions),
        ("log_scales", cloud.log_scales),
        ("rotations", cloud.rotations),
        ("opacity_logits", cloud.opacity_logits),
        ("sh_coeffs", cloud.sh_coeffs),
    ):
        finite = np.isfinite(arr)
        if not finite.all():
            bad = int(np.argwhere(~finite.reshape(arr.shape[0], -1).all(axis=1))[0, 0])
            raise NumericalError(
                "non-finite %s at Gaussian index %d" % (name, bad)
            )


def _fingerprint(cloud, pose, cam, opts) -> tuple:
    return (
        cloud.n,
        cloud.sh_coeffs.shape[1],
        cam.width,
        cam.height,
        float(np.sum(cloud.positions)),
        float(np.sum(cloud.opacity_logits)),
        tuple(np.asarray(pose.q, dtype=np.float64)),
        tuple(np.asarray(pose.t, dtype=np.float64)),
        opts,
    )


def prepare(
    cloud: scene.GaussianCloud,
    pose: geom.CameraPose,
    cam: geom.SphericalCamera,
    opts: RenderOptions,
) -> Prepared:
    """Run the projection pipeline and cull, keeping every intermediate.

    Deterministic and pure: the backward pass calls this again with the
    same inputs and relies on bitwise-identical results.
    """
    _check_finite_cloud(cloud)
    R = geom.quat_to_rotmat(pose.q)
    t = np.asarray(pose.t, dtype=np.float64)
    ccenter = -(R.T @ t)
    counts = {"near": 0, "polar": 0, "alpha": 0, "det": 0}

    n = cloud.n
    if n == 0:
        empty = np.zeros((0,))
        return Prepared(
            idx=np.zeros(0, dtype=np.int64),
            R=R,
            t=t,
            ccenter=ccenter,
            x=np.zeros((0, 3)),
            dist=empty,
            J=np.zeros((0, 2, 3)),
            M=np.zeros((0, 2, 3)),
            cov3d=np.zeros((0, 3, 3)),
            cov2d=np.zeros((0, 2, 2)),
            conic=np.zeros((0, 3)),
            mean2d=np.zeros((0, 2)),
            sigma=empty,
            dirs=np.zeros((0, 3)),
            dirs_raw_norm=empty,
            basis=np.zeros((0, 1)),
            rgb_pre=np.zeros((0, 3)),
            rgb=np.zeros((0, 3)),
            sh_degree=0,
            cull_counts=counts,
        )

    x_all = cloud.positions @ R.T + t
    d_all = np.sqrt(np.sum(x_all * x_all, axis=1))
    r2_all = x_all[:, 0] ** 2 + x_all[:, 2] ** 2
    sigma_all = _sigmoid(cloud.opacity_logits)

    near_ok = d_all > opts.near_clip
    polar_ok = r2_all >= geom.EPS_POLE * d_all * d_all
    alpha_ok = sigma_all >= opts.alpha_cull
    keep = near_ok & polar_ok & alpha_ok
    counts["near"] = int(np.sum(~near_ok))
    counts["polar"] = int(np.sum(near_ok & ~polar_ok))
    counts["alpha"] = int(np.sum(near_ok & polar_ok & ~alpha_ok))

    idx = np.nonzero(keep)[0]
    x = x_all[idx]
    J = geom.projection_jacobian(cam, x) if idx.size else np.zeros((0, 2, 3))
    Mmat = J @ R
    cov3d = scene.covariance_from(cloud.log_scales[idx], cloud.rotations[idx])
    cov2d = np.einsum("nij,njk,nlk->nil", Mmat, cov3d, Mmat)
    cov2d[:, 0, 0] += opts.blur_px**2
    cov2d[:, 1, 1] += opts.blur_px**2
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    det_ok = det > opts.eps_det
    counts["det"] = int(np.sum(~det_ok))
    if not det_ok.all():
        sel = np.nonzero(det_ok)[0]
        idx = idx[sel]
        x = x[sel]
        J = J[sel]
        Mmat = Mmat[sel]
        cov3d = cov3d[sel]
        cov2d = cov2d[sel]
        det = det[sel]

    conic = np.stack(
        [cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det],
        axis=1,
    )
    mean2d = (
        geom.project_equirect(cam, x) if idx.size else np.zeros((0, 2))
    )

    # view direction from the camera center to each Gaussian
    dirs_raw = cloud.positions[idx] - ccenter
    dn = np.sqrt(np.sum(dirs_raw * dirs_raw, axis=1))
    dirs = dirs_raw / dn[:, None] if idx.size else np.zeros((0, 3))

    stored_degree = cloud.sh_degree
    degree = stored_degree
    if opts.active_sh_degree is not None:
        degree = min(opts.active_sh_degree, stored_degree)
    basis = scene.sh_basis(dirs, degree)
    kk = (degree + 1) ** 2
    rgb_pre = (
        np.einsum("nk,nkc->nc", basis, cloud.sh_coeffs[idx][:, :kk, :]) + 0.5
    )
    rgb = np.maximum(rgb_pre, 0.0)

    return Prepared(
        idx=idx,
        R=R,
        t=t,
        ccenter=ccenter,
        x=x,
        dist=d_all[idx],
        J=J,
        M=Mmat,
        cov3d=cov3d,
        cov2d=cov2d,
        conic=conic,
        mean2d=mean2d,
        sigma=sigma_all[idx],
        dirs=dirs,
        dirs_raw_norm=dn if idx.size else np.zeros(0),
        basis=basis,
        rgb_pre=rgb_pre,
        rgb=rgb,
        sh_degree=degree,
        cull_counts=counts,
    )


def build_records(
    prep: Prepared, cam: geom.SphericalCamera, opts: RenderOptions
) -> SplatRecords:
    """Emit one record per splat window; seam-crossing splats get two.

    Windows are clipped to the image and wrap columns by +-W so every
    pixel sees each Gaussian at most once, at the wrapped horizontal
    offset of minimal magnitude.
    """
    W, H = cam.width, cam.height
    k = prep.idx.size
    out_idx = []
    out_sur = []
    out_shift = []
    out_bbox = []

    if k:
        ex = opts.sigma_extent * np.sqrt(np.maximum(prep.cov2d[:, 0, 0], 0.0))
        ey = opts.sigma_extent * np.sqrt(np.maximum(prep.cov2d[:, 1, 1], 0.0))
        u = prep.mean2d[:, 0]
        v = prep.mean2d[:, 1]
        c_lo = np.ceil(u - ex - 0.5).astype(np.int64)
        c_hi = np.floor(u + ex - 0.5).astype(np.int64) + 1
        # A window wider than one period would hit pixels twice; shrink it
        # to exactly one period centred on the mean, so each pixel sees the
        # kernel at the wrapped offset of minimal magnitude.
        wide = c_hi - c_lo > W
        if np.any(wide):
            lo_c = np.ceil(u - W / 2.0 - 0.5).astype(np.int64)
            c_lo = np.where(wide, lo_c, c_lo)
            c_hi = np.where(wide, lo_c + W, c_hi)
        r_lo = np.clip(np.ceil(v - ey - 0.5), 0, H).astype(np.int64)
        r_hi = np.clip(np.floor(v + ey - 0.5) + 1, 0, H).astype(np.int64)

        for s in range(k):
            r0, r1 = r_lo[s], r_hi[s]
            if r1 <= r0:
                continue
            lo, hi = c_lo[s], c_hi[s]
            if hi <= lo:
                continue
            if lo >= 0 and hi <= W:
                out_idx.append(prep.idx[s])
                out_sur.append(s)
                out_shift.append(0)
                out_bbox.append((r0, r1, lo, hi))
            elif lo < 0:
                if hi > 0:
                    out_idx.append(prep.idx[s])
                    out_sur.append(s)
                    out_shift.append(0)
                    out_bbox.append((r0, r1, 0, min(hi, W)))
                out_idx.append(prep.idx[s])
                out_sur.append(s)
                out_shift.append(W)
                out_bbox.append((r0, r1, lo + W, W))
            else:  # hi > W
                if lo < W:
                    out_idx.append(prep.idx[s])
                    out_sur.append(s)
                    out_shift.append(0)
                    out_bbox.append((r0, r1, lo, W))
                out_idx.append(prep.idx[s])
                out_sur.append(s)
                out_shift.append(-W)
                out_bbox.append((r0, r1, 0, hi - W))

    sur = np.asarray(out_sur, dtype=np.int64)
    shift = np.asarray(out_shift, dtype=np.float64)
    bbox = (
        np.asarray(out_bbox, dtype=np.int64).reshape(-1, 4)
        if out_bbox
        else np.zeros((0, 4), dtype=np.int64)
    )
    mean2d = prep.mean2d[sur].copy() if sur.size else np.zeros((0, 2))
    if sur.size:
        mean2d[:, 0] += shift
    return SplatRecords(
        index=np.asarray(out_idx, dtype=np.int64),
        sur=sur,
        mean2d=mean2d,
        conic=prep.conic[sur] if sur.size else np.zeros((0, 3)),
        dist=prep.dist[sur] if sur.size else np.zeros(0),
        rgb=prep.rgb[sur] if sur.size else np.zeros((0, 3)),
        opacity=prep.sigma[sur] if sur.size else np.zeros(0),
        seam_shift=shift,
        bbox=bbox,
    )


def project_gaussians(cloud, pose, cam, opts) -> SplatRecords:
    """Project and cull; survivors become (unsorted) splat records."""
    prep = prepare(cloud, pose, cam, opts)
    return build_records(prep, cam, opts)


def depth_sort(records: SplatRecords) -> SplatRecords:
    """Stable ascending sort by distance, ties broken by Gaussian index."""
    order = np.lexsort((records.index, records.dist))
    return records.take(order)


def render(
    cloud: scene.GaussianCloud,
    pose: geom.CameraPose,
    cam: geom.SphericalCamera,
    opts: RenderOptions = RenderOptions(),
) -> tuple:
    """Render the cloud; returns (image, RenderAux)."""
    H, W = cam.height, cam.width
    prep = prepare(cloud, pose, cam, opts)
    records = depth_sort(build_records(prep, cam, opts))

    sizes = (records.bbox[:, 1] - records.bbox[:, 0]) * (
        records.bbox[:, 3] - records.bbox[:, 2]
    )
    offsets = np.zeros(len(records) + 1, dtype=np.int64)
    np.cumsum(sizes, out=offsets[1:])
    total = int(offsets[-1])

    img = np.zeros((H, W, 3))
    T = np.ones((H, W))
    depth_accum = np.zeros((H, W))
    alpha_raw = np.zeros(total)
    applied = np.zeros(total, dtype=np.uint8)

    if len(records):
        composite_forward(
            records.bbox,
            offsets,
            np.ascontiguousarray(records.mean2d[:, 0]),
            np.ascontiguousarray(records.mean2d[:, 1]),
            np.ascontiguousarray(records.conic[:, 0]),
            np.ascontiguousarray(records.conic[:, 1]),
            np.ascontiguousarray(records.conic[:, 2]),
            records.rgb,
            records.opacity,
            records.dist,
            opts.alpha_min,
            opts.transmittance_stop,
            opts.sigma_extent**2,
            img,
            T,
            depth_accum,
            alpha_raw,
            applied,
        )

    img += T[:, :, None] * opts.bg_array()

    aux = RenderAux(
        H=H,
        W=W,
        offsets=offsets,
        alpha_raw=alpha_raw,
        applied=applied,
        final_T=T,
        depth_accum=depth_accum,
        records=records,
        dirs=prep.dirs,
        sur_index=prep.idx,
        n_gaussians=cloud.n,
        fingerprint=_fingerprint(cloud, pose, cam, opts),
    )
    return img, aux


def expected_depth(aux: RenderAux, min_coverage: float = 0.5) -> np.ndarray:
    """Opacity-weighted expected ray distance; NaN where coverage is low."""
    coverage = 1.0 - aux.final_T
    out = np.full((aux.H, aux.W), np.nan)
    ok = coverage > min_coverage
    out[ok] = aux.depth_accum[ok] / coverage[ok]
    return out
