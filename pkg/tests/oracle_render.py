"""Brute-force reference renderer for cross-checking the production
rasterizer.

Everything is written directly from the math definitions and imports
nothing from the package under test: quaternion to matrix, the
equirectangular projection, covariance projection through the analytic
Jacobian, the real SH basis with constants spelled as closed-form square
roots, and a per-splat front-to-back composite over the splat's pixel
window. Splats are processed one at a time in globally sorted order, so
every pixel sees its contributors in the same sequence as the production
kernel.
"""

from __future__ import annotations

import math

import numpy as np

_C0 = 0.5 * math.sqrt(1.0 / math.pi)
_C1 = math.sqrt(3.0 / (4.0 * math.pi))
_C2 = (
    0.5 * math.sqrt(15.0 / math.pi),
    -0.5 * math.sqrt(15.0 / math.pi),
    0.25 * math.sqrt(5.0 / math.pi),
    -0.5 * math.sqrt(15.0 / math.pi),
    0.25 * math.sqrt(15.0 / math.pi),
)
_C3 = (
    -0.25 * math.sqrt(35.0 / (2.0 * math.pi)),
    0.5 * math.sqrt(105.0 / math.pi),
    -0.25 * math.sqrt(21.0 / (2.0 * math.pi)),
    0.25 * math.sqrt(7.0 / math.pi),
    -0.25 * math.sqrt(21.0 / (2.0 * math.pi)),
    0.25 * math.sqrt(105.0 / math.pi),
    -0.25 * math.sqrt(35.0 / (2.0 * math.pi)),
)


def quat_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def sh_color(coeffs: np.ndarray, d: np.ndarray, degree: int) -> np.ndarray:
    """Clamped SH color for one direction: max(sum_m basis_m coeffs_m + 0.5, 0)."""
    x, y, z = d
    b = [_C0]
    if degree >= 1:
        b += [-_C1 * y, _C1 * z, -_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        b += [
            _C2[0] * x * y,
            _C2[1] * y * z,
            _C2[2] * (2.0 * zz - xx - yy),
            _C2[3] * x * z,
            _C2[4] * (xx - yy),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        b += [
            _C3[0] * y * (3.0 * xx - yy),
            _C3[1] * x * y * z,
            _C3[2] * y * (4.0 * zz - xx - yy),
            _C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            _C3[4] * x * (4.0 * zz - xx - yy),
            _C3[5] * z * (xx - yy),
            _C3[6] * x * (xx - 3.0 * yy),
        ]
    b = np.asarray(b)
    return np.maximum(b @ coeffs[: b.size] + 0.5, 0.0)


def render_reference(
    positions,
    log_scales,
    rotations,
    opacity_logits,
    sh_coeffs,
    pose_q,
    pose_t,
    width: int,
    height: int,
    background=(0.0, 0.0, 0.0),
    near_clip: float = 0.01,
    alpha_cull: float = 1.0 / 255.0,
    alpha_min: float = 1.0 / 255.0,
    transmittance_stop: float = 1e-4,
    blur_px: float = 0.3,
    sigma_extent: float = 3.0,
    eps_det: float = 1e-12,
    active_sh_degree=None,
):
    """Render by direct evaluation; returns (image, final transmittance).

    Culling rules match the rendering contract: drop splats at distance
    <= near_clip, within 1e-8*d^2 of the polar axis, with opacity below
    alpha_cull, or with near-singular projected covariance. Surviving
    splats composite front to back in (distance, index) order over the
    pixel window |dx| <= extent, |dy| <= extent (windows wider than one
    azimuth period collapse to exactly one period), skipping pixels whose
    transmittance fell below transmittance_stop, whose Mahalanobis
    distance exceeds sigma_extent^2, or whose alpha is below alpha_min.
    """
    H, W = int(height), int(width)
    fx = W / (2.0 * math.pi)
    fy = H / math.pi
    cx = W / 2.0
    cy = H / 2.0
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    stored_degree = {1: 0, 4: 1, 9: 2, 16: 3}[np.asarray(sh_coeffs).shape[1]]
    degree = stored_degree
    if active_sh_degree is not None:
        degree = min(active_sh_degree, stored_degree)

    Rc = quat_matrix(pose_q)
    t = np.asarray(pose_t, dtype=np.float64)
    center = -(Rc.T @ t)

    splats = []
    for i in range(n):
        xc = Rc @ positions[i] + t
        px, py, pz = xc
        d = math.sqrt(px * px + py * py + pz * pz)
        if not d > near_clip:
            continue
        r2 = px * px + pz * pz
        if r2 < 1e-8 * d * d:
            continue
        sig = 1.0 / (1.0 + math.exp(-opacity_logits[i]))
        if sig < alpha_cull:
            continue

        u = math.fmod(fx * math.atan2(px, pz) + cx, W)
        if u < 0.0:
            u += W
        v = fy * math.asin(max(-1.0, min(1.0, py / d))) + cy
        r = math.sqrt(r2)
        d2 = d * d
        J = np.array(
            [
                [fx * pz / r2, 0.0, -fx * px / r2],
                [-fy * px * py / (d2 * r), fy * r / d2, -fy * pz * py / (d2 * r)],
            ]
        )
        Rg = quat_matrix(rotations[i])
        cov3 = Rg @ np.diag(np.exp(2.0 * np.asarray(log_scales[i]))) @ Rg.T
        M = J @ Rc
        cov2 = M @ cov3 @ M.T
        cov2[0, 0] += blur_px * blur_px
        cov2[1, 1] += blur_px * blur_px
        det = cov2[0, 0] * cov2[1, 1] - cov2[0, 1] ** 2
        if not det > eps_det:
            continue
        conic = np.linalg.inv(cov2)

        dirv = positions[i] - center
        dirv = dirv / np.linalg.norm(dirv)
        rgb = sh_color(np.asarray(sh_coeffs[i], dtype=np.float64), dirv, degree)

        ex = sigma_extent * math.sqrt(max(cov2[0, 0], 0.0))
        ey = sigma_extent * math.sqrt(max(cov2[1, 1], 0.0))
        splats.append(
            (d, i, u, v, conic[0, 0], conic[0, 1], conic[1, 1], sig, rgb, ex, ey)
        )

    splats.sort(key=lambda s: (s[0], s[1]))

    img = np.zeros((H, W, 3))
    T = np.ones((H, W))
    cols_c = np.arange(W, dtype=np.float64) + 0.5
    rows_c = np.arange(H, dtype=np.float64) + 0.5
    mm2 = sigma_extent * sigma_extent
    for d, i, u, v, a, b, c, sig, rgb, ex, ey in splats:
        c_lo = int(math.ceil(u - ex - 0.5))
        c_hi = int(math.floor(u + ex - 0.5)) + 1
        if c_hi - c_lo > W:
            # window wider than one azimuth period: exactly one period,
            # centred on the mean
            c_lo = int(math.ceil(u - W / 2.0 - 0.5))
            c_hi = c_lo + W
        r_lo = max(int(math.ceil(v - ey - 0.5)), 0)
        r_hi = min(int(math.floor(v + ey - 0.5)) + 1, H)
        if r_hi <= r_lo:
            continue
        segments = []
        if c_lo >= 0 and c_hi <= W:
            segments.append((c_lo, c_hi, 0.0))
        elif c_lo < 0:
            if c_hi > 0:
                segments.append((0, min(c_hi, W), 0.0))
            segments.append((c_lo + W, W, float(W)))
        else:
            if c_lo < W:
                segments.append((c_lo, W, 0.0))
            segments.append((0, c_hi - W, -float(W)))
        for cs, ce, shift in segments:
            if ce <= cs:
                continue
            mu = u + shift
            dx = cols_c[cs:ce] - mu
            dy = rows_c[r_lo:r_hi] - v
            q = (
                a * dx[None, :] * dx[None, :]
                + 2.0 * b * dx[None, :] * dy[:, None]
                + c * dy[:, None] * dy[:, None]
            )
            araw = sig * np.exp(-0.5 * q)
            Tb = T[r_lo:r_hi, cs:ce]
            ok = (Tb >= transmittance_stop) & (q <= mm2) & (araw >= alpha_min)
            alpha = np.where(ok, np.minimum(araw, 0.99), 0.0)
            w = alpha * Tb
            img[r_lo:r_hi, cs:ce, :] += w[:, :, None] * rgb[None, None, :]
            T[r_lo:r_hi, cs:ce] = Tb * (1.0 - alpha)

    img += T[:, :, None] * np.asarray(background, dtype=np.float64)
    return img, T


def random_scene(seed: int, max_gaussians: int = 100):
    """Seeded random scene exercising every cull path.

    Returns a dict of plain arrays: cloud parameter blocks plus a pose.
    Splat footprints stay well under half the azimuth period so window
    wrapping is unambiguous.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, max_gaussians + 1))
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = rng.uniform(1.5, 4.0, size=(n, 1))
    positions = dirs * radii
    log_scales = np.log(rng.uniform(0.1, 0.3, size=(n, 3)))
    rotations = rng.standard_normal((n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    opacity_logits = rng.uniform(-2.0, 2.5, size=n)
    # exercise the opacity cull
    opacity_logits[: max(n // 10, 1)] = -7.0
    k = int(rng.choice([1, 4, 9, 16]))
    sh = rng.normal(0.0, 0.25, size=(n, k, 3))
    sh[:, 0, :] = (rng.uniform(0.1, 0.9, size=(n, 3)) - 0.5) / _C0

    # append one splat near the polar axis and one inside the near clip;
    # both must be culled identically by either renderer
    positions = np.vstack([positions, [1e-6, 2.0, 1e-6], [0.003, 0.001, 0.004]])
    log_scales = np.vstack([log_scales, np.log([0.2, 0.2, 0.2]), np.log([0.2, 0.2, 0.2])])
    rotations = np.vstack([rotations, [1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
    opacity_logits = np.concatenate([opacity_logits, [1.0, 1.0]])
    sh = np.vstack([sh, np.zeros((2, k, 3))])

    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    t = rng.uniform(-0.3, 0.3, size=3)
    return {
        "positions": positions,
        "log_scales": log_scales,
        "rotations": rotations,
        "opacity_logits": opacity_logits,
        "sh_coeffs": sh,
        "pose_q": q,
        "pose_t": t,
    }
