"""Gaussian cloud parameterization, SH color evaluation, initializers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom
from .errors import DataError, NumericalError

# Real SH basis constants, community 3D-GS convention (w-first bands 0..3).
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
]
_SH_C3 = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.4453057213202769,
    -0.5900435899266435,
]

_VALID_COEFF_COUNTS = {1: 0, 4: 1, 9: 2, 16: 3}


def sh_degree_from_coeffs(n_coeffs: int) -> int:
    if n_coeffs not in _VALID_COEFF_COUNTS:
        raise DataError("invalid SH coefficient count %d" % n_coeffs)
    return _VALID_COEFF_COUNTS[n_coeffs]


@dataclass
class GaussianCloud:
    """N anisotropic Gaussians: position, log scale, orientation, opacity, SH.

    log_scales hold log axis lengths (positivity by construction), opacity
    is stored as a pre-sigmoid logit, rotations as w-first quaternions.
    sh_coeffs has shape (N, (M+1)^2, 3) for degree M in {0, 1, 2, 3}.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_coeffs(self.sh_coeffs.shape[1])

    def validate(self):
        n = self.n
        shapes = {
            "positions": (self.positions.shape, (n, 3)),
            "log_scales": (self.log_scales.shape, (n, 3)),
            "rotations": (self.rotations.shape, (n, 4)),
            "opacity_logits": (self.opacity_logits.shape, (n,)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise DataError("%s shape %s, expected %s" % (name, got, want))
        if self.sh_coeffs.shape[0] != n or self.sh_coeffs.shape[2] != 3:
            raise DataError("sh_coeffs shape %s" % (self.sh_coeffs.shape,))
        sh_degree_from_coeffs(self.sh_coeffs.shape[1])

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.copy(),
            self.log_scales.copy(),
            self.rotations.copy(),
            self.opacity_logits.copy(),
            self.sh_coeffs.copy(),
        )


@dataclass
class SceneInit:
    """Coarse points + colors used to seed (and re-seed) a cloud."""

    points: np.ndarray
    colors: np.ndarray
    source: str = "sfm-ply"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.points.shape[0] < 1:
            raise DataError("scene init needs at least one point")
        if self.colors.shape != self.points.shape:
            raise DataError("points/colors count mismatch")
        if not np.all(np.isfinite(self.points)) or not np.all(
            np.isfinite(self.colors)
        ):
            raise NumericalError("non-finite scene init data")


def covariance_from(log_scale: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """Sigma = R diag(exp(2 s)) R^T for one or many Gaussians.

    Accepts (..., 3) log scales and (..., 4) quaternions.
    """
    R = geom.quat_to_rotmat(rot)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    return np.einsum("...ik,...k,...jk->...ij", R, s2, R)


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the real SH basis at unit directions, shape (..., (M+1)^2)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    n = (degree + 1) ** 2
    b = np.empty(dirs.shape[:-1] + (n,), dtype=np.float64)
    b[..., 0] = _SH_C0
    if degree > 0:
        b[..., 1] = -_SH_C1 * y
        b[..., 2] = _SH_C1 * z
        b[..., 3] = -_SH_C1 * x
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        b[..., 4] = _SH_C2[0] * x * y
        b[..., 5] = _SH_C2[1] * y * z
        b[..., 6] = _SH_C2[2] * (2.0 * zz - xx - yy)
        b[..., 7] = _SH_C2[3] * x * z
        b[..., 8] = _SH_C2[4] * (xx - yy)
    if degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        b[..., 9] = _SH_C3[0] * y * (3.0 * xx - yy)
        b[..., 10] = _SH_C3[1] * x * y * z
        b[..., 11] = _SH_C3[2] * y * (4.0 * zz - xx - yy)
        b[..., 12] = _SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        b[..., 13] = _SH_C3[4] * x * (4.0 * zz - xx - yy)
        b[..., 14] = _SH_C3[5] * z * (xx - yy)
        b[..., 15] = _SH_C3[6] * x * (xx - 3.0 * yy)
    return b


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Raw polynomial gradient d basis_m / d(x, y, z), shape (..., K, 3).

    Taken w.r.t. the unnormalized coordinates; callers compose with the
    normalization Jacobian when the direction itself is a function of
    other parameters.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    n = (degree + 1) ** 2
    g = np.zeros(dirs.shape[:-1] + (n, 3), dtype=np.float64)
    if degree > 0:
        g[..., 1, 1] = -_SH_C1
        g[..., 2, 2] = _SH_C1
        g[..., 3, 0] = -_SH_C1
    if degree > 1:
        g[..., 4, 0] = _SH_C2[0] * y
        g[..., 4, 1] = _SH_C2[0] * x
        g[..., 5, 1] = _SH_C2[1] * z
        g[..., 5, 2] = _SH_C2[1] * y
        g[..., 6, 0] = _SH_C2[2] * (-2.0 * x)
        g[..., 6, 1] = _SH_C2[2] * (-2.0 * y)
        g[..., 6, 2] = _SH_C2[2] * (4.0 * z)
        g[..., 7, 0] = _SH_C2[3] * z
        g[..., 7, 2] = _SH_C2[3] * x
        g[..., 8, 0] = _SH_C2[4] * (2.0 * x)
        g[..., 8, 1] = _SH_C2[4] * (-2.0 * y)
    if degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, 0] = _SH_C3[0] * 6.0 * x * y
        g[..., 9, 1] = _SH_C3[0] * (3.0 * xx - 3.0 * yy)
        g[..., 10, 0] = _SH_C3[1] * y * z
        g[..., 10, 1] = _SH_C3[1] * x * z
        g[..., 10, 2] = _SH_C3[1] * x * y
        g[..., 11, 0] = _SH_C3[2] * (-2.0 * x * y)
        g[..., 11, 1] = _SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
        g[..., 11, 2] = _SH_C3[2] * 8.0 * y * z
        g[..., 12, 0] = _SH_C3[3] * (-6.0 * x * z)
        g[..., 12, 1] = _SH_C3[3] * (-6.0 * y * z)
        g[..., 12, 2] = _SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        g[..., 13, 0] = _SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
        g[..., 13, 1] = _SH_C3[4] * (-2.0 * x * y)
        g[..., 13, 2] = _SH_C3[4] * 8.0 * x * z
        g[..., 14, 0] = _SH_C3[5] * 2.0 * x * z
        g[..., 14, 1] = _SH_C3[5] * (-2.0 * y * z)
        g[..., 14, 2] = _SH_C3[5] * (xx - yy)
        g[..., 15, 0] = _SH_C3[6] * (3.0 * xx - 3.0 * yy)
        g[..., 15, 1] = _SH_C3[6] * (-6.0 * x * y)
        g[..., 15, 2] = 0.0
    return g


def eval_sh(coeffs: np.ndarray, dirs: np.ndarray, degree: int | None = None) -> np.ndarray:
    """Color c = sum_m basis_m(dir) coeffs_m + 0.5, clamped to >= 0.

    coeffs: (..., K, 3); dirs: (..., 3) unit vectors. When `degree` is
    given and lower than the stored degree, higher bands are ignored
    (progressive SH unlock).
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    stored = sh_degree_from_coeffs(coeffs.shape[-2])
    if degree is None:
        degree = stored
    degree = min(degree, stored)
    k = (degree + 1) ** 2
    b = sh_basis(dirs, degree)
    c = np.einsum("...k,...kc->...c", b, coeffs[..., :k, :]) + 0.5
    return np.maximum(c, 0.0)


def _knn_mean_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance to the k nearest neighbors; exact, chunked brute force."""
    n = points.shape[0]
    out = np.empty(n)
    chunk = max(1, min(n, 2_000_000 // max(n, 1)))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = np.sum(
            (points[start:stop, None, :] - points[None, :, :]) ** 2, axis=-1
        )
        # exclude self-distance
        for row, idx in enumerate(range(start, stop)):
            d2[row, idx] = np.inf
        kk = min(k, n - 1)
        part = np.partition(d2, kk - 1, axis=1)[:, :kk]
        out[start:stop] = np.mean(np.sqrt(part), axis=1)
    return out


def init_from_points(init: SceneInit, sh_degree: int = 3) -> GaussianCloud:
    """Seed a cloud at the given points: isotropic scales from 3-NN mean
    distance, opacity 0.1, identity rotations, dc colors from the inverse
    of the 0.5-offset SH map."""
    k_pts = init.points.shape[0]
    if k_pts < 4:
        raise DataError("need at least 4 points to initialize (got %d)" % k_pts)
    n_coeffs = (sh_degree + 1) ** 2
    dist = np.maximum(_knn_mean_distance(init.points, 3), 1e-7)
    log_scales = np.tile(np.log(dist)[:, None], (1, 3))
    rotations = np.zeros((k_pts, 4))
    rotations[:, 0] = 1.0
    opacity = np.full(k_pts, _logit(0.1))
    sh = np.zeros((k_pts, n_coeffs, 3))
    sh[:, 0, :] = (init.colors - 0.5) / _SH_C0
    return GaussianCloud(init.points.copy(), log_scales, rotations, opacity, sh)


def init_random(n: int, radius: float, seed: int, sh_degree: int = 3) -> GaussianCloud:
    """Uniform random points in a ball with uniform random colors."""
    if n < 4:
        raise DataError("need at least 4 random points (got %d)" % n)
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radius * rng.uniform(0.0, 1.0, size=n) ** (1.0 / 3.0)
    points = v * r[:, None]
    colors = rng.uniform(0.0, 1.0, size=(n, 3))
    return init_from_points(
        SceneInit(points, colors, source="random"), sh_degree=sh_degree
    )


def init_from_depth(
    depth: np.ndarray,
    color: np.ndarray,
    pose: geom.CameraPose,
    stride: int = 1,
) -> SceneInit:
    """Back-project every stride-th valid depth pixel into world space.

    Depth holds ray distances along pixel-center directions; invalid
    pixels are non-finite or non-positive.
    """
    depth = np.asarray(depth, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64)
    h, w = depth.shape
    cam = geom.SphericalCamera(w, h)
    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    d = depth[rr, cc]
    valid = np.isfinite(d) & (d > 0)
    if not np.any(valid):
        raise DataError("depth map has no valid pixels")
    uv = np.stack([cc[valid] + 0.5, rr[valid] + 0.5], axis=-1)
    dirs_cam = geom.unproject_equirect(cam, uv)
    R = geom.quat_to_rotmat(pose.q)
    points = geom.camera_center(pose) + d[valid][:, None] * (dirs_cam @ R)
    colors = color[rr[valid], cc[valid]]
    return SceneInit(points, colors, source="depth")


def cloud_to_init(cloud: GaussianCloud) -> SceneInit:
    """Collapse a cloud back to coarse points (positions + dc colors)."""
    colors = np.clip(cloud.sh_coeffs[:, 0, :] * _SH_C0 + 0.5, 0.0, 1.0)
    return SceneInit(cloud.positions.copy(), colors, source="sfm-ply")


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))
