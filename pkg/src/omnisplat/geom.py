"""Quaternion algebra, camera poses, and the equirectangular projection.

Conventions used throughout the package:
  * quaternions are stored w-first (w, x, y, z) and may be unnormalized;
    every consumer normalizes internally and derivatives include the
    normalization chain,
  * poses are world-to-camera, x = R(q) @ P + t,
  * continuous image coordinates follow the array layout: u is the column
    axis in [0, W), v is the row axis in [0, H]; the center of integer
    pixel (row, col) is (col + 0.5, row + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

# Azimuthal pole guard for the projection Jacobian: cull when x^2 + z^2
# falls below EPS_POLE * d^2 (the Jacobian norm diverges at the poles).
EPS_POLE = 1e-8

_EPS_QUAT = 1e-12
_EPS_CENTER = 1e-12


def normalize_quat(q: np.ndarray) -> np.ndarray:
    """Return q / ||q||, raising on a degenerate (near-zero) quaternion."""
    q = np.asarray(q, dtype=np.float64)
    n = np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
    if np.any(n < _EPS_QUAT) or not np.all(np.isfinite(n)):
        raise NumericalError("degenerate quaternion")
    return q / n


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (possibly unnormalized) w-first quaternion.

    Accepts shape (..., 4) and returns (..., 3, 3).
    """
    q = normalize_quat(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def drotmat_dquat(q: np.ndarray) -> np.ndarray:
    """Derivative tensor dR[i,j]/dq_raw[k], shape (..., 3, 3, 4).

    The derivative is taken w.r.t. the raw (unnormalized) quaternion, with
    the chain through q_hat = q / ||q|| folded in, so a perturbation along
    q itself produces no change in R.
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
    if np.any(n < _EPS_QUAT):
        raise NumericalError("degenerate quaternion")
    qh = q / n
    w, x, y, z = qh[..., 0], qh[..., 1], qh[..., 2], qh[..., 3]
    zero = np.zeros_like(w)

    D = np.empty(q.shape[:-1] + (3, 3, 4), dtype=np.float64)
    # dR/dw
    D[..., 0, 0, 0] = zero
    D[..., 0, 1, 0] = -2.0 * z
    D[..., 0, 2, 0] = 2.0 * y
    D[..., 1, 0, 0] = 2.0 * z
    D[..., 1, 1, 0] = zero
    D[..., 1, 2, 0] = -2.0 * x
    D[..., 2, 0, 0] = -2.0 * y
    D[..., 2, 1, 0] = 2.0 * x
    D[..., 2, 2, 0] = zero
    # dR/dx
    D[..., 0, 0, 1] = zero
    D[..., 0, 1, 1] = 2.0 * y
    D[..., 0, 2, 1] = 2.0 * z
    D[..., 1, 0, 1] = 2.0 * y
    D[..., 1, 1, 1] = -4.0 * x
    D[..., 1, 2, 1] = -2.0 * w
    D[..., 2, 0, 1] = 2.0 * z
    D[..., 2, 1, 1] = 2.0 * w
    D[..., 2, 2, 1] = -4.0 * x
    # dR/dy
    D[..., 0, 0, 2] = -4.0 * y
    D[..., 0, 1, 2] = 2.0 * x
    D[..., 0, 2, 2] = 2.0 * w
    D[..., 1, 0, 2] = 2.0 * x
    D[..., 1, 1, 2] = zero
    D[..., 1, 2, 2] = 2.0 * z
    D[..., 2, 0, 2] = -2.0 * w
    D[..., 2, 1, 2] = 2.0 * z
    D[..., 2, 2, 2] = -4.0 * y
    # dR/dz
    D[..., 0, 0, 3] = -4.0 * z
    D[..., 0, 1, 3] = -2.0 * w
    D[..., 0, 2, 3] = 2.0 * x
    D[..., 1, 0, 3] = 2.0 * w
    D[..., 1, 1, 3] = -4.0 * z
    D[..., 1, 2, 3] = 2.0 * y
    D[..., 2, 0, 3] = 2.0 * x
    D[..., 2, 1, 3] = 2.0 * y
    D[..., 2, 2, 3] = zero

    # chain through normalization: dqh_l/dq_k = (delta_lk - qh_l qh_k) / n
    proj = np.eye(4) - qh[..., :, None] * qh[..., None, :]
    proj = proj / n[..., None]
    return np.einsum("...ijl,...lk->...ijk", D, proj)


@dataclass
class CameraPose:
    """World-to-camera pose: x = R(q) @ P + t."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    def copy(self) -> "CameraPose":
        return CameraPose(self.q.copy(), self.t.copy())

    def rotmat(self) -> np.ndarray:
        return quat_to_rotmat(self.q)


def identity_pose() -> CameraPose:
    return CameraPose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))


def world_to_camera(pose: CameraPose, P: np.ndarray) -> np.ndarray:
    """Apply x = R P + t; P may be (3,) or (N, 3)."""
    R = quat_to_rotmat(pose.q)
    P = np.asarray(P, dtype=np.float64)
    return P @ R.T + pose.t


def camera_to_world(pose: CameraPose, x: np.ndarray) -> np.ndarray:
    """Inverse transform: P = R^T (x - t)."""
    R = quat_to_rotmat(pose.q)
    x = np.asarray(x, dtype=np.float64)
    return (x - pose.t) @ R


def camera_center(pose: CameraPose) -> np.ndarray:
    """Optical center in world coordinates: -R^T t."""
    R = quat_to_rotmat(pose.q)
    return -(R.T @ pose.t)


@dataclass(frozen=True)
class SphericalCamera:
    """Equirectangular camera; intrinsics are derived from the image size."""

    width: int
    height: int

    def __post_init__(self):
        if self.height < 1 or self.width != 2 * self.height:
            raise ValueError(
                "equirectangular image must satisfy W = 2H, got %dx%d"
                % (self.width, self.height)
            )

    @property
    def fx(self) -> float:
        return self.width / (2.0 * np.pi)

    @property
    def fy(self) -> float:
        return self.height / np.pi

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0


def project_equirect(cam: SphericalCamera, x: np.ndarray) -> np.ndarray:
    """Map camera-space points to continuous equirectangular coordinates.

    u = fx * atan2(x, z) + cx, wrapped into [0, W); v = fy * asin(y/d) + cy.
    Accepts (..., 3), returns (..., 2).
    """
    x = np.asarray(x, dtype=np.float64)
    d = np.sqrt(np.sum(x * x, axis=-1))
    if np.any(d < _EPS_CENTER):
        raise NumericalError("point at camera center")
    u = cam.fx * np.arctan2(x[..., 0], x[..., 2]) + cam.cx
    u = np.mod(u, cam.width)
    v = cam.fy * np.arcsin(np.clip(x[..., 1] / d, -1.0, 1.0)) + cam.cy
    return np.stack([u, v], axis=-1)


def unproject_equirect(cam: SphericalCamera, u: np.ndarray) -> np.ndarray:
    """Unit direction for continuous image coordinates (u, v).

    Exact inverse of project_equirect for v in [0, H]. Accepts (..., 2),
    returns (..., 3) unit vectors.
    """
    u = np.asarray(u, dtype=np.float64)
    theta = (u[..., 0] - cam.cx) / cam.fx
    elev = (u[..., 1] - cam.cy) / cam.fy
    ce = np.cos(elev)
    return np.stack(
        [np.sin(theta) * ce, np.sin(elev), np.cos(theta) * ce], axis=-1
    )


def projection_jacobian(
    cam: SphericalCamera, x: np.ndarray, on_polar: str = "raise"
) -> np.ndarray:
    """Analytic 2x3 Jacobian of project_equirect at camera-space point x.

    Homogeneous of degree -1: J(s*x) = J(x)/s. Points with
    x^2 + z^2 < EPS_POLE * d^2 sit near the polar axis where the azimuth
    derivative diverges: on_polar="raise" errors (the rasterizer culls
    such Gaussians for the frame). on_polar="exact" evaluates the
    formulas whenever x^2 + z^2 > 0, however close to the axis: the
    camera model needs this because its grid directions have tiny but
    nonzero horizontal components on the pole rows, and the huge Jacobian
    entries there cancel against those tiny components downstream. Only
    points exactly on the axis get a zero row-pair in that mode.
    """
    x = np.asarray(x, dtype=np.float64)
    px, py, pz = x[..., 0], x[..., 1], x[..., 2]
    r2 = px * px + pz * pz
    d2 = r2 + py * py
    if on_polar == "exact":
        bad = r2 == 0.0
    else:
        bad = r2 < EPS_POLE * d2
    if np.any(bad):
        if on_polar == "raise":
            raise NumericalError("polar singularity")
        px = np.where(bad, 1.0, px)
        pz = np.where(bad, 0.0, pz)
        r2 = np.where(bad, 1.0, r2)
        d2 = np.where(bad, 1.0 + py * py, d2)
    r = np.sqrt(r2)
    J = np.empty(x.shape[:-1] + (2, 3), dtype=np.float64)
    J[..., 0, 0] = cam.fx * pz / r2
    J[..., 0, 1] = 0.0
    J[..., 0, 2] = -cam.fx * px / r2
    # v = fy * asin(y/d); the azimuthal entries carry -y * x/(d^2 r) and
    # -y * z/(d^2 r) (x<->z symmetric), the elevation entry r/d^2.
    J[..., 1, 0] = -cam.fy * px * py / (d2 * r)
    J[..., 1, 1] = cam.fy * r / d2
    J[..., 1, 2] = -cam.fy * pz * py / (d2 * r)
    if on_polar == "exact" and np.any(bad):
        J[bad] = 0.0
    return J


def projection_jacobian_dx(cam: SphericalCamera, x: np.ndarray) -> np.ndarray:
    """Second-derivative tensor dJ[a,b]/dx_k, shape (..., 2, 3, 3).

    Needed by the backward pass where the 2D covariance depends on the
    Jacobian which itself depends on the Gaussian's camera-space position.
    """
    x = np.asarray(x, dtype=np.float64)
    px, py, pz = x[..., 0], x[..., 1], x[..., 2]
    r2 = px * px + pz * pz
    d2 = r2 + py * py
    if np.any(r2 < EPS_POLE * d2):
        raise NumericalError("polar singularity")
    r = np.sqrt(r2)
    r4 = r2 * r2
    d4 = d2 * d2
    fx, fy = cam.fx, cam.fy
    Q = 1.0 / (d2 * r)
    # dQ/dx = -x * Q * s, dQ/dz = -z * Q * s, dQ/dy = -2 y Q / d^2
    s = 2.0 / d2 + 1.0 / r2

    T = np.zeros(x.shape[:-1] + (2, 3, 3), dtype=np.float64)
    # row 1: J00 = fx z / r^2,  J02 = -fx x / r^2
    T[..., 0, 0, 0] = -2.0 * fx * px * pz / r4
    T[..., 0, 0, 2] = fx * (px * px - pz * pz) / r4
    T[..., 0, 2, 0] = fx * (px * px - pz * pz) / r4
    T[..., 0, 2, 2] = 2.0 * fx * px * pz / r4
    # row 2: J10 = -fy x y Q, J11 = fy r / d^2, J12 = -fy z y Q
    T[..., 1, 0, 0] = -fy * py * Q * (1.0 - px * px * s)
    T[..., 1, 0, 1] = -fy * px * Q * (1.0 - 2.0 * py * py / d2)
    T[..., 1, 0, 2] = fy * px * py * pz * Q * s
    T[..., 1, 1, 0] = fy * px * (d2 - 2.0 * r2) / (r * d4)
    T[..., 1, 1, 1] = -2.0 * fy * r * py / d4
    T[..., 1, 1, 2] = fy * pz * (d2 - 2.0 * r2) / (r * d4)
    T[..., 1, 2, 0] = fy * px * py * pz * Q * s
    T[..., 1, 2, 1] = -fy * pz * Q * (1.0 - 2.0 * py * py / d2)
    T[..., 1, 2, 2] = -fy * py * Q * (1.0 - pz * pz * s)
    return T


def rotation_angle_deg(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in degrees."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def axis_angle_to_quat(axis: np.ndarray, angle: float) -> np.ndarray:
    """w-first unit quaternion for a rotation of `angle` radians about `axis`."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < _EPS_QUAT:
        raise NumericalError("degenerate rotation axis")
    half = 0.5 * angle
    q = np.empty(4)
    q[0] = np.cos(half)
    q[1:] = np.sin(half) * axis / n
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b of w-first quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """w-first unit quaternion of a rotation matrix (largest-pivot branch)."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [
                0.25 * s,
                (R[2, 1] - R[1, 2]) / s,
                (R[0, 2] - R[2, 0]) / s,
                (R[1, 0] - R[0, 1]) / s,
            ]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [
                (R[2, 1] - R[1, 2]) / s,
                0.25 * s,
                (R[0, 1] + R[1, 0]) / s,
                (R[0, 2] + R[2, 0]) / s,
            ]
        )
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [
                (R[0, 2] - R[2, 0]) / s,
                (R[0, 1] + R[1, 0]) / s,
                0.25 * s,
                (R[1, 2] + R[2, 1]) / s,
            ]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [
                (R[1, 0] - R[0, 1]) / s,
                (R[0, 2] + R[2, 0]) / s,
                (R[1, 2] + R[2, 1]) / s,
                0.25 * s,
            ]
        )
    return normalize_quat(q)


def yaw_pose(yaw: float, center: np.ndarray) -> CameraPose:
    """World-to-camera pose of a camera at `center` rotated by `yaw` about
    the world y axis (yaw 0 looks along +z)."""
    c, s = np.cos(yaw), np.sin(yaw)
    R_c2w = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    R = R_c2w.T
    center = np.asarray(center, dtype=np.float64)
    return CameraPose(q=rotmat_to_quat(R), t=-(R @ center))
