"""Generic differentiable omnidirectional camera model.

A frozen unit-direction grid S covers every pixel; trainable per-pixel
coefficients perturb those directions as Theta = S*f_t + S.*tanh(D_raw),
and the input image is resampled at the reprojection of Theta. With
D_raw = 0 and f_t = 1 the model is the identity: the resample lands
exactly on pixel centers and bicubic interpolation reproduces the input
bit for bit. Undistortion runs on input images only; rendering always
uses the ideal spherical model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom
from .errors import DataError, NumericalError

_DEGENERATE_NORM = 1e-9


@dataclass
class DistortionGrid:
    """Frozen directions S plus trainable distortion state.

    phi0 caches the floating-point projection of S so the sample
    coordinate can be formed as u0 + (phi(S_hat) - phi(S)): the
    difference is exactly zero at initialization, which makes the
    identity property bitwise rather than merely within rounding.
    """

    cam: geom.SphericalCamera
    S: np.ndarray  # (H, W, 3) unit directions, frozen
    D_raw: np.ndarray  # (H, W, 3) trainable pre-activations
    f_t: float = 1.0
    u0: np.ndarray = field(default=None)  # (H, W, 2) integer pixel coords
    phi0: np.ndarray = field(default=None)  # (H, W, 2) cached phi(S)

    @property
    def shape(self) -> tuple:
        return self.S.shape[:2]

    def copy(self) -> "DistortionGrid":
        return DistortionGrid(
            self.cam,
            self.S,
            self.D_raw.copy(),
            self.f_t,
            self.u0,
            self.phi0,
        )


@dataclass
class UndistortAux:
    """Intermediates reused by the backward pass."""

    grid: DistortionGrid
    image: np.ndarray
    S_hat: np.ndarray
    u_hat: np.ndarray  # (H, W, 2) sample coordinates, index convention
    raw: np.ndarray  # pre-clamp sampled values


def init_grid(cam: geom.SphericalCamera) -> DistortionGrid:
    """Build the identity model: S[v][u] = unprojected direction of (u, v)."""
    H, W = cam.height, cam.width
    uu, vv = np.meshgrid(
        np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64)
    )
    uv = np.stack([uu, vv], axis=-1)
    S = geom.unproject_equirect(cam, uv.reshape(-1, 2)).reshape(H, W, 3)
    phi0 = geom.project_equirect(cam, S.reshape(-1, 3)).reshape(H, W, 2)
    return DistortionGrid(
        cam=cam,
        S=S,
        D_raw=np.zeros((H, W, 3)),
        f_t=1.0,
        u0=uv,
        phi0=phi0,
    )


def _catmull_rom_weights(t: np.ndarray) -> np.ndarray:
    """Weights for taps at offsets (-1, 0, 1, 2); exactly (0,1,0,0) at t=0."""
    t2 = t * t
    t3 = t2 * t
    w0 = 0.5 * (-t3 + 2.0 * t2 - t)
    w1 = 0.5 * (3.0 * t3 - 5.0 * t2 + 2.0)
    w2 = 0.5 * (-3.0 * t3 + 4.0 * t2 + t)
    w3 = 0.5 * (t3 - t2)
    return np.stack([w0, w1, w2, w3], axis=-1)


def _catmull_rom_dweights(t: np.ndarray) -> np.ndarray:
    t2 = t * t
    w0 = 0.5 * (-3.0 * t2 + 4.0 * t - 1.0)
    w1 = 0.5 * (9.0 * t2 - 10.0 * t)
    w2 = 0.5 * (-9.0 * t2 + 8.0 * t + 1.0)
    w3 = 0.5 * (3.0 * t2 - 2.0 * t)
    return np.stack([w0, w1, w2, w3], axis=-1)


def _tap_indices(u_hat: np.ndarray, H: int, W: int):
    """Integer taps and fractional offsets; wrap columns, clamp rows."""
    x = u_hat[..., 0]
    y = u_hat[..., 1]
    ix = np.floor(x)
    iy = np.floor(y)
    tx = x - ix
    ty = y - iy
    offs = np.arange(-1, 3)
    cols = (ix[..., None].astype(np.int64) + offs) % W
    rows = np.clip(iy[..., None].astype(np.int64) + offs, 0, H - 1)
    return rows, cols, tx, ty


def _sample_bicubic(image: np.ndarray, u_hat: np.ndarray) -> np.ndarray:
    H, W = image.shape[:2]
    rows, cols, tx, ty = _tap_indices(u_hat, H, W)
    wx = _catmull_rom_weights(tx)
    wy = _catmull_rom_weights(ty)
    taps = image[rows[..., :, None], cols[..., None, :]]  # (H, W, 4, 4, 3)
    return np.einsum("hwi,hwj,hwijc->hwc", wy, wx, taps)


def project_directions(grid: DistortionGrid) -> tuple:
    """Distorted directions and their sample coordinates."""
    H, W = grid.shape
    Wf = float(grid.cam.width)
    S_hat = grid.S * grid.f_t + grid.S * np.tanh(grid.D_raw)
    norms = np.sqrt(np.sum(S_hat * S_hat, axis=-1))
    if np.any(norms < _DEGENERATE_NORM):
        raise NumericalError("degenerate distortion: near-zero direction")
    phi = geom.project_equirect(grid.cam, S_hat.reshape(-1, 3)).reshape(H, W, 2)
    du = np.mod(phi[..., 0] - grid.phi0[..., 0] + Wf / 2.0, Wf) - Wf / 2.0
    dv = phi[..., 1] - grid.phi0[..., 1]
    u_hat = np.empty((H, W, 2))
    u_hat[..., 0] = grid.u0[..., 0] + du
    u_hat[..., 1] = grid.u0[..., 1] + dv
    return S_hat, u_hat


def undistort(image: np.ndarray, grid: DistortionGrid) -> tuple:
    """Resample image through the distortion model; returns (I, aux)."""
    H, W = grid.shape
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (H, W, 3):
        raise DataError(
            "image shape %s does not match grid %dx%d" % (image.shape, H, W)
        )
    S_hat, u_hat = project_directions(grid)
    raw = _sample_bicubic(image, u_hat)
    out = np.clip(raw, 0.0, 1.0)
    return out, UndistortAux(grid=grid, image=image, S_hat=S_hat, u_hat=u_hat, raw=raw)


def undistort_backward(aux: UndistortAux, dL_dout: np.ndarray) -> tuple:
    """Gradients (d_D_raw, d_f_t) of the undistorted image.

    Every output pixel depends only on its own grid entry, so the whole
    backward pass is local gathers: spatial image derivative at the
    sample point, then the projection Jacobian at S_hat, then the
    Hadamard/tanh factors.
    """
    grid = aux.grid
    H, W = grid.shape
    dL_dout = np.asarray(dL_dout, dtype=np.float64)
    if dL_dout.shape != (H, W, 3):
        raise DataError("gradient shape %s does not match grid" % (dL_dout.shape,))

    # clamp to [0,1]: gradient passes only where the clamp is inactive
    inside = (aux.raw >= 0.0) & (aux.raw <= 1.0)
    g = np.where(inside, dL_dout, 0.0)

    rows, cols, tx, ty = _tap_indices(aux.u_hat, H, W)
    wx = _catmull_rom_weights(tx)
    wy = _catmull_rom_weights(ty)
    dwx = _catmull_rom_dweights(tx)
    dwy = _catmull_rom_dweights(ty)
    taps = aux.image[rows[..., :, None], cols[..., None, :]]
    dI_dx = np.einsum("hwi,hwj,hwijc->hwc", wy, dwx, taps)
    dI_dy = np.einsum("hwi,hwj,hwijc->hwc", dwy, wx, taps)
    dL_du = np.stack(
        [np.sum(g * dI_dx, axis=-1), np.sum(g * dI_dy, axis=-1)], axis=-1
    )

    J = geom.projection_jacobian(
        grid.cam, aux.S_hat.reshape(-1, 3), on_polar="exact"
    ).reshape(H, W, 2, 3)
    dL_dShat = np.einsum("hwij,hwi->hwj", J, dL_du)

    th = np.tanh(grid.D_raw)
    d_D_raw = dL_dShat * grid.S * (1.0 - th * th)
    d_f_t = float(np.sum(dL_dShat * grid.S))
    return d_D_raw, d_f_t


def angular_errors(grid: DistortionGrid, true_dirs: np.ndarray) -> np.ndarray:
    """Per-pixel angle (radians) between the model's effective directions
    and reference directions of the same shape."""
    S_hat, _ = project_directions(grid)
    a = S_hat / np.linalg.norm(S_hat, axis=-1, keepdims=True)
    b = true_dirs / np.linalg.norm(true_dirs, axis=-1, keepdims=True)
    dot = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.arccos(dot)
