"""Tests for the trainable spherical distortion model."""

from __future__ import annotations

import numpy as np
import pytest

from omnisplat import camera_model as cm
from omnisplat import geom
from omnisplat.errors import DataError, NumericalError


def _cam(width: int = 16, height: int = 8) -> geom.SphericalCamera:
    return geom.SphericalCamera(width=width, height=height)


def _smooth_image(cam: geom.SphericalCamera, lo: float = 0.3, hi: float = 0.7) -> np.ndarray:
    """Band-limited image well inside [0, 1] so bicubic overshoot never clamps."""
    H, W = cam.height, cam.width
    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    mid = 0.5 * (lo + hi)
    amp = 0.5 * (hi - lo)
    img = np.empty((H, W, 3))
    img[..., 0] = mid + amp * np.sin(2.0 * np.pi * uu / W) * np.cos(np.pi * vv / H)
    img[..., 1] = mid + amp * np.cos(2.0 * np.pi * uu / W + 0.7) * np.sin(np.pi * (vv + 0.5) / H)
    img[..., 2] = mid + amp * np.sin(4.0 * np.pi * uu / W + 1.3) * 0.5
    return img


def test_init_grid_unit_directions():
    cam = _cam(32, 16)
    grid = cm.init_grid(cam)
    assert grid.shape == (16, 32)
    norms = np.linalg.norm(grid.S, axis=-1)
    assert np.max(np.abs(norms - 1.0)) < 1e-12
    assert np.array_equal(grid.D_raw, np.zeros((16, 32, 3)))
    assert grid.f_t == 1.0
    # u0 holds the integer pixel lattice
    assert np.array_equal(grid.u0[..., 0], np.tile(np.arange(32.0), (16, 1)))
    assert np.array_equal(grid.u0[..., 1], np.tile(np.arange(16.0)[:, None], (1, 32)))


def test_identity_sample_coords_bitwise():
    grid = cm.init_grid(_cam(64, 32))
    _, u_hat = cm.project_directions(grid)
    assert np.array_equal(u_hat, grid.u0)


def test_identity_undistort_bitwise():
    rng = np.random.default_rng(5)
    cam = _cam(32, 16)
    grid = cm.init_grid(cam)
    image = rng.uniform(0.0, 1.0, size=(16, 32, 3))
    out, aux = cm.undistort(image, grid)
    assert np.array_equal(out, image)
    assert np.array_equal(aux.raw, image)


def test_undistort_shape_mismatch():
    grid = cm.init_grid(_cam(16, 8))
    with pytest.raises(DataError):
        cm.undistort(np.zeros((8, 15, 3)), grid)
    img = np.zeros((8, 16, 3))
    _, aux = cm.undistort(img, grid)
    with pytest.raises(DataError):
        cm.undistort_backward(aux, np.zeros((8, 16)))


def test_grid_copy_is_independent():
    grid = cm.init_grid(_cam(16, 8))
    dup = grid.copy()
    dup.D_raw += 1.0
    dup.f_t = 2.0
    assert np.array_equal(grid.D_raw, np.zeros((8, 16, 3)))
    assert grid.f_t == 1.0


def test_bicubic_reproduces_linear_ramp():
    # Catmull-Rom interpolation is exact on linear data, so sampling a
    # row-linear image at half-integer rows must return the midpoint value
    # wherever all four row taps stay in range.
    H, W = 12, 24
    vv = np.arange(H, dtype=np.float64)[:, None, None]
    image = np.broadcast_to(0.1 + 0.05 * vv, (H, W, 3)).copy()
    uu, vg = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    u_hat = np.stack([uu, vg + 0.5], axis=-1)
    out = cm._sample_bicubic(image, u_hat)
    expect = 0.1 + 0.05 * (vg + 0.5)
    interior = slice(2, H - 3)
    diff = np.abs(out[interior, :, 0] - expect[interior, :])
    assert np.max(diff) < 1e-12


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    cam = _cam(16, 8)
    H, W = cam.height, cam.width
    image = _smooth_image(cam)
    grid = cm.init_grid(cam)
    grid.D_raw = 0.01 * rng.standard_normal((H, W, 3))
    grid.f_t = 1.02

    # polar rows sit on the projection singularity where finite differences
    # cannot track the analytic derivative, so they carry zero loss weight
    w = rng.uniform(0.5, 1.0, size=(H, W, 3))
    w[0] = 0.0
    w[-1] = 0.0

    out, aux = cm.undistort(image, grid)
    assert np.all((aux.raw > 0.05) & (aux.raw < 0.95))
    d_D, d_ft = cm.undistort_backward(aux, w)

    def loss(g: cm.DistortionGrid) -> float:
        o, _ = cm.undistort(image, g)
        return float(np.sum(w * o))

    h = 1e-5
    worst = 0.0
    for i in range(H):
        for j in range(W):
            for c in range(3):
                gp = grid.copy()
                gp.D_raw[i, j, c] += h
                gm = grid.copy()
                gm.D_raw[i, j, c] -= h
                fd = (loss(gp) - loss(gm)) / (2.0 * h)
                err = abs(fd - d_D[i, j, c]) / (1e-8 + abs(fd) + abs(d_D[i, j, c]))
                worst = max(worst, err)
    assert worst < 1e-3

    gp = grid.copy()
    gp.f_t += h
    gm = grid.copy()
    gm.f_t -= h
    fd_ft = (loss(gp) - loss(gm)) / (2.0 * h)
    assert abs(fd_ft - d_ft) / (1e-8 + abs(fd_ft)) < 1e-3


def test_radial_perturbation_is_null():
    # scaling a direction never moves its projection, so the gradient has no
    # radial component: the per-pixel sum of d_D_raw vanishes at D_raw = 0
    rng = np.random.default_rng(23)
    cam = _cam(32, 16)
    image = _smooth_image(cam)
    grid = cm.init_grid(cam)
    upstream = rng.uniform(0.2, 1.0, size=(16, 32, 3))
    _, aux = cm.undistort(image, grid)
    d_D, _ = cm.undistort_backward(aux, upstream)
    radial = np.sum(d_D, axis=-1)
    mag = np.sum(np.abs(d_D), axis=-1)
    assert np.all(np.abs(radial) <= 1e-9 + 1e-6 * mag)

    # finite-difference confirmation: a uniform push on all three channels
    # rescales every direction and leaves the resampled image unchanged
    h = 1e-4
    gp = grid.copy()
    gp.D_raw += h
    gm = grid.copy()
    gm.D_raw -= h
    op, _ = cm.undistort(image, gp)
    om, _ = cm.undistort(image, gm)
    fd = float(np.sum(upstream * (op - om)) / (2.0 * h))
    assert abs(fd) < 1e-6


def test_degenerate_direction_raises():
    grid = cm.init_grid(_cam(16, 8))
    grid.D_raw[:] = -20.0
    with pytest.raises(NumericalError):
        cm.project_directions(grid)
    with pytest.raises(NumericalError):
        cm.undistort(np.zeros((8, 16, 3)), grid)


def test_clamped_pixels_block_gradient():
    # a hard step plus a sub-pixel sampling shift makes bicubic overshoot;
    # clamped outputs must contribute nothing to the parameter gradients
    rng = np.random.default_rng(7)
    cam = _cam(32, 16)
    H, W = cam.height, cam.width
    image = np.zeros((H, W, 3))
    image[:, 8:16, :] = 1.0
    grid = cm.init_grid(cam)
    grid.D_raw = 0.05 * rng.standard_normal((H, W, 3))
    out, aux = cm.undistort(image, grid)
    over = (aux.raw > 1.0) | (aux.raw < 0.0)
    assert np.any(over)
    assert np.all(out >= 0.0) and np.all(out <= 1.0)

    i, j, c = [int(a[0]) for a in np.nonzero(over)]
    upstream = np.zeros((H, W, 3))
    upstream[i, j, c] = 1.0
    d_D, d_ft = cm.undistort_backward(aux, upstream)
    assert np.array_equal(d_D, np.zeros_like(d_D))
    assert d_ft == 0.0


def test_gradient_is_per_pixel_local():
    # each output pixel owns exactly one grid entry
    rng = np.random.default_rng(9)
    cam = _cam(32, 16)
    image = _smooth_image(cam)
    grid = cm.init_grid(cam)
    grid.D_raw = 0.02 * rng.standard_normal((16, 32, 3))
    _, aux = cm.undistort(image, grid)
    upstream = np.zeros((16, 32, 3))
    upstream[5, 11, :] = 1.0
    d_D, _ = cm.undistort_backward(aux, upstream)
    mask = np.ones((16, 32), dtype=bool)
    mask[5, 11] = False
    assert np.all(d_D[mask] == 0.0)
    assert np.any(d_D[5, 11] != 0.0)


def test_angular_errors_identity_and_known_angle():
    cam = _cam(32, 16)
    grid = cm.init_grid(cam)
    errs = cm.angular_errors(grid, grid.S)
    assert errs.shape == (16, 32)
    assert np.max(errs) < 1e-6

    # tilt every direction by exactly theta inside its own tangent plane
    rng = np.random.default_rng(3)
    helper = rng.standard_normal((16, 32, 3))
    perp = helper - np.sum(helper * grid.S, axis=-1, keepdims=True) * grid.S
    perp /= np.linalg.norm(perp, axis=-1, keepdims=True)
    theta = np.deg2rad(1.0)
    tilted = np.cos(theta) * grid.S + np.sin(theta) * perp
    errs = cm.angular_errors(grid, tilted)
    assert np.max(np.abs(errs - theta)) < 1e-9
    # magnitude of the reference directions must not matter
    errs2 = cm.angular_errors(grid, 2.5 * tilted)
    assert np.max(np.abs(errs2 - theta)) < 1e-9
