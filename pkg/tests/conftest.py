"""Shared fixtures for the test suite."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pytest

from omnisplat import geom, raster, scene


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid the way the PNG writer does."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5) / 255.0


def make_cloud(rng: np.random.Generator, n: int = 20, sh_bands: int = 4) -> scene.GaussianCloud:
    """Random well-conditioned cloud on a shell around the origin."""
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    positions = dirs * rng.uniform(1.5, 2.5, size=(n, 1))
    log_scales = np.log(rng.uniform(0.18, 0.3, size=(n, 3)))
    rotations = rng.standard_normal((n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    opacity_logits = rng.uniform(0.5, 2.0, size=n)
    sh = np.zeros((n, sh_bands, 3))
    sh[:, 0, :] = (rng.uniform(0.15, 0.85, size=(n, 3)) - 0.5) / scene._SH_C0
    if sh_bands > 1:
        sh[:, 1:, :] = rng.normal(0.0, 0.05, size=(n, sh_bands - 1, 3))
    return scene.GaussianCloud(
        positions=positions,
        log_scales=log_scales,
        rotations=rotations,
        opacity_logits=opacity_logits,
        sh_coeffs=sh,
    )


@dataclass
class TinyScene:
    cam: geom.SphericalCamera
    cloud: scene.GaussianCloud
    poses: list
    images: list = field(default_factory=list)


def build_tiny_scene(seed: int = 77, n: int = 20, n_views: int = 4) -> TinyScene:
    rng = np.random.default_rng(seed)
    cam = geom.SphericalCamera(width=64, height=32)
    cloud = make_cloud(rng, n=n)
    poses = []
    for i in range(n_views):
        ang = 2.0 * np.pi * i / n_views
        center = np.array([0.3 * np.sin(ang), 0.0, 0.3 * np.cos(ang)])
        poses.append(geom.yaw_pose(ang, center))
    ts = TinyScene(cam=cam, cloud=cloud, poses=poses)
    for p in poses:
        img, _ = raster.render(cloud, p, cam, raster.RenderOptions())
        ts.images.append(quantize(img))
    return ts


@pytest.fixture(scope="session")
def tiny_scene() -> TinyScene:
    """20 gaussians on a shell, 4 ring cameras, 32x64 quantized targets."""
    return build_tiny_scene()
