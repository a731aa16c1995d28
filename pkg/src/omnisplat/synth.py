"""Self-contained synthetic scene generation.

Every dataset this package trains on is produced here: a ground-truth
Gaussian cloud on a shell around the cameras, equirectangular renders of
it, and optionally captures warped by a known smooth distortion field.
Generation is fully determined by (preset, seed).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import camera_model, geom, raster, scene, sceneio
from .errors import DataError

PRESETS = ("room-small", "ring-tight", "distortion")

_SUPER = 4  # supersampling factor for distorted-capture synthesis


@dataclass
class SyntheticScene:
    preset: str
    seed: int
    cam: geom.SphericalCamera
    cloud: scene.GaussianCloud
    poses: list
    camera_ids: list
    images: list  # quantized to 8-bit levels
    test_poses: list
    test_ids: list
    test_images: list
    depth0: np.ndarray
    distortion_deg: float = 0.0
    D_raw_true: np.ndarray | None = None
    true_dirs: np.ndarray | None = None
    captures: list = field(default_factory=list)

    def init_points(self) -> scene.SceneInit:
        return scene.cloud_to_init(self.cloud)


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _random_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p / (1.0 - p))


def _stored_precision(arr: np.ndarray) -> np.ndarray:
    """Round through the on-disk float32 so the generated cloud is exactly
    what a consumer reads back from the saved assets."""
    return arr.astype(np.float32).astype(np.float64)


def _shell_cloud(
    rng: np.random.Generator,
    n: int,
    r_lo: float,
    r_hi: float,
    s_lo: float,
    s_hi: float,
) -> scene.GaussianCloud:
    """Gaussians on a spherical shell, looking inward from everywhere."""
    positions = _unit_vectors(rng, n) * rng.uniform(r_lo, r_hi, size=(n, 1))
    base = rng.uniform(s_lo, s_hi, size=(n, 1))
    log_scales = np.log(base * rng.uniform(0.7, 1.3, size=(n, 3)))
    rotations = _random_quats(rng, n)
    opacity_logits = _logit(rng.uniform(0.55, 0.95, size=n))
    colors = rng.uniform(0.05, 0.95, size=(n, 3))
    sh = np.zeros((n, 4, 3))
    sh[:, 0, :] = (colors - 0.5) / scene._SH_C0
    sh[:, 1:, :] = rng.normal(0.0, 0.08, size=(n, 3, 3))
    return scene.GaussianCloud(
        positions=_stored_precision(positions),
        log_scales=_stored_precision(log_scales),
        rotations=_stored_precision(rotations),
        opacity_logits=_stored_precision(opacity_logits),
        sh_coeffs=_stored_precision(sh),
    )


def _ring_poses(rng: np.random.Generator, n: int, radius: float) -> list:
    poses = []
    for i in range(n):
        ang = 2.0 * np.pi * i / n
        center = np.array(
            [radius * np.sin(ang), rng.uniform(-0.05, 0.05), radius * np.cos(ang)]
        )
        poses.append(geom.yaw_pose(ang, center))
    return poses


def _disc_poses(rng: np.random.Generator, n: int, radius: float) -> list:
    poses = []
    for _ in range(n):
        r = radius * np.sqrt(rng.uniform())
        ang = rng.uniform(0.0, 2.0 * np.pi)
        center = np.array(
            [r * np.sin(ang), rng.uniform(-0.03, 0.03), r * np.cos(ang)]
        )
        poses.append(geom.yaw_pose(rng.uniform(-0.3, 0.3), center))
    return poses


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5) / 255.0


def _distortion_field(
    cam: geom.SphericalCamera, max_deg: float, seed: int
) -> tuple:
    """Smooth per-pixel distortion with a chosen peak angular displacement.

    Returns (D_raw, true_dirs): the raw field whose tanh is the relative
    per-component perturbation, and the distorted directions it produces.
    The field is tapered toward the poles so the top and bottom rows stay
    undistorted (their pixels carry no horizontal information anyway).
    """
    H, W = cam.height, cam.width
    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    theta = (uu - cam.cx) / cam.fx
    elev = (vv - cam.cy) / cam.fy
    taper = np.cos(elev)
    rng = np.random.default_rng(seed)
    ph = rng.uniform(0.0, 2.0 * np.pi, size=6)
    g = np.stack(
        [
            np.sin(2.0 * theta + ph[0]) * np.cos(elev + ph[1] * 0.1),
            np.cos(theta + ph[2]) * np.sin(2.0 * elev + ph[3] * 0.1),
            np.sin(3.0 * theta + ph[4]) * np.cos(2.0 * elev + ph[5] * 0.1),
        ],
        axis=-1,
    )
    pattern = g * taper[:, :, None]

    S = camera_model.init_grid(cam).S

    def _angles(D):
        Sh = S * (1.0 + D)
        a = Sh / np.linalg.norm(Sh, axis=-1, keepdims=True)
        dot = np.clip(np.sum(a * S, axis=-1), -1.0, 1.0)
        return np.arccos(dot)

    target = np.deg2rad(max_deg)
    amp = 0.02
    for _ in range(3):
        peak = float(np.max(_angles(amp * pattern)))
        if peak <= 0.0:
            raise DataError("degenerate distortion pattern")
        amp *= target / peak
    D_raw = _stored_precision(np.arctanh(amp * pattern))
    D = np.tanh(D_raw)
    return D_raw, S * (1.0 + D)


def _bilerp_displacement(delta: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Bilinear sample of a smooth (H,W,2) field at continuous points
    (...,2); columns wrap, rows clamp."""
    H, W = delta.shape[:2]
    x = np.mod(p[..., 0], W)
    y = np.clip(p[..., 1], 0.0, H - 1.0)
    x0 = np.floor(x)
    tx = (x - x0)[..., None]
    y0 = np.clip(np.floor(y), 0, H - 2) if H > 1 else np.zeros_like(y)
    ty = (y - y0)[..., None]
    x0i = x0.astype(np.int64) % W
    x1i = (x0i + 1) % W
    y0i = y0.astype(np.int64)
    y1i = np.minimum(y0i + 1, H - 1)
    d00 = delta[y0i, x0i]
    d01 = delta[y0i, x1i]
    d10 = delta[y1i, x0i]
    d11 = delta[y1i, x1i]
    top = d00 * (1.0 - tx) + d01 * tx
    bot = d10 * (1.0 - tx) + d11 * tx
    return top * (1.0 - ty) + bot * ty


_REFINE_STEPS = 60


def make_capture(
    ideal_hi: np.ndarray,
    cam: geom.SphericalCamera,
    D_raw: np.ndarray,
    ideal: np.ndarray | None = None,
) -> np.ndarray:
    """Warp a supersampled ideal render into a distorted capture.

    The capture is defined so that resampling it through the true model
    reproduces the ideal image: capture[y] = ideal(p) at the point p
    whose distorted sample coordinate lands on y. p is found by fixed
    point iteration on p = y - delta(p), where delta is the model's
    displacement field at the grid nodes.

    When the 1x ideal render is supplied, the capture is then refined so
    that bicubic resampling at the true model's sample coordinates hits
    that render to solver precision instead of only to interpolation
    accuracy. Displacements stay under half a pixel, so every node is
    the dominant tap of its own resampling stencil and plain Jacobi
    iteration on the residual converges.
    """
    H, W = cam.height, cam.width
    Hh, Wh = ideal_hi.shape[:2]
    if (Hh, Wh) != (H * _SUPER, W * _SUPER):
        raise DataError("ideal_hi must be the %dx supersampled render" % _SUPER)
    grid = camera_model.init_grid(cam)
    grid.D_raw = D_raw.copy()
    _, u_hat = camera_model.project_directions(grid)
    delta = u_hat - grid.u0

    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    y = np.stack([uu, vv], axis=-1)
    p = y.copy()
    for _ in range(8):
        p = y - _bilerp_displacement(delta, p)
    # index-space mapping between resolutions: 1x index i covers hi-res
    # indices 4i..4i+3, so its continuous center is 4i + 1.5
    q = _SUPER * p + (_SUPER - 1) / 2.0
    cap = camera_model._sample_bicubic(ideal_hi, q)
    if ideal is not None:
        for _ in range(_REFINE_STEPS):
            resampled = camera_model._sample_bicubic(cap, u_hat)
            cap -= resampled - ideal
    return np.clip(cap, 0.0, 1.0)


def build_scene(
    preset: str, seed: int = 0, distortion_deg: float | None = None
) -> SyntheticScene:
    if preset not in PRESETS:
        raise DataError("unknown preset '%s' (choose from %s)" % (preset, ", ".join(PRESETS)))
    rng = np.random.default_rng(seed ^ 0x5EED5)
    cam = geom.SphericalCamera(width=256, height=128)

    if preset == "room-small":
        cloud = _shell_cloud(rng, 500, 2.5, 4.0, 0.12, 0.3)
        poses = _ring_poses(rng, 12, 0.5)
        test_poses = [
            geom.yaw_pose(0.7, np.array([0.15, 0.05, -0.1])),
            geom.yaw_pose(3.9, np.array([-0.2, -0.05, 0.15])),
        ]
        if distortion_deg is None:
            distortion_deg = 0.0
    elif preset == "ring-tight":
        cloud = _shell_cloud(rng, 600, 2.0, 3.5, 0.12, 0.3)
        poses = _disc_poses(rng, 12, 0.2)
        test_poses = [
            geom.yaw_pose(0.25, np.array([0.05, 0.01, -0.04])),
            geom.yaw_pose(-0.2, np.array([-0.06, -0.01, 0.05])),
        ]
        if distortion_deg is None:
            distortion_deg = 0.0
    else:
        cloud = _shell_cloud(rng, 800, 2.5, 4.0, 0.12, 0.3)
        poses = _ring_poses(rng, 12, 0.5)
        test_poses = [
            geom.yaw_pose(0.7, np.array([0.15, 0.05, -0.1])),
            geom.yaw_pose(3.9, np.array([-0.2, -0.05, 0.15])),
        ]
        if distortion_deg is None:
            distortion_deg = 0.5

    opts = raster.RenderOptions()
    raw_renders = []
    for pose in poses:
        img, _ = raster.render(cloud, pose, cam, opts)
        raw_renders.append(img)
    images = [_quantize(img) for img in raw_renders]
    test_images = []
    for pose in test_poses:
        img, _ = raster.render(cloud, pose, cam, opts)
        test_images.append(_quantize(img))
    _, aux0 = raster.render(cloud, poses[0], cam, opts)
    depth0 = raster.expected_depth(aux0)

    out = SyntheticScene(
        preset=preset,
        seed=seed,
        cam=cam,
        cloud=cloud,
        poses=poses,
        camera_ids=["cam%02d" % i for i in range(len(poses))],
        images=images,
        test_poses=test_poses,
        test_ids=["test%02d" % i for i in range(len(test_poses))],
        test_images=test_images,
        depth0=depth0,
        distortion_deg=float(distortion_deg),
    )

    if distortion_deg > 0.0:
        D_raw, true_dirs = _distortion_field(cam, distortion_deg, seed ^ 0xD157)
        cam_hi = geom.SphericalCamera(width=cam.width * _SUPER, height=cam.height * _SUPER)
        for pose, ideal in zip(poses, raw_renders):
            hi, _ = raster.render(cloud, pose, cam_hi, opts)
            out.captures.append(_quantize(make_capture(hi, cam, D_raw, ideal=ideal)))
        out.D_raw_true = D_raw
        out.true_dirs = true_dirs
    return out


def _camera_file(
    sc: SyntheticScene, poses: list, ids: list, subdir: str
) -> sceneio.CameraFile:
    records = [
        sceneio.CameraRecord(
            id=rid,
            image_path=os.path.join(subdir, "%s.png" % rid),
            q=pose.q.copy(),
            t=pose.t.copy(),
        )
        for rid, pose in zip(ids, poses)
    ]
    return sceneio.CameraFile(width=sc.cam.width, height=sc.cam.height, records=records)


def write_scene(sc: SyntheticScene, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    sceneio.save_ply(os.path.join(out_dir, "gaussians_gt.ply"), sc.cloud)
    sceneio.save_ply(os.path.join(out_dir, "points_gt.ply"), sc.init_points())
    sceneio.save_cameras(
        os.path.join(out_dir, "cameras_gt.json"),
        _camera_file(sc, sc.poses, sc.camera_ids, "images"),
    )
    sceneio.save_cameras(
        os.path.join(out_dir, "cameras_test.json"),
        _camera_file(sc, sc.test_poses, sc.test_ids, "images_test"),
    )
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    for rid, img in zip(sc.camera_ids, sc.images):
        sceneio.save_png(os.path.join(out_dir, "images", "%s.png" % rid), img)
    os.makedirs(os.path.join(out_dir, "images_test"), exist_ok=True)
    for rid, img in zip(sc.test_ids, sc.test_images):
        sceneio.save_png(os.path.join(out_dir, "images_test", "%s.png" % rid), img)
    np.save(os.path.join(out_dir, "depth0.npy"), sc.depth0)
    if sc.captures:
        sceneio.save_distortion(
            os.path.join(out_dir, "distortion_gt.bin"), sc.D_raw_true, 1.0
        )
        os.makedirs(os.path.join(out_dir, "captures"), exist_ok=True)
        for rid, img in zip(sc.camera_ids, sc.captures):
            sceneio.save_png(os.path.join(out_dir, "captures", "%s.png" % rid), img)
        sceneio.save_cameras(
            os.path.join(out_dir, "cameras_capture.json"),
            _camera_file(sc, sc.poses, sc.camera_ids, "captures"),
        )


def generate(
    preset: str, out_dir: str, seed: int = 0, distortion_deg: float | None = None
) -> SyntheticScene:
    sc = build_scene(preset, seed=seed, distortion_deg=distortion_deg)
    write_scene(sc, out_dir)
    return sc
