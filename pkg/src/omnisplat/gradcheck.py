"""Central finite-difference verification of every analytic gradient.

Scenes are built so that the objective is smooth at the evaluation
point: culling thresholds are disabled, opacities stay below the alpha
clamp, and Gaussian distances are well separated so a parameter nudge
cannot flip the depth order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import camera_model, geom, grad, loss, raster, scene
from .errors import CheckFailure

FD_STEP = 1e-4
MAX_TOL = 1e-3
MEDIAN_TOL = 1e-5

RENDER_BLOCKS = (
    "positions",
    "log_scales",
    "rotations",
    "opacity_logits",
    "sh",
    "pose_q",
    "pose_t",
)


@dataclass
class BlockReport:
    name: str
    n: int
    max_rel: float
    median_rel: float

    def passed(self) -> bool:
        return self.max_rel < MAX_TOL

    def line(self) -> str:
        status = "ok" if self.passed() else "FAIL"
        return "%-16s n=%-4d max=%.3e median=%.3e %s" % (
            self.name,
            self.n,
            self.max_rel,
            self.median_rel,
            status,
        )


@dataclass
class GradcheckReport:
    blocks: list
    rels: np.ndarray

    def passed(self) -> bool:
        if self.rels.size == 0:
            return True
        return (
            float(np.max(self.rels)) < MAX_TOL
            and float(np.median(self.rels)) < MEDIAN_TOL
        )

    def summary(self) -> str:
        lines = [b.line() for b in self.blocks]
        if self.rels.size:
            lines.append(
                "overall          n=%-4d max=%.3e median=%.3e %s"
                % (
                    self.rels.size,
                    float(np.max(self.rels)),
                    float(np.median(self.rels)),
                    "ok" if self.passed() else "FAIL",
                )
            )
        else:
            lines.append("overall          n=0    (no parameters probed) ok")
        return "\n".join(lines)


def _rel_error(a: float, f: float) -> float:
    denom = max(abs(a), abs(f))
    if denom < 1e-8:
        return abs(a - f)
    return abs(a - f) / denom


def build_check_scene(seed: int, n: int = 20, height: int = 32, width: int = 64):
    """Smooth, well-conditioned scene for finite differencing."""
    rng = np.random.default_rng(seed)
    cam = geom.SphericalCamera(width=width, height=height)
    if n > 0:
        dirs = rng.standard_normal((n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radii = np.linspace(1.5, 4.5, n) + rng.uniform(-0.01, 0.01, size=n)
        rng.shuffle(radii)
        positions = dirs * radii[:, None]
        log_scales = np.log(rng.uniform(0.15, 0.35, size=(n, 3)))
        rotations = rng.standard_normal((n, 4))
        rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
        opacity_logits = rng.uniform(-1.0, 2.0, size=n)
        sh = rng.normal(0.0, 0.1, size=(n, 16, 3))
        sh[:, 0, :] = (rng.uniform(0.15, 0.85, size=(n, 3)) - 0.5) / 0.28209479177387814
    else:
        positions = np.zeros((0, 3))
        log_scales = np.zeros((0, 3))
        rotations = np.zeros((0, 4))
        opacity_logits = np.zeros(0)
        sh = np.zeros((0, 16, 3))
    cloud = scene.GaussianCloud(
        positions=positions,
        log_scales=log_scales,
        rotations=rotations,
        opacity_logits=opacity_logits,
        sh_coeffs=sh,
    )
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    pose = geom.CameraPose(q=q, t=rng.uniform(-0.05, 0.05, size=3))
    opts = raster.exact_options()

    uu, vv = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    target = np.stack(
        [
            0.5 + 0.3 * np.sin(2.0 * np.pi * uu / width + c) * np.cos(np.pi * vv / height + 0.7 * c)
            for c in range(3)
        ],
        axis=-1,
    )
    return cloud, pose, cam, opts, target


def _mse(img: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((img - target) ** 2))


def _render_loss(cloud, pose, cam, opts, target) -> float:
    img, _ = raster.render(cloud, pose, cam, opts)
    return _mse(img, target)


def _probe(rng: np.random.Generator, size: int, max_probes: int) -> np.ndarray:
    if size <= max_probes:
        return np.arange(size)
    return rng.choice(size, size=max_probes, replace=False)


def _fd_on_array(arr: np.ndarray, idx_flat: np.ndarray, forward) -> np.ndarray:
    flat = arr.reshape(-1)
    out = np.empty(idx_flat.size)
    for j, i in enumerate(idx_flat):
        orig = flat[i]
        h = FD_STEP * max(1.0, abs(orig))
        flat[i] = orig + h
        lp = forward()
        flat[i] = orig - h
        lm = forward()
        flat[i] = orig
        out[j] = (lp - lm) / (2.0 * h)
    return out


def check_render_blocks(seed: int, n_gaussians: int = 20, height: int = 32, width: int = 64, max_probes: int = 200):
    """FD check of the renderer + pose chain; returns {block: rel array}."""
    cloud, pose, cam, opts, target = build_check_scene(seed, n_gaussians, height, width)
    rng = np.random.default_rng(seed + 1)

    img, aux = raster.render(cloud, pose, cam, opts)
    dL = 2.0 * (img - target) / img.size
    cg, pg = grad.backward(cloud, pose, cam, opts, aux, dL)

    analytic = {
        "positions": cg.d_positions,
        "log_scales": cg.d_log_scales,
        "rotations": cg.d_rotations,
        "opacity_logits": cg.d_opacity_logits,
        "sh": cg.d_sh,
        "pose_q": pg.d_q,
        "pose_t": pg.d_t,
    }
    params = {
        "positions": cloud.positions,
        "log_scales": cloud.log_scales,
        "rotations": cloud.rotations,
        "opacity_logits": cloud.opacity_logits,
        "sh": cloud.sh_coeffs,
        "pose_q": pose.q,
        "pose_t": pose.t,
    }

    def forward():
        return _render_loss(cloud, pose, cam, opts, target)

    rels = {}
    for name in RENDER_BLOCKS:
        arr = params[name]
        idx = _probe(rng, arr.size, max_probes)
        fd = _fd_on_array(arr, idx, forward)
        an = analytic[name].reshape(-1)[idx]
        rels[name] = np.array([_rel_error(a, f) for a, f in zip(an, fd)])
    return rels


def check_distortion_block(seed: int, height: int = 8, width: int = 16, max_probes: int = 60):
    """FD check of the camera-model backward pass on a small grid."""
    rng = np.random.default_rng(seed + 2)
    cam = geom.SphericalCamera(width=width, height=height)
    grid = camera_model.init_grid(cam)
    grid.D_raw = rng.normal(0.0, 0.01, size=(height, width, 3))
    grid.f_t = 1.0 + rng.uniform(-0.02, 0.02)

    uu, vv = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    capture = np.stack(
        [
            0.5 + 0.25 * np.sin(2.0 * np.pi * uu / width + 1.3 * c)
            + 0.1 * np.cos(np.pi * (2.0 * vv + 1.0) / height + 0.5 * c)
            for c in range(3)
        ],
        axis=-1,
    )
    target = np.roll(capture, 1, axis=1) * 0.9 + 0.05

    out, aux = camera_model.undistort(capture, grid)
    dL = 2.0 * (out - target) / out.size
    d_D, d_ft = camera_model.undistort_backward(aux, dL)

    def forward():
        o, _ = camera_model.undistort(capture, grid)
        return _mse(o, target)

    idx = _probe(rng, grid.D_raw.size, max_probes)
    fd = _fd_on_array(grid.D_raw, idx, forward)
    an = d_D.reshape(-1)[idx]
    rels = [_rel_error(a, f) for a, f in zip(an, fd)]

    ft_arr = np.array([grid.f_t])

    def forward_ft():
        grid.f_t = float(ft_arr[0])
        o, _ = camera_model.undistort(capture, grid)
        return _mse(o, target)

    fd_ft = _fd_on_array(ft_arr, np.array([0]), forward_ft)
    grid.f_t = float(ft_arr[0])
    rels.append(_rel_error(float(d_ft), float(fd_ft[0])))
    return {"distortion": np.array(rels)}


def check_loss_blocks(seed: int, height: int = 16, width: int = 32, max_probes: int = 60):
    """FD check of the photometric loss (both images) and the anisotropy term."""
    rng = np.random.default_rng(seed + 3)
    cam = geom.SphericalCamera(width=width, height=height)
    weights = loss.spherical_weights(cam)
    I_r = rng.uniform(0.1, 0.9, size=(height, width, 3))
    I_o = rng.uniform(0.1, 0.9, size=(height, width, 3))
    lam = 0.2

    _, d_r, d_o, _ = loss.wsp_loss_full(I_r, I_o, weights, lam)

    def fwd_r():
        val, _, _, _ = loss.wsp_loss_full(I_r, I_o, weights, lam)
        return val

    rels = {}
    idx = _probe(rng, I_r.size, max_probes)
    fd = _fd_on_array(I_r, idx, fwd_r)
    an = d_r.reshape(-1)[idx]
    rels["loss_render"] = np.array([_rel_error(a, f) for a, f in zip(an, fd)])

    idx = _probe(rng, I_o.size, max_probes)
    fd = _fd_on_array(I_o, idx, fwd_r)
    an = d_o.reshape(-1)[idx]
    rels["loss_observed"] = np.array([_rel_error(a, f) for a, f in zip(an, fd)])

    # anisotropy: keep per-Gaussian axis gaps wide so the argmax/argmin
    # pair is stable under the FD step
    ls = np.sort(rng.uniform(-1.5, 1.5, size=(12, 3)), axis=1)
    ls += np.array([0.0, 0.3, 1.8])
    gamma = 2.0
    _, d_ls = loss.aniso_loss(ls, gamma)

    def fwd_a():
        val, _ = loss.aniso_loss(ls, gamma)
        return val

    idx = _probe(rng, ls.size, max_probes)
    fd = _fd_on_array(ls, idx, fwd_a)
    an = d_ls.reshape(-1)[idx]
    rels["loss_aniso"] = np.array([_rel_error(a, f) for a, f in zip(an, fd)])
    return rels


def run_gradcheck(
    seed: int,
    n_gaussians: int = 20,
    height: int = 32,
    width: int = 64,
    max_probes: int = 200,
) -> GradcheckReport:
    rels = {}
    rels.update(check_render_blocks(seed, n_gaussians, height, width, max_probes))
    rels.update(check_distortion_block(seed))
    rels.update(check_loss_blocks(seed))
    blocks = []
    for name, arr in rels.items():
        if arr.size:
            blocks.append(
                BlockReport(
                    name=name,
                    n=int(arr.size),
                    max_rel=float(np.max(arr)),
                    median_rel=float(np.median(arr)),
                )
            )
        else:
            blocks.append(BlockReport(name=name, n=0, max_rel=0.0, median_rel=0.0))
    pooled = (
        np.concatenate([a for a in rels.values() if a.size])
        if any(a.size for a in rels.values())
        else np.zeros(0)
    )
    return GradcheckReport(blocks=blocks, rels=pooled)


def require_pass(report: GradcheckReport) -> None:
    if not report.passed():
        raise CheckFailure("gradient check failed:\n" + report.summary())
