"""Joint optimization of Gaussians, camera poses, and the camera model.

One training image per iteration, drawn by seeded epoch shuffle. Adam
everywhere; pose blocks keep per-camera step counters so each camera's
learning rate follows its own 100-step exponential decay. Densify,
prune, opacity reset, and point re-initialization run on their
schedules. The whole loop is deterministic per (config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import camera_model, geom, grad, loss, raster, scene
from .errors import DataError, NumericalError

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-15


@dataclass
class TrainConfig:
    total_iters: int = 30000
    lam: float = 0.2
    gamma: float = 10.0
    sh_degree: int = 3
    sh_upgrade_interval: int = 1000

    lr_position: float = 1.6e-4
    lr_position_end: float = 1.6e-6
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 1.25e-4
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3

    lr_q0: float = 0.01
    lr_q_end: float = 1.6e-4
    lr_t0: float = 0.01
    lr_t0_from_scratch: float = 0.1
    lr_t_end: float = 6e-3
    lr_decay_steps: int = 100
    global_pose_steps: bool = False

    lr_distortion: float = 1e-4

    optimize_poses: bool = True
    optimize_camera_model: bool = False
    optimize_focal: bool = False
    from_scratch: bool = False
    uniform_weights: bool = False

    reinit_iters: tuple = (2000, 4000)

    densify_enabled: bool = True
    densify_start: int = 500
    densify_end: int = 15000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    densify_percent_dense: float = 0.01
    prune_opacity: float = 0.005
    opacity_reset_interval: int = 3000
    split_factor: float = 1.6

    background: tuple = (0.0, 0.0, 0.0)
    snapshot_interval: int = 5000
    seed: int = 0

    def __post_init__(self):
        for name in (
            "lr_position",
            "lr_sh_dc",
            "lr_sh_rest",
            "lr_opacity",
            "lr_scale",
            "lr_rotation",
            "lr_q0",
            "lr_t0",
            "lr_distortion",
        ):
            if getattr(self, name) <= 0:
                raise DataError("TrainConfig.%s must be positive" % name)
        if any(r >= self.total_iters for r in self.reinit_iters) and self.total_iters > 0:
            raise DataError("reinit_iters must lie before total_iters")


@dataclass
class AdamBlock:
    m: np.ndarray
    v: np.ndarray
    t: np.ndarray  # scalar array, or per-camera counts for pose blocks

    @staticmethod
    def like(param: np.ndarray, per_row: bool = False) -> "AdamBlock":
        t = np.zeros(param.shape[0] if per_row else (), dtype=np.int64)
        return AdamBlock(np.zeros_like(param), np.zeros_like(param), t)


def lr_schedule(k: int, lr0: float, lr_end: float, K: int) -> float:
    """lr(k) = lr0 * (lr_end/lr0)^(min(k, K)/K); flat at lr_end beyond K."""
    frac = min(k, K) / K
    return lr0 * (lr_end / lr0) ** frac


def adam_step(param: np.ndarray, g: np.ndarray, blk: AdamBlock, lr) -> None:
    """Bias-corrected Adam update, in place."""
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite gradient in Adam step")
    blk.t += 1
    t = int(blk.t)
    blk.m += (1.0 - ADAM_B1) * (g - blk.m)
    blk.v += (1.0 - ADAM_B2) * (g * g - blk.v)
    mhat = blk.m / (1.0 - ADAM_B1**t)
    vhat = blk.v / (1.0 - ADAM_B2**t)
    param -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def adam_step_row(param: np.ndarray, g: np.ndarray, blk: AdamBlock, lr: float, row: int) -> None:
    """Adam update for one row of a per-camera block, with that row's count."""
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite gradient in Adam step")
    blk.t[row] += 1
    t = int(blk.t[row])
    blk.m[row] += (1.0 - ADAM_B1) * (g - blk.m[row])
    blk.v[row] += (1.0 - ADAM_B2) * (g * g - blk.v[row])
    mhat = blk.m[row] / (1.0 - ADAM_B1**t)
    vhat = blk.v[row] / (1.0 - ADAM_B2**t)
    param[row] -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


_CLOUD_BLOCKS = ("positions", "log_scales", "rotations", "opacity_logits", "sh")


@dataclass
class TrainState:
    """Everything a resumed run needs to continue bitwise-equivalently."""

    cloud: scene.GaussianCloud
    qs: np.ndarray  # (C, 4) pose quaternions
    ts: np.ndarray  # (C, 3) pose translations
    grid: camera_model.DistortionGrid | None
    adam: dict
    stats: grad.DensifyStats
    iteration: int
    rng: np.random.Generator
    epoch_order: np.ndarray
    epoch_pos: int
    scene_extent: float
    log: list = field(default_factory=list)

    def pose(self, i: int) -> geom.CameraPose:
        return geom.CameraPose(q=self.qs[i].copy(), t=self.ts[i].copy())

    def poses(self) -> list:
        return [self.pose(i) for i in range(self.qs.shape[0])]


def _cloud_adam(cloud: scene.GaussianCloud) -> dict:
    return {
        "positions": AdamBlock.like(cloud.positions),
        "log_scales": AdamBlock.like(cloud.log_scales),
        "rotations": AdamBlock.like(cloud.rotations),
        "opacity_logits": AdamBlock.like(cloud.opacity_logits),
        "sh": AdamBlock.like(cloud.sh_coeffs),
    }


def init_train_state(
    init,
    cameras: list,
    cam: geom.SphericalCamera,
    cfg: TrainConfig,
) -> TrainState:
    if isinstance(init, scene.GaussianCloud):
        cloud = init.copy()
    else:
        cloud = scene.init_from_points(init, sh_degree=cfg.sh_degree)
    if not cameras:
        raise DataError("training needs at least one camera")
    if cfg.from_scratch:
        poses = [geom.identity_pose() for _ in cameras]
    else:
        poses = [p.copy() for p in cameras]
    qs = np.stack([p.q for p in poses]).astype(np.float64)
    ts = np.stack([p.t for p in poses]).astype(np.float64)

    grid = camera_model.init_grid(cam) if cfg.optimize_camera_model else None

    adam = _cloud_adam(cloud)
    adam["pose_q"] = AdamBlock.like(qs, per_row=True)
    adam["pose_t"] = AdamBlock.like(ts, per_row=True)
    if grid is not None:
        adam["dist"] = AdamBlock.like(grid.D_raw)
        adam["f_t"] = AdamBlock(np.zeros(()), np.zeros(()), np.zeros((), dtype=np.int64))

    centroid = cloud.positions.mean(axis=0)
    extent = float(np.max(np.linalg.norm(cloud.positions - centroid, axis=1)))
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(cameras))
    return TrainState(
        cloud=cloud,
        qs=qs,
        ts=ts,
        grid=grid,
        adam=adam,
        stats=grad.DensifyStats.zeros(cloud.n),
        iteration=0,
        rng=rng,
        epoch_order=order,
        epoch_pos=0,
        scene_extent=max(extent, 1e-6),
    )


def _next_camera(state: TrainState) -> int:
    if state.epoch_pos >= state.epoch_order.size:
        state.epoch_order = state.rng.permutation(state.epoch_order.size)
        state.epoch_pos = 0
    idx = int(state.epoch_order[state.epoch_pos])
    state.epoch_pos += 1
    return idx


def _edit_rows(adam: dict, keep: np.ndarray, n_new: int) -> None:
    """Drop pruned rows and append zeroed rows across all cloud blocks."""
    for name in _CLOUD_BLOCKS:
        blk = adam[name]
        kept_m = blk.m[keep]
        kept_v = blk.v[keep]
        pad = (n_new,) + kept_m.shape[1:]
        blk.m = np.concatenate([kept_m, np.zeros(pad)], axis=0)
        blk.v = np.concatenate([kept_v, np.zeros(pad)], axis=0)


def densify_and_prune(
    cloud: scene.GaussianCloud,
    stats: grad.DensifyStats,
    cfg: TrainConfig,
    scene_extent: float,
    adam: dict,
    rng: np.random.Generator,
) -> scene.GaussianCloud:
    """Clone small / split large high-gradient Gaussians, prune faint ones.

    Adam moment rows follow the edits: survivors keep theirs, new rows
    start at zero. Stats are reset afterward.
    """
    means = stats.means()
    hot = (means > cfg.densify_grad_threshold) & (stats.counts > 0)
    max_scale = np.exp(cloud.log_scales).max(axis=1)
    large = max_scale > cfg.densify_percent_dense * scene_extent
    split = hot & large
    clone = hot & ~large

    sigma = 1.0 / (1.0 + np.exp(-cloud.opacity_logits))
    keep = ~split & (sigma >= cfg.prune_opacity)
    if not np.any(keep) and not np.any(split) and not np.any(clone):
        raise NumericalError("densify/prune would empty the cloud")

    parts_pos = [cloud.positions[keep]]
    parts_ls = [cloud.log_scales[keep]]
    parts_rot = [cloud.rotations[keep]]
    parts_op = [cloud.opacity_logits[keep]]
    parts_sh = [cloud.sh_coeffs[keep]]

    n_new = 0
    if np.any(clone):
        parts_pos.append(cloud.positions[clone])
        parts_ls.append(cloud.log_scales[clone])
        parts_rot.append(cloud.rotations[clone])
        parts_op.append(cloud.opacity_logits[clone])
        parts_sh.append(cloud.sh_coeffs[clone])
        n_new += int(np.sum(clone))
    if np.any(split):
        sidx = np.nonzero(split)[0]
        Rg = geom.quat_to_rotmat(cloud.rotations[sidx])
        scales = np.exp(cloud.log_scales[sidx])
        for _ in range(2):
            # children sampled within the parent ellipsoid
            local = rng.standard_normal((sidx.size, 3)) * scales
            pos = cloud.positions[sidx] + np.einsum("nij,nj->ni", Rg, local)
            parts_pos.append(pos)
            parts_ls.append(np.log(scales / cfg.split_factor))
            parts_rot.append(cloud.rotations[sidx])
            parts_op.append(cloud.opacity_logits[sidx])
            parts_sh.append(cloud.sh_coeffs[sidx])
        n_new += 2 * sidx.size

    out = scene.GaussianCloud(
        positions=np.concatenate(parts_pos, axis=0),
        log_scales=np.concatenate(parts_ls, axis=0),
        rotations=np.concatenate(parts_rot, axis=0),
        opacity_logits=np.concatenate(parts_op, axis=0),
        sh_coeffs=np.concatenate(parts_sh, axis=0),
    )
    if out.n == 0:
        raise NumericalError("densify/prune would empty the cloud")
    _edit_rows(adam, keep, n_new)
    stats.norm_sum = np.zeros(out.n)
    stats.counts = np.zeros(out.n, dtype=np.int64)
    return out


def reset_opacity(cloud: scene.GaussianCloud, adam: dict, ceiling: float = 0.01) -> None:
    """Clamp all opacities down to the ceiling; opacity moments restart."""
    cap = math.log(ceiling / (1.0 - ceiling))
    np.minimum(cloud.opacity_logits, cap, out=cloud.opacity_logits)
    blk = adam["opacity_logits"]
    blk.m[:] = 0.0
    blk.v[:] = 0.0


def reinit_gaussians(
    state: TrainState, init: scene.SceneInit, cfg: TrainConfig
) -> None:
    """Replace the cloud from the initial points; poses and grid stay."""
    state.cloud = scene.init_from_points(init, sh_degree=cfg.sh_degree)
    for name in _CLOUD_BLOCKS:
        state.adam[name] = AdamBlock.like(getattr_block(state.cloud, name))
    state.stats = grad.DensifyStats.zeros(state.cloud.n)


def getattr_block(cloud: scene.GaussianCloud, name: str) -> np.ndarray:
    if name == "sh":
        return cloud.sh_coeffs
    return getattr(cloud, name)


def compute_scene_radius(poses: list) -> float:
    centers = np.stack([geom.camera_center(p) for p in poses])
    centroid = centers.mean(axis=0)
    return float(np.max(np.linalg.norm(centers - centroid, axis=1)))


def perturb_cameras(
    poses: list,
    scene_radius: float,
    T_scale: float = 0.5,
    R_scale: float = 0.5,
    seed: int = 0,
) -> list:
    """Add seeded noise: t moves by alpha*T_scale/scene_radius per axis
    (alpha uniform in [-1,1)); R composes with a rotation about a random
    normal-distributed axis by eta*R_scale, eta uniform in [-1 deg, 1 deg).
    Draw order per camera: translation alphas, axis, angle."""
    if scene_radius <= 0:
        raise DataError("scene_radius must be positive")
    rng = np.random.default_rng(seed)
    out = []
    for p in poses:
        alpha = rng.uniform(-1.0, 1.0, 3)
        axis = rng.standard_normal(3)
        eta = rng.uniform(-1.0, 1.0) * math.pi / 180.0
        t_new = p.t + alpha * (T_scale / scene_radius)
        if R_scale == 0.0 or np.linalg.norm(axis) == 0.0:
            q_new = p.q.copy()
        else:
            q_noise = geom.axis_angle_to_quat(axis, eta * R_scale)
            q_new = geom.quat_multiply(p.q, q_noise)
        out.append(geom.CameraPose(q=geom.normalize_quat(q_new), t=t_new))
    return out


def _active_sh_degree(it: int, cfg: TrainConfig, cloud_degree: int) -> int:
    return min((it - 1) // cfg.sh_upgrade_interval, cloud_degree)


def train_steps(
    state: TrainState,
    images: list,
    cam: geom.SphericalCamera,
    cfg: TrainConfig,
    init,
    n_steps: int,
) -> None:
    """Advance the training state by n_steps iterations, in place."""
    weights = (
        loss.uniform_weights(cam.height)
        if cfg.uniform_weights
        else loss.spherical_weights(cam)
    )
    base_opts = raster.RenderOptions(background=cfg.background)
    lr_t0 = cfg.lr_t0_from_scratch if cfg.from_scratch else cfg.lr_t0

    for _ in range(n_steps):
        it = state.iteration + 1
        ci = _next_camera(state)
        pose = state.pose(ci)

        raw = images[ci]
        if state.grid is not None:
            target, uaux = camera_model.undistort(raw, state.grid)
        else:
            target, uaux = raw, None

        deg = _active_sh_degree(it, cfg, state.cloud.sh_degree)
        opts = replace(base_opts, active_sh_degree=deg)
        img, aux = raster.render(state.cloud, pose, cam, opts)

        bd, d_img, d_target, d_ls_aniso = loss.total_loss(
            img, target, weights, state.cloud.log_scales, cfg.lam, cfg.gamma
        )
        if not math.isfinite(bd.grand_total):
            raise NumericalError("non-finite loss at iteration %d" % it)

        cg, pg = grad.backward(
            state.cloud,
            pose,
            cam,
            opts,
            aux,
            d_img,
            pose_frozen=not cfg.optimize_poses,
        )
        cg.d_log_scales += d_ls_aniso
        grad.accumulate_densify_stats(state.stats, cg)

        lr_pos = lr_schedule(
            it, cfg.lr_position, cfg.lr_position_end, cfg.total_iters
        )
        K = state.cloud.sh_coeffs.shape[1]
        lr_sh = np.full((1, K, 1), cfg.lr_sh_rest)
        lr_sh[0, 0, 0] = cfg.lr_sh_dc
        adam_step(state.cloud.positions, cg.d_positions, state.adam["positions"], lr_pos)
        adam_step(state.cloud.log_scales, cg.d_log_scales, state.adam["log_scales"], cfg.lr_scale)
        adam_step(state.cloud.rotations, cg.d_rotations, state.adam["rotations"], cfg.lr_rotation)
        adam_step(
            state.cloud.opacity_logits,
            cg.d_opacity_logits,
            state.adam["opacity_logits"],
            cfg.lr_opacity,
        )
        adam_step(state.cloud.sh_coeffs, cg.d_sh, state.adam["sh"], lr_sh)
        norms = np.linalg.norm(state.cloud.rotations, axis=1, keepdims=True)
        state.cloud.rotations /= np.maximum(norms, 1e-12)

        if cfg.optimize_poses:
            k = (
                int(state.adam["pose_q"].t.sum())
                if cfg.global_pose_steps
                else int(state.adam["pose_q"].t[ci])
            )
            lr_q = lr_schedule(k, cfg.lr_q0, cfg.lr_q_end, cfg.lr_decay_steps)
            lr_t = lr_schedule(k, lr_t0, cfg.lr_t_end, cfg.lr_decay_steps)
            adam_step_row(state.qs, pg.d_q, state.adam["pose_q"], lr_q, ci)
            adam_step_row(state.ts, pg.d_t, state.adam["pose_t"], lr_t, ci)
            state.qs[ci] = geom.normalize_quat(state.qs[ci])

        if state.grid is not None:
            d_D, d_ft = camera_model.undistort_backward(uaux, d_target)
            adam_step(state.grid.D_raw, d_D, state.adam["dist"], cfg.lr_distortion)
            if cfg.optimize_focal:
                ft_arr = np.asarray(state.grid.f_t, dtype=np.float64).reshape(())
                adam_step(ft_arr, np.asarray(d_ft), state.adam["f_t"], cfg.lr_distortion)
                state.grid.f_t = float(ft_arr)

        if (
            cfg.densify_enabled
            and cfg.densify_start <= it <= cfg.densify_end
            and it % cfg.densify_interval == 0
        ):
            state.cloud = densify_and_prune(
                state.cloud, state.stats, cfg, state.scene_extent, state.adam, state.rng
            )
        if (
            cfg.densify_enabled
            and cfg.opacity_reset_interval > 0
            and it % cfg.opacity_reset_interval == 0
            and it <= cfg.densify_end
        ):
            reset_opacity(state.cloud, state.adam)

        if it in cfg.reinit_iters:
            if isinstance(init, scene.GaussianCloud):
                reinit_gaussians(state, scene.cloud_to_init(init), cfg)
            else:
                reinit_gaussians(state, init, cfg)

        state.log.append(
            {
                "iter": it,
                "cam": ci,
                "l1": bd.l1_term,
                "ssim": bd.ssim_term,
                "aniso": bd.aniso_total,
                "total": bd.grand_total,
                "n_gaussians": state.cloud.n,
                "lr_pos": lr_pos,
            }
        )
        state.iteration = it


def train(
    images: list,
    cameras: list,
    init,
    cam: geom.SphericalCamera,
    cfg: TrainConfig,
) -> tuple:
    """Full training run; returns (cloud, poses, grid, log)."""
    if len(images) != len(cameras):
        raise DataError(
            "got %d images for %d cameras" % (len(images), len(cameras))
        )
    for im in images:
        if im.shape != (cam.height, cam.width, 3):
            raise DataError(
                "image shape %s does not match camera %dx%d"
                % (im.shape, cam.height, cam.width)
            )
    state = init_train_state(init, cameras, cam, cfg)
    train_steps(state, images, cam, cfg, init, cfg.total_iters)
    return state.cloud, state.poses(), state.grid, state.log
