"""Command-line surface.

Subcommands: synth (generate a dataset), train, render, eval, perturb,
gradcheck. Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure, 4 check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import camera_model, evaluate, geom, gradcheck, loss, optim, raster, scene, sceneio, synth
from .errors import CheckFailure, DataError, EngineError, NumericalError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError("%s: %s" % (self.prog, message))


def _build_parser() -> _Parser:
    p = _Parser(prog="omnisplat", description=__doc__)
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--preset", required=True, choices=synth.PRESETS)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--distortion-deg", type=float, default=None)
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="optimize a scene")
    tp.add_argument("--images", default=None, help="base directory for image paths")
    tp.add_argument("--cameras", required=True)
    src = tp.add_mutually_exclusive_group()
    src.add_argument("--points", default=None, help="PLY seed points (or full cloud)")
    src.add_argument("--random", type=int, default=None, metavar="N")
    src.add_argument("--depth", default=None, help="depth .npy back-projected from view 0")
    tp.add_argument("--out", required=True)
    tp.add_argument("--iters", type=int, default=None)
    tp.add_argument("--optimize-poses", action=argparse.BooleanOptionalAction, default=None)
    tp.add_argument(
        "--optimize-camera-model", action=argparse.BooleanOptionalAction, default=None
    )
    tp.add_argument("--from-scratch", action="store_true", default=False)
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--config", default=None)
    tp.add_argument("--resume", default=None, help="checkpoint directory to continue")
    tp.set_defaults(func=cmd_train)

    rp = sub.add_parser("render", help="render a checkpoint")
    rp.add_argument("--ckpt", required=True)
    pose_arg = rp.add_mutually_exclusive_group(required=True)
    pose_arg.add_argument("--pose", default=None, help='"qw qx qy qz tx ty tz"')
    pose_arg.add_argument("--camera-id", default=None)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_render)

    ep = sub.add_parser("eval", help="metrics for a checkpoint")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--cameras", required=True)
    ep.add_argument("--images", default=None, help="base directory for image paths")
    ep.add_argument("--gt-cameras", default=None)
    ep.add_argument("--no-align", action="store_true", default=False)
    ep.set_defaults(func=cmd_eval)

    pp = sub.add_parser("perturb", help="add seeded pose noise")
    pp.add_argument("--cameras", required=True)
    pp.add_argument("--t-scale", type=float, default=0.5)
    pp.add_argument("--r-scale", type=float, default=0.5)
    pp.add_argument("--seed", type=int, default=0)
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=cmd_perturb)

    gp = sub.add_parser("gradcheck", help="finite-difference self check")
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--size", default="32x64", help="HxW")
    gp.add_argument("--n-gaussians", type=int, default=20)
    gp.set_defaults(func=cmd_gradcheck)
    return p


def _parse_size(text: str) -> tuple:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise DataError("--size must be HxW, got '%s'" % text)
    try:
        h, w = int(parts[0]), int(parts[1])
    except ValueError:
        raise DataError("--size must be HxW integers, got '%s'" % text)
    if h <= 0 or w != 2 * h:
        raise DataError("--size must satisfy W = 2H with H > 0, got '%s'" % text)
    return h, w


def _image_base(args_images, cameras_path: str) -> str:
    if args_images is not None:
        return args_images
    return os.path.dirname(os.path.abspath(cameras_path))


def _load_images(camfile: sceneio.CameraFile, base: str) -> list:
    images = []
    for rec in camfile.records:
        path = rec.image_path
        if not os.path.isabs(path):
            path = os.path.join(base, path)
        img = sceneio.load_png(path)
        if img.shape != (camfile.height, camfile.width, 3):
            raise DataError(
                "image %s is %dx%d, camera file says %dx%d"
                % (path, img.shape[0], img.shape[1], camfile.height, camfile.width)
            )
        images.append(img)
    return images


def cmd_synth(args) -> int:
    synth.generate(
        args.preset, args.out, seed=args.seed, distortion_deg=args.distortion_deg
    )
    print("wrote %s dataset to %s (seed %d)" % (args.preset, args.out, args.seed))
    return 0


def _assemble_config(args, base: optim.TrainConfig) -> optim.TrainConfig:
    cfg = sceneio.load_config(args.config, base) if args.config else base
    d = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    if args.iters is not None:
        d["total_iters"] = args.iters
    if args.optimize_poses is not None:
        d["optimize_poses"] = args.optimize_poses
    if args.optimize_camera_model is not None:
        d["optimize_camera_model"] = args.optimize_camera_model
    if args.from_scratch:
        d["from_scratch"] = True
    if args.seed is not None:
        d["seed"] = args.seed
    if d["total_iters"] > 0:
        # a shortened run silently drops re-inits scheduled beyond its end
        d["reinit_iters"] = tuple(r for r in d["reinit_iters"] if r < d["total_iters"])
    return optim.TrainConfig(**d)


def _load_init(args, camfile, images, cfg):
    if args.points is not None:
        obj = sceneio.load_ply(args.points)
        return obj
    if args.random is not None:
        return scene.init_random(args.random, 4.0, cfg.seed, sh_degree=cfg.sh_degree)
    if args.depth is not None:
        try:
            depth = np.load(args.depth)
        except FileNotFoundError:
            raise DataError("depth file not found: %s" % args.depth)
        rec = camfile.records[0]
        return scene.init_from_depth(depth, images[0], rec.pose())
    raise DataError("one of --points, --random, --depth is required")


def cmd_train(args) -> int:
    camfile = sceneio.load_cameras(args.cameras)
    cam = geom.SphericalCamera(width=camfile.width, height=camfile.height)
    images = _load_images(camfile, _image_base(args.images, args.cameras))
    cam_records = [(r.id, r.image_path) for r in camfile.records]

    if args.resume is not None:
        ckpt = sceneio.load_checkpoint(args.resume)
        cfg = _assemble_config(args, ckpt.cfg)
        state = sceneio.restore_train_state(ckpt, cam)
        if len(camfile.records) != state.qs.shape[0]:
            raise DataError(
                "camera count %d does not match checkpoint %d"
                % (len(camfile.records), state.qs.shape[0])
            )
        init = None
        if args.points is not None:
            init = sceneio.load_ply(args.points)
        pending = [r for r in cfg.reinit_iters if r > state.iteration]
        if pending and init is None:
            raise DataError(
                "--points required to resume past re-initialization at iteration %d"
                % pending[0]
            )
    else:
        cfg = _assemble_config(args, optim.TrainConfig())
        init = _load_init(args, camfile, images, cfg)
        state = optim.init_train_state(init, camfile.poses(), cam, cfg)

    while state.iteration < cfg.total_iters:
        if cfg.snapshot_interval > 0:
            boundary = (
                state.iteration // cfg.snapshot_interval + 1
            ) * cfg.snapshot_interval
            target = min(cfg.total_iters, boundary)
        else:
            target = cfg.total_iters
        optim.train_steps(state, images, cam, cfg, init, target - state.iteration)
        if state.iteration < cfg.total_iters:
            snap = "%s_%06d" % (args.out.rstrip("/"), state.iteration)
            sceneio.save_checkpoint(snap, state, cfg, cam, cam_records)
            print("snapshot at iteration %d -> %s" % (state.iteration, snap))

    sceneio.save_checkpoint(args.out, state, cfg, cam, cam_records)
    with open(os.path.join(args.out, "log.jsonl"), "w") as f:
        for rec in state.log:
            f.write(json.dumps(rec) + "\n")
    final = state.log[-1]["total"] if state.log else float("nan")
    print(
        "trained %d iterations, %d gaussians, final loss %.6g -> %s"
        % (state.iteration, state.cloud.n, final, args.out)
    )
    return 0


def _parse_pose(text: str) -> geom.CameraPose:
    parts = text.split()
    if len(parts) != 7:
        raise DataError('--pose needs 7 numbers "qw qx qy qz tx ty tz"')
    try:
        vals = [float(v) for v in parts]
    except ValueError:
        raise DataError("--pose has non-numeric values: %s" % text)
    q = np.array(vals[:4])
    if np.linalg.norm(q) < 1e-6:
        raise DataError("invalid quaternion (near-zero norm)")
    return geom.CameraPose(q=geom.normalize_quat(q), t=np.array(vals[4:]))


def _ckpt_render_opts(ckpt: sceneio.Checkpoint, cloud, reproduce_iteration: bool):
    deg = None
    if reproduce_iteration:
        deg = optim._active_sh_degree(max(ckpt.iteration, 1), ckpt.cfg, cloud.sh_degree)
    return raster.RenderOptions(
        background=tuple(float(b) for b in ckpt.cfg.background), active_sh_degree=deg
    )


def cmd_render(args) -> int:
    ckpt = sceneio.load_checkpoint(args.ckpt)
    cam = geom.SphericalCamera(width=ckpt.cameras.width, height=ckpt.cameras.height)
    if args.camera_id is not None:
        pose = ckpt.cameras.by_id(args.camera_id).pose()
    else:
        pose = _parse_pose(args.pose)
    opts = _ckpt_render_opts(ckpt, ckpt.cloud, reproduce_iteration=True)
    img, _ = raster.render(ckpt.cloud, pose, cam, opts)
    sceneio.save_png(args.out, img)
    print("rendered %s -> %s" % (args.ckpt, args.out))
    return 0


def cmd_eval(args) -> int:
    ckpt = sceneio.load_checkpoint(args.ckpt)
    camfile = sceneio.load_cameras(args.cameras)
    if (camfile.width, camfile.height) != (ckpt.cameras.width, ckpt.cameras.height):
        raise DataError(
            "camera file %dx%d does not match checkpoint %dx%d"
            % (camfile.width, camfile.height, ckpt.cameras.width, ckpt.cameras.height)
        )
    cam = geom.SphericalCamera(width=camfile.width, height=camfile.height)
    images = _load_images(camfile, _image_base(args.images, args.cameras))

    grid = None
    if np.any(ckpt.D_raw != 0.0) or ckpt.f_t != 1.0:
        grid = camera_model.init_grid(cam)
        grid.D_raw = ckpt.D_raw.copy()
        grid.f_t = ckpt.f_t

    opts = _ckpt_render_opts(ckpt, ckpt.cloud, reproduce_iteration=False)
    psnrs = []
    ssims = []
    for rec, target in zip(camfile.records, images):
        pose = ckpt.cameras.by_id(rec.id).pose()
        if grid is not None:
            target, _ = camera_model.undistort(target, grid)
        img, _ = raster.render(ckpt.cloud, pose, cam, opts)
        img = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5) / 255.0
        p = loss.psnr(img, target)
        s, _, _ = loss.ssim(img, target)
        s = float(s)
        psnrs.append(p)
        ssims.append(s)
        print("view %s psnr %s ssim %.6f" % (rec.id, _fmt_db(p), s))
    print(
        "mean psnr %s ssim %.6f"
        % (_fmt_db(float(np.mean(psnrs))), float(np.mean(ssims)))
    )

    if args.gt_cameras is not None:
        gtfile = sceneio.load_cameras(args.gt_cameras)
        est = []
        gt = []
        for rec in gtfile.records:
            est.append(ckpt.cameras.by_id(rec.id).pose())
            gt.append(rec.pose())
        rot, pos = evaluate.pose_rmse(est, gt, align=not args.no_align)
        print("pose rmse rot %.6f deg pos %.6g" % (rot, pos))
    return 0


def _fmt_db(v: float) -> str:
    if np.isinf(v):
        return "inf"
    return "%.4f" % v


def cmd_perturb(args) -> int:
    camfile = sceneio.load_cameras(args.cameras)
    poses = camfile.poses()
    radius = optim.compute_scene_radius(poses)
    noisy = optim.perturb_cameras(
        poses, radius, T_scale=args.t_scale, R_scale=args.r_scale, seed=args.seed
    )
    records = [
        sceneio.CameraRecord(id=r.id, image_path=r.image_path, q=p.q, t=p.t)
        for r, p in zip(camfile.records, noisy)
    ]
    sceneio.save_cameras(
        args.out,
        sceneio.CameraFile(width=camfile.width, height=camfile.height, records=records),
    )
    print(
        "perturbed %d cameras (T_scale=%g, R_scale=%g, seed=%d) -> %s"
        % (len(records), args.t_scale, args.r_scale, args.seed, args.out)
    )
    return 0


def cmd_gradcheck(args) -> int:
    h, w = _parse_size(args.size)
    report = gradcheck.run_gradcheck(args.seed, n_gaussians=args.n_gaussians, height=h, width=w)
    print(report.summary())
    gradcheck.require_pass(report)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            raise _UsageError("omnisplat: a subcommand is required (see --help)")
        return args.func(args)
    except _UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except DataError as e:
        print("data error: %s" % e, file=sys.stderr)
        return 2
    except NumericalError as e:
        print("numerical error: %s" % e, file=sys.stderr)
        return 3
    except CheckFailure as e:
        print("check failure: %s" % e, file=sys.stderr)
        return 4
    except EngineError as e:
        print("error: %s" % e, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
