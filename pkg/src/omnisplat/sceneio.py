"""Scene and checkpoint serialization.

PLY point clouds (ASCII and binary little-endian), 8-bit PNG images,
camera JSON files, the distortion binary, config snapshots, and
checkpoint directories. Learned parameters are stored as f32 for
interoperability; a checkpoint additionally carries an f64 optimizer
state archive so resumed training continues within 1e-10 of an
uninterrupted run.
"""

from __future__ import annotations

import json
import os
import shutil
import struct
import warnings
from dataclasses import dataclass, fields

import numpy as np
from PIL import Image

from . import camera_model, geom, grad, optim, scene
from .errors import DataError

# ---------------------------------------------------------------------------
# PNG

_PNG_16BIT_MODES = {"I", "I;16", "I;16B", "I;16L", "I;16N"}


def load_png(path: str) -> np.ndarray:
    """8-bit RGB(A) PNG -> float image in [0,1]; alpha is dropped."""
    try:
        im = Image.open(path)
        im.load()
    except FileNotFoundError:
        raise DataError("image file not found: %s" % path)
    except Exception as e:
        raise DataError("cannot read PNG %s: %s" % (path, e))
    if im.mode == "P":
        raise DataError("unsupported PNG format (palette): %s" % path)
    if im.mode in _PNG_16BIT_MODES:
        raise DataError("unsupported PNG format (16-bit): %s" % path)
    if im.mode not in ("RGB", "RGBA"):
        raise DataError("unsupported PNG format (mode %s): %s" % (im.mode, path))
    arr = np.asarray(im, dtype=np.uint8)[:, :, :3]
    return arr.astype(np.float64) / 255.0


def save_png(path: str, image: np.ndarray) -> None:
    """Float image in [0,1] -> 8-bit RGB PNG; rounds half away from zero."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError("save_png expects an HxWx3 image, got %s" % (image.shape,))
    q = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# PLY

_PLY_SCALAR_TYPES = {
    "float": ("<f4", float),
    "float32": ("<f4", float),
    "double": ("<f8", float),
    "float64": ("<f8", float),
    "uchar": ("u1", int),
    "uint8": ("u1", int),
}


def _cloud_property_names(K: int) -> list:
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += ["f_rest_%d" % i for i in range(3 * (K - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2"]
    names += ["rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def save_ply(path: str, obj) -> None:
    if isinstance(obj, scene.GaussianCloud):
        _save_cloud_ply(path, obj)
    elif isinstance(obj, scene.SceneInit):
        _save_init_ply(path, obj)
    else:
        raise DataError("save_ply: unsupported object %r" % type(obj))


def _save_cloud_ply(path: str, cloud: scene.GaussianCloud) -> None:
    n = cloud.n
    K = cloud.sh_coeffs.shape[1]
    names = _cloud_property_names(K)
    header = ["ply", "format binary_little_endian 1.0", "element vertex %d" % n]
    header += ["property float %s" % p for p in names]
    header.append("end_header")
    # f_rest is channel-major: index c*(K-1) + (k-1)
    rest = cloud.sh_coeffs[:, 1:, :].transpose(0, 2, 1).reshape(n, 3 * (K - 1))
    data = np.concatenate(
        [
            cloud.positions,
            cloud.sh_coeffs[:, 0, :],
            rest,
            cloud.opacity_logits[:, None],
            cloud.log_scales,
            cloud.rotations,
        ],
        axis=1,
    ).astype("<f4")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def _save_init_ply(path: str, init: scene.SceneInit) -> None:
    n = init.points.shape[0]
    header = [
        "ply",
        "format binary_little_endian 1.0",
        "element vertex %d" % n,
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    pts = init.points.astype("<f4")
    cols = np.floor(np.clip(init.colors, 0.0, 1.0) * 255.0 + 0.5).astype("u1")
    dt = np.dtype(
        [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    )
    rows = np.empty(n, dtype=dt)
    rows["x"], rows["y"], rows["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    rows["red"], rows["green"], rows["blue"] = cols[:, 0], cols[:, 1], cols[:, 2]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rows.tobytes())


def _parse_ply_header(raw: bytes, path: str):
    end_tag = b"end_header\n"
    pos = raw.find(end_tag)
    if pos < 0:
        raise DataError("malformed header at byte 0 in %s: no end_header" % path)
    body_off = pos + len(end_tag)
    lines = raw[:pos].decode("latin-1").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise DataError("malformed header at byte 0 in %s: missing ply magic" % path)
    fmt = None
    n_vertex = None
    props = []
    in_vertex = False
    offset = len(lines[0]) + 1
    for line in lines[1:]:
        stripped = line.strip()
        toks = stripped.split()
        if not toks or toks[0] == "comment":
            offset += len(line) + 1
            continue
        if toks[0] == "format":
            if len(toks) < 2:
                raise DataError("malformed header at byte %d in %s" % (offset, path))
            if toks[1] == "binary_big_endian":
                raise DataError("unsupported endianness in %s" % path)
            if toks[1] not in ("ascii", "binary_little_endian"):
                raise DataError(
                    "malformed header at byte %d in %s: format %s"
                    % (offset, path, toks[1])
                )
            fmt = toks[1]
        elif toks[0] == "element":
            if toks[1] == "vertex":
                if n_vertex is not None:
                    raise DataError(
                        "malformed header at byte %d in %s: duplicate vertex element"
                        % (offset, path)
                    )
                n_vertex = int(toks[2])
                in_vertex = True
            else:
                if n_vertex is None:
                    raise DataError(
                        "unsupported element '%s' before vertex at byte %d in %s"
                        % (toks[1], offset, path)
                    )
                in_vertex = False
        elif toks[0] == "property":
            if not in_vertex:
                offset += len(line) + 1
                continue
            if toks[1] == "list":
                raise DataError(
                    "unsupported property list at byte %d in %s" % (offset, path)
                )
            if toks[1] not in _PLY_SCALAR_TYPES:
                raise DataError(
                    "unsupported property type '%s' at byte %d in %s"
                    % (toks[1], offset, path)
                )
            props.append((toks[2], toks[1]))
        offset += len(line) + 1
    if fmt is None:
        raise DataError("malformed header in %s: no format line" % path)
    if n_vertex is None:
        raise DataError("malformed header in %s: no vertex element" % path)
    if not props:
        raise DataError("malformed header in %s: vertex has no properties" % path)
    return fmt, n_vertex, props, body_off


def load_ply(path: str):
    """Load a PLY file as a GaussianCloud (full attribute set) or SceneInit."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError:
        raise DataError("PLY file not found: %s" % path)
    fmt, n, props, body_off = _parse_ply_header(raw, path)
    names = [p[0] for p in props]

    if fmt == "binary_little_endian":
        dt = np.dtype([(nm, _PLY_SCALAR_TYPES[tp][0]) for nm, tp in props])
        need = dt.itemsize * n
        body = raw[body_off:]
        if len(body) < need:
            raise DataError(
                "truncated body at byte %d in %s: need %d bytes, have %d"
                % (body_off, path, need, len(body))
            )
        table = np.frombuffer(body[:need], dtype=dt)
        cols = {nm: table[nm].astype(np.float64) for nm in names}
    else:
        toks = raw[body_off:].split()
        need = n * len(props)
        if len(toks) < need:
            raise DataError(
                "truncated body at byte %d in %s: need %d values, have %d"
                % (body_off, path, need, len(toks))
            )
        try:
            flat = np.array(toks[:need], dtype=np.float64)
        except ValueError as e:
            raise DataError("malformed body at byte %d in %s: %s" % (body_off, path, e))
        table2 = flat.reshape(n, len(props))
        cols = {nm: table2[:, i] for i, (nm, _) in enumerate(props)}

    for req in ("x", "y", "z"):
        if req not in cols:
            missing = [r for r in ("x", "y", "z") if r not in cols]
            raise DataError(
                "missing required properties %s in %s" % (",".join(missing), path)
            )

    rest_count = sum(1 for nm in names if nm.startswith("f_rest_"))
    cloud_req = {"f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"}
    if cloud_req.issubset(names) and rest_count % 3 == 0:
        K = rest_count // 3 + 1
        if K not in (1, 4, 9, 16):
            raise DataError(
                "unsupported spherical-harmonic size %d in %s" % (rest_count, path)
            )
        pos = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
        sh = np.zeros((n, K, 3))
        sh[:, 0, 0] = cols["f_dc_0"]
        sh[:, 0, 1] = cols["f_dc_1"]
        sh[:, 0, 2] = cols["f_dc_2"]
        for c in range(3):
            for k in range(K - 1):
                sh[:, k + 1, c] = cols["f_rest_%d" % (c * (K - 1) + k)]
        cloud = scene.GaussianCloud(
            positions=pos,
            log_scales=np.stack([cols["scale_0"], cols["scale_1"], cols["scale_2"]], axis=1),
            rotations=np.stack([cols["rot_0"], cols["rot_1"], cols["rot_2"], cols["rot_3"]], axis=1),
            opacity_logits=cols["opacity"].copy(),
            sh_coeffs=sh,
        )
        cloud.validate()
        return cloud

    pos = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    if {"red", "green", "blue"}.issubset(names):
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1) / 255.0
    elif {"r", "g", "b"}.issubset(names):
        colors = np.stack([cols["r"], cols["g"], cols["b"]], axis=1)
    else:
        colors = np.full((n, 3), 0.5)
    return scene.SceneInit(points=pos, colors=colors, source="ply:%s" % os.path.basename(path))


# ---------------------------------------------------------------------------
# Camera JSON

_CONVENTION = "w2c_qwxyz"


@dataclass
class CameraRecord:
    id: str
    image_path: str
    q: np.ndarray
    t: np.ndarray

    def pose(self) -> geom.CameraPose:
        return geom.CameraPose(q=self.q.copy(), t=self.t.copy())


@dataclass
class CameraFile:
    width: int
    height: int
    records: list

    def poses(self) -> list:
        return [r.pose() for r in self.records]

    def by_id(self, rid: str) -> CameraRecord:
        for r in self.records:
            if r.id == rid:
                return r
        raise DataError("camera id '%s' not found" % rid)


def save_cameras(path: str, camfile: CameraFile) -> None:
    payload = {
        "convention": _CONVENTION,
        "width": int(camfile.width),
        "height": int(camfile.height),
        "cameras": [
            {
                "id": r.id,
                "image_path": r.image_path,
                "q": [float(v) for v in r.q],
                "t": [float(v) for v in r.t],
            }
            for r in camfile.records
        ],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def load_cameras(path: str) -> CameraFile:
    try:
        with open(path) as f:
            payload = json.load(f)
    except FileNotFoundError:
        raise DataError("camera file not found: %s" % path)
    except json.JSONDecodeError as e:
        raise DataError("invalid JSON in %s: %s" % (path, e))
    if not isinstance(payload, dict):
        raise DataError("camera file %s: top level must be an object" % path)
    allowed = {"convention", "width", "height", "cameras"}
    unknown = set(payload) - allowed
    if unknown:
        raise DataError(
            "camera file %s: unknown fields %s" % (path, ",".join(sorted(unknown)))
        )
    missing = allowed - set(payload)
    if missing:
        raise DataError(
            "camera file %s: missing fields %s" % (path, ",".join(sorted(missing)))
        )
    if payload["convention"] != _CONVENTION:
        raise DataError(
            "camera file %s: convention '%s' is not %s"
            % (path, payload["convention"], _CONVENTION)
        )
    width, height = int(payload["width"]), int(payload["height"])
    records = []
    seen = set()
    for rec in payload["cameras"]:
        rec_allowed = {"id", "image_path", "q", "t"}
        unknown = set(rec) - rec_allowed
        if unknown:
            raise DataError(
                "camera record %r: unknown fields %s"
                % (rec.get("id"), ",".join(sorted(unknown)))
            )
        rid = rec.get("id")
        if rid is None:
            raise DataError("camera record without id in %s" % path)
        rid = str(rid)
        if rid in seen:
            raise DataError("duplicate camera id '%s' in %s" % (rid, path))
        seen.add(rid)
        for fieldname in ("image_path", "q", "t"):
            if fieldname not in rec:
                raise DataError("camera '%s' missing field %s" % (rid, fieldname))
        q = np.asarray(rec["q"], dtype=np.float64)
        t = np.asarray(rec["t"], dtype=np.float64)
        if q.shape != (4,) or t.shape != (3,):
            raise DataError("camera '%s': q must be 4 values and t 3 values" % rid)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise DataError("camera '%s': non-finite pose values" % rid)
        norm = float(np.linalg.norm(q))
        if norm < 1e-6:
            raise DataError("camera '%s': zero quaternion" % rid)
        if abs(norm - 1.0) > 1e-3:
            warnings.warn(
                "camera '%s': quaternion norm %.6f, renormalizing" % (rid, norm)
            )
        # renormalize only when measurably off so well-formed files round
        # trip bit-exactly through load/save cycles
        if abs(norm - 1.0) > 1e-9:
            q = q / norm
        records.append(CameraRecord(id=rid, image_path=str(rec["image_path"]), q=q, t=t))
    return CameraFile(width=width, height=height, records=records)


# ---------------------------------------------------------------------------
# Distortion binary

_DIST_MAGIC = b"OMNIDIST"
_DIST_VERSION = 1


def save_distortion(path: str, D_raw: np.ndarray, f_t: float) -> None:
    H, W = D_raw.shape[:2]
    with open(path, "wb") as f:
        f.write(_DIST_MAGIC)
        f.write(struct.pack("<III", _DIST_VERSION, H, W))
        f.write(np.ascontiguousarray(D_raw, dtype="<f4").tobytes())
        f.write(struct.pack("<f", f_t))


def load_distortion(path: str) -> tuple:
    """Returns (D_raw float64 (H,W,3), f_t)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError:
        raise DataError("distortion file not found: %s" % path)
    if len(raw) < 20:
        raise DataError("truncated distortion file at byte %d in %s" % (len(raw), path))
    if raw[:8] != _DIST_MAGIC:
        raise DataError("bad magic in distortion file %s" % path)
    version, H, W = struct.unpack("<III", raw[8:20])
    if version != _DIST_VERSION:
        raise DataError("unsupported distortion version %d in %s" % (version, path))
    need = 20 + H * W * 3 * 4 + 4
    if len(raw) < need:
        raise DataError(
            "truncated distortion file at byte %d in %s: need %d bytes"
            % (len(raw), path, need)
        )
    D = np.frombuffer(raw[20 : 20 + H * W * 3 * 4], dtype="<f4").reshape(H, W, 3)
    (f_t,) = struct.unpack("<f", raw[20 + H * W * 3 * 4 : need])
    return D.astype(np.float64), float(f_t)


# ---------------------------------------------------------------------------
# Config snapshot

def save_config(path: str, cfg: optim.TrainConfig) -> None:
    lines = []
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        if isinstance(val, tuple):
            sval = ",".join(repr(v) for v in val)
        elif isinstance(val, bool):
            sval = "true" if val else "false"
        else:
            sval = repr(val)
        lines.append("%s = %s" % (f.name, sval))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def parse_config_text(text: str, base: optim.TrainConfig | None = None) -> optim.TrainConfig:
    known = {f.name: f for f in fields(optim.TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise DataError("config line %d: expected key = value" % lineno)
        key, _, sval = stripped.partition("=")
        key = key.strip()
        sval = sval.strip()
        if key not in known:
            raise DataError("config line %d: unknown key '%s'" % (lineno, key))
        values[key] = _coerce_config_value(key, sval)
    merged = {f.name: getattr(base, f.name) for f in fields(base)} if base else {}
    merged.update(values)
    if base is None:
        return optim.TrainConfig(**values)
    return optim.TrainConfig(**merged)


def _coerce_config_value(key: str, sval: str):
    proto = getattr(optim.TrainConfig(), key)
    if isinstance(proto, bool):
        if sval.lower() in ("true", "1", "yes", "on"):
            return True
        if sval.lower() in ("false", "0", "no", "off"):
            return False
        raise DataError("config key '%s': expected boolean, got '%s'" % (key, sval))
    if isinstance(proto, int):
        return int(sval)
    if isinstance(proto, float):
        return float(sval)
    if isinstance(proto, tuple):
        if not sval:
            return ()
        parts = [p for p in sval.split(",") if p.strip()]
        conv = float if (proto and isinstance(proto[0], float)) else int
        try:
            return tuple(conv(p) for p in parts)
        except ValueError:
            return tuple(float(p) for p in parts)
    return sval


def load_config(path: str, base: optim.TrainConfig | None = None) -> optim.TrainConfig:
    try:
        with open(path) as f:
            text = f.read()
    except FileNotFoundError:
        raise DataError("config file not found: %s" % path)
    return parse_config_text(text, base)


# ---------------------------------------------------------------------------
# Checkpoints

_CKPT_MEMBERS = (
    "gaussians.ply",
    "cameras.json",
    "distortion.bin",
    "config.txt",
    "state.json",
)
_OPTIM_FILE = "optim_state.npz"


@dataclass
class Checkpoint:
    cloud: scene.GaussianCloud
    cameras: CameraFile
    D_raw: np.ndarray
    f_t: float
    cfg: optim.TrainConfig
    iteration: int
    optim_state: dict | None
    path: str


def _optim_payload(state: optim.TrainState) -> dict:
    """f64 snapshot of everything resume needs for 1e-10 equivalence."""
    payload = {
        "positions": state.cloud.positions,
        "log_scales": state.cloud.log_scales,
        "rotations": state.cloud.rotations,
        "opacity_logits": state.cloud.opacity_logits,
        "sh_coeffs": state.cloud.sh_coeffs,
        "qs": state.qs,
        "ts": state.ts,
        "stats_norm_sum": state.stats.norm_sum,
        "stats_counts": state.stats.counts,
        "iteration": np.int64(state.iteration),
        "epoch_order": state.epoch_order,
        "epoch_pos": np.int64(state.epoch_pos),
        "scene_extent": np.float64(state.scene_extent),
        "rng_state": np.frombuffer(
            json.dumps(state.rng.bit_generator.state).encode("utf-8"), dtype=np.uint8
        ),
    }
    for name, blk in state.adam.items():
        payload["adam_%s_m" % name] = blk.m
        payload["adam_%s_v" % name] = blk.v
        payload["adam_%s_t" % name] = blk.t
    if state.grid is not None:
        payload["grid_D_raw"] = state.grid.D_raw
        payload["grid_f_t"] = np.float64(state.grid.f_t)
    return payload


def save_checkpoint(
    path: str,
    state: optim.TrainState,
    cfg: optim.TrainConfig,
    cam: geom.SphericalCamera,
    cam_records: list,
) -> None:
    """Write a checkpoint directory atomically (temp dir, then swap).

    cam_records supplies (id, image_path) pairs in camera order.
    """
    tmp = path + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)

    save_ply(os.path.join(tmp, "gaussians.ply"), state.cloud)
    records = [
        CameraRecord(id=rid, image_path=img, q=state.qs[i].copy(), t=state.ts[i].copy())
        for i, (rid, img) in enumerate(cam_records)
    ]
    save_cameras(
        os.path.join(tmp, "cameras.json"),
        CameraFile(width=cam.width, height=cam.height, records=records),
    )
    if state.grid is not None:
        save_distortion(
            os.path.join(tmp, "distortion.bin"), state.grid.D_raw, state.grid.f_t
        )
    else:
        save_distortion(
            os.path.join(tmp, "distortion.bin"),
            np.zeros((cam.height, cam.width, 3)),
            1.0,
        )
    save_config(os.path.join(tmp, "config.txt"), cfg)
    with open(os.path.join(tmp, "state.json"), "w") as f:
        json.dump({"iteration": state.iteration}, f)
        f.write("\n")
    np.savez(os.path.join(tmp, _OPTIM_FILE), **_optim_payload(state))

    if os.path.exists(path):
        old = path + ".old"
        if os.path.exists(old):
            shutil.rmtree(old)
        os.replace(path, old)
        os.replace(tmp, path)
        shutil.rmtree(old)
    else:
        os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.isdir(path):
        raise DataError("checkpoint directory not found: %s" % path)
    missing = [m for m in _CKPT_MEMBERS if not os.path.exists(os.path.join(path, m))]
    if missing:
        raise DataError(
            "partial checkpoint %s: missing %s" % (path, ", ".join(missing))
        )
    obj = load_ply(os.path.join(path, "gaussians.ply"))
    if not isinstance(obj, scene.GaussianCloud):
        raise DataError("checkpoint %s: gaussians.ply is not a full cloud" % path)
    camfile = load_cameras(os.path.join(path, "cameras.json"))
    D_raw, f_t = load_distortion(os.path.join(path, "distortion.bin"))
    if D_raw.shape[:2] != (camfile.height, camfile.width):
        raise DataError(
            "checkpoint %s: distortion grid %s does not match camera %dx%d"
            % (path, D_raw.shape[:2], camfile.height, camfile.width)
        )
    cfg = load_config(os.path.join(path, "config.txt"))
    with open(os.path.join(path, "state.json")) as f:
        meta = json.load(f)
    iteration = int(meta["iteration"])

    optim_state = None
    opt_path = os.path.join(path, _OPTIM_FILE)
    if os.path.exists(opt_path):
        with np.load(opt_path) as z:
            optim_state = {k: z[k].copy() for k in z.files}
    return Checkpoint(
        cloud=obj,
        cameras=camfile,
        D_raw=D_raw,
        f_t=f_t,
        cfg=cfg,
        iteration=iteration,
        optim_state=optim_state,
        path=path,
    )


def restore_train_state(ckpt: Checkpoint, cam: geom.SphericalCamera) -> optim.TrainState:
    """Rebuild a TrainState from the f64 optimizer archive."""
    z = ckpt.optim_state
    if z is None:
        raise DataError(
            "checkpoint %s has no %s; cannot resume exactly" % (ckpt.path, _OPTIM_FILE)
        )
    cloud = scene.GaussianCloud(
        positions=z["positions"].copy(),
        log_scales=z["log_scales"].copy(),
        rotations=z["rotations"].copy(),
        opacity_logits=z["opacity_logits"].copy(),
        sh_coeffs=z["sh_coeffs"].copy(),
    )
    adam = {}
    for key in z:
        if key.startswith("adam_") and key.endswith("_m"):
            name = key[len("adam_") : -2]
            adam[name] = optim.AdamBlock(
                m=z["adam_%s_m" % name].copy(),
                v=z["adam_%s_v" % name].copy(),
                t=z["adam_%s_t" % name].copy(),
            )
    grid = None
    if "grid_D_raw" in z:
        grid = camera_model.init_grid(cam)
        grid.D_raw = z["grid_D_raw"].copy()
        grid.f_t = float(z["grid_f_t"])
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(bytes(z["rng_state"]).decode("utf-8"))
    stats = grad.DensifyStats(
        norm_sum=z["stats_norm_sum"].copy(), counts=z["stats_counts"].copy()
    )
    return optim.TrainState(
        cloud=cloud,
        qs=z["qs"].copy(),
        ts=z["ts"].copy(),
        grid=grid,
        adam=adam,
        stats=stats,
        iteration=int(z["iteration"]),
        rng=rng,
        epoch_order=z["epoch_order"].copy(),
        epoch_pos=int(z["epoch_pos"]),
        scene_extent=float(z["scene_extent"]),
    )
