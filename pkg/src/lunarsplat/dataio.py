"""Dataset and checkpoint I/O.

Formats are chosen for exact round-trips: binary PPM/PGM images, raw
little-endian float32 depth with a one-line text header, a line-based
manifest with shortest-round-trip float formatting, and binary
little-endian PLY for Gaussian checkpoints and labeled point clouds.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError, InvalidConfigError
from .evaluation import LabeledCloud
from .scene_core import Camera, Frame, GaussianArrays, Pose

MANIFEST_NAME = "manifest.txt"
CONFIG_COPY_NAME = "config.toml"


# --- images -------------------------------------------------------------------

def write_ppm(path, rgb: np.ndarray):
    """8-bit binary PPM (P6) from floats in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    h, w = rgb.shape[:2]
    data = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise DataError(f"{path}: not a binary PPM")
        dims = f.readline().split()
        maxval = f.readline().strip()
        if len(dims) != 2 or maxval != b"255":
            raise DataError(f"{path}: unsupported PPM header")
        w, h = int(dims[0]), int(dims[1])
        raw = f.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise DataError(f"{path}: truncated PPM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3) / 255.0


def write_pgm(path, values: np.ndarray):
    """8-bit binary PGM (P5); booleans map to 0/255."""
    arr = np.asarray(values)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise DataError(f"{path}: not a binary PGM")
        dims = f.readline().split()
        maxval = f.readline().strip()
        if len(dims) != 2 or maxval != b"255":
            raise DataError(f"{path}: unsupported PGM header")
        w, h = int(dims[0]), int(dims[1])
        raw = f.read(w * h)
    if len(raw) != w * h:
        raise DataError(f"{path}: truncated PGM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


def write_depth_raw(path, depth: np.ndarray, scale: float = 1.0):
    """Little-endian float32 raster after a 'width height scale' text line.

    Invalid pixels are expected to be encoded as 0 by the caller (with a
    separate validity plane).
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(f"{w} {h} {_fmt(scale)}\n".encode())
        f.write((depth * scale).astype("<f4").tobytes())


def read_depth_raw(path):
    with open(path, "rb") as f:
        header = f.readline().split()
        if len(header) != 3:
            raise DataError(f"{path}: bad depth header")
        w, h, scale = int(header[0]), int(header[1]), float(header[2])
        raw = f.read(w * h * 4)
    if len(raw) != w * h * 4:
        raise DataError(f"{path}: truncated depth payload")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float64) / scale


# --- PLY ------------------------------------------------------------------------

_GAUSSIAN_PROPS = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                   ("scale_0", "<f4"), ("scale_1", "<f4"), ("scale_2", "<f4"),
                   ("rot_0", "<f4"), ("rot_1", "<f4"), ("rot_2", "<f4"), ("rot_3", "<f4"),
                   ("opacity", "<f4"),
                   ("red", "<f4"), ("green", "<f4"), ("blue", "<f4"),
                   ("label", "u1")]

_CLOUD_PROPS = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                ("red", "<f4"), ("green", "<f4"), ("blue", "<f4"),
                ("label", "u1")]

_PLY_TYPES = {"<f4": "float", "u1": "uchar"}
_PLY_TYPES_REV = {"float": "<f4", "uchar": "u1", "float32": "<f4", "uint8": "u1"}


def _write_ply(path, props, record: np.ndarray):
    lines = ["ply", "format binary_little_endian 1.0",
             f"element vertex {record.shape[0]}"]
    lines += [f"property {_PLY_TYPES[t]} {n}" for n, t in props]
    lines.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode())
        f.write(record.tobytes())


def read_ply(path):
    """Binary little-endian PLY -> structured array of vertex properties."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise DataError(f"{path}: not a PLY file")
        props = []
        count = None
        while True:
            line = f.readline()
            if not line:
                raise DataError(f"{path}: missing end_header")
            parts = line.split()
            if parts[0] == b"format":
                if parts[1] != b"binary_little_endian":
                    raise DataError(f"{path}: only binary little-endian PLY supported")
            elif parts[0] == b"element":
                if parts[1] != b"vertex":
                    raise DataError(f"{path}: unsupported element {parts[1]!r}")
                count = int(parts[2])
            elif parts[0] == b"property":
                tname = parts[1].decode()
                if tname not in _PLY_TYPES_REV:
                    raise DataError(f"{path}: unsupported property type {tname}")
                props.append((parts[2].decode(), _PLY_TYPES_REV[tname]))
            elif parts[0] == b"end_header":
                break
        if count is None:
            raise DataError(f"{path}: missing vertex element")
        dtype = np.dtype(props)
        raw = f.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise DataError(f"{path}: truncated PLY payload")
    return np.frombuffer(raw, dtype=dtype)


def write_gaussian_ply(path, arrays: GaussianArrays):
    rec = np.empty(len(arrays), dtype=np.dtype(_GAUSSIAN_PROPS))
    rec["x"], rec["y"], rec["z"] = arrays.means.T.astype("<f4")
    for k in range(3):
        rec[f"scale_{k}"] = arrays.log_scales[:, k].astype("<f4")
    for k in range(4):
        rec[f"rot_{k}"] = arrays.rotations[:, k].astype("<f4")
    rec["opacity"] = arrays.opacity_logits.astype("<f4")
    rec["red"], rec["green"], rec["blue"] = arrays.colors.T.astype("<f4")
    rec["label"] = arrays.labels
    _write_ply(path, _GAUSSIAN_PROPS, rec)


def read_gaussian_ply(path) -> GaussianArrays:
    rec = read_ply(path)
    needed = {n for n, _ in _GAUSSIAN_PROPS}
    if not needed.issubset(rec.dtype.names):
        raise DataError(f"{path}: not a Gaussian checkpoint PLY")
    n = rec.shape[0]
    return GaussianArrays(
        np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64),
        np.stack([rec[f"scale_{k}"] for k in range(3)], axis=1).astype(np.float64),
        np.stack([rec[f"rot_{k}"] for k in range(4)], axis=1).astype(np.float64),
        rec["opacity"].astype(np.float64),
        np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.float64),
        rec["label"],
    )


def write_cloud_ply(path, cloud: LabeledCloud):
    rec = np.empty(len(cloud), dtype=np.dtype(_CLOUD_PROPS))
    rec["x"], rec["y"], rec["z"] = cloud.points.T.astype("<f4")
    colors = cloud.colors if cloud.colors is not None else np.zeros((len(cloud), 3))
    rec["red"], rec["green"], rec["blue"] = colors.T.astype("<f4")
    rec["label"] = cloud.labels
    _write_ply(path, _CLOUD_PROPS, rec)


def read_cloud_ply(path) -> LabeledCloud:
    rec = read_ply(path)
    if not {"x", "y", "z", "label"}.issubset(rec.dtype.names):
        raise DataError(f"{path}: not a labeled cloud PLY")
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    colors = None
    if {"red", "green", "blue"}.issubset(rec.dtype.names):
        colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.float64)
    return LabeledCloud(pts, rec["label"], colors)


def is_gaussian_ply(path) -> bool:
    rec = read_ply(path)
    return "opacity" in (rec.dtype.names or ())


# --- manifest / dataset ---------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class FrameRecord:
    index: int
    time: float
    pose: Pose
    planes: dict  # name -> relative path


@dataclass
class DatasetMeta:
    seed: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    near: float
    far: float
    frames: list


def write_manifest(path, meta: DatasetMeta):
    lines = ["lunarsplat-dataset 1",
             f"seed {meta.seed}",
             f"size {meta.width} {meta.height}",
             ("intrinsics " + " ".join(_fmt(v) for v in
                                       (meta.fx, meta.fy, meta.cx, meta.cy,
                                        meta.near, meta.far))),
             f"frames {len(meta.frames)}"]
    for fr in meta.frames:
        R = fr.pose.rotation.reshape(-1)
        t = fr.pose.translation
        parts = ["frame", str(fr.index), _fmt(fr.time)]
        parts += [_fmt(v) for v in R] + [_fmt(v) for v in t]
        parts += [fr.planes["rgb"], fr.planes["depth"], fr.planes["labels"],
                  fr.planes["valid"]]
        if "est_depth" in fr.planes:
            parts += [fr.planes["est_depth"], fr.planes["est_valid"],
                      fr.planes["est_labels"]]
        lines.append(" ".join(parts))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetMeta:
    try:
        with open(path) as f:
            lines = [ln.rstrip("\n") for ln in f]
    except OSError as exc:
        raise DataError(f"cannot read manifest: {exc}") from exc
    if not lines or lines[0] != "lunarsplat-dataset 1":
        raise DataError(f"{path}: unknown manifest format")
    seed = width = height = None
    intr = None
    frames = []
    for ln in lines[1:]:
        if not ln:
            continue
        parts = ln.split()
        if parts[0] == "seed":
            seed = int(parts[1])
        elif parts[0] == "size":
            width, height = int(parts[1]), int(parts[2])
        elif parts[0] == "intrinsics":
            intr = [float(v) for v in parts[1:7]]
        elif parts[0] == "frames":
            pass
        elif parts[0] == "frame":
            idx = int(parts[1])
            tstamp = float(parts[2])
            vals = [float(v) for v in parts[3:15]]
            pose = Pose(np.array(vals[:9]).reshape(3, 3), np.array(vals[9:12]))
            paths = parts[15:]
            if len(paths) not in (4, 7):
                raise DataError(f"{path}: frame {idx} lists {len(paths)} planes")
            planes = {"rgb": paths[0], "depth": paths[1], "labels": paths[2],
                      "valid": paths[3]}
            if len(paths) == 7:
                planes.update(est_depth=paths[4], est_valid=paths[5],
                              est_labels=paths[6])
            frames.append(FrameRecord(idx, tstamp, pose, planes))
        else:
            raise DataError(f"{path}: unknown manifest line {parts[0]!r}")
    if seed is None or width is None or intr is None:
        raise DataError(f"{path}: incomplete manifest header")
    return DatasetMeta(seed, width, height, *intr, frames=frames)


MODES = ("gtgt", "estgt", "gtest", "estest")


class FrameDataset:
    """Frames from a generated dataset directory under a chosen input mode.

    Mode selects which planes feed the mapper: gt or estimated depth crossed
    with gt or estimated labels. RGB is always the rendered sensor image.
    """

    def __init__(self, root, mode: str = "gtgt"):
        if mode not in MODES:
            raise InvalidConfigError(f"unknown input mode {mode!r}")
        self.root = root
        self.mode = mode
        self.meta = read_manifest(os.path.join(root, MANIFEST_NAME))
        if mode != "gtgt":
            for fr in self.meta.frames:
                if "est_depth" not in fr.planes:
                    raise DataError(
                        f"dataset lacks corrupted planes needed for mode {mode}")

    def __len__(self):
        return len(self.meta.frames)

    def camera(self, index: int) -> Camera:
        m = self.meta
        fr = m.frames[index]
        return Camera(m.fx, m.fy, m.cx, m.cy, m.width, m.height, fr.pose,
                      m.near, m.far)

    def _load(self, index: int, depth_plane: str, valid_plane: str,
              label_plane: str) -> Frame:
        fr = self.meta.frames[index]
        root = self.root
        rgb = read_ppm(os.path.join(root, fr.planes["rgb"]))
        depth = read_depth_raw(os.path.join(root, fr.planes[depth_plane]))
        valid = read_pgm(os.path.join(root, fr.planes[valid_plane])) > 0
        labels = read_pgm(os.path.join(root, fr.planes[label_plane]))
        return Frame(rgb=rgb, depth=depth, validity=valid, labels=labels,
                     camera=self.camera(index))

    def load(self, index: int) -> Frame:
        use_est_depth = self.mode in ("estgt", "estest")
        use_est_labels = self.mode in ("gtest", "estest")
        return self._load(index,
                          "est_depth" if use_est_depth else "depth",
                          "est_valid" if use_est_depth else "valid",
                          "est_labels" if use_est_labels else "labels")

    def load_truth(self, index: int) -> Frame:
        return self._load(index, "depth", "valid", "labels")
