"""Binary rasters (flow, inverse depth, mask), KITTI-style pose files, dataset manifests.

Raster container: 4-byte magic, u32 LE width, u32 LE height, then a
row-major payload with no padding.  ``FLO1`` holds two float32 LE values
per pixel (u then v), ``DEP1`` one float32 LE, ``MSK1`` one byte (0 or 1).
Byte-level layout is documented in FORMATS.md.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import CameraModel, EgoMotion, Pose, orthonormalize

MAX_PIXELS = 1 << 26


class FormatError(ValueError):
    pass


_KINDS = {
    b"FLO1": ("<f4", 2),
    b"DEP1": ("<f4", 1),
    b"MSK1": ("u1", 1),
}


def _open(target, mode):
    if isinstance(target, (str, os.PathLike)):
        return open(target, mode), True
    return target, False


def _write_raster(target, magic: bytes, arr: np.ndarray) -> None:
    dtype, ch = _KINDS[magic]
    H, W = arr.shape[:2]
    if H < 1 or W < 1:
        raise FormatError("raster dimensions must be >= 1")
    payload = np.ascontiguousarray(arr.reshape(H, W, ch), dtype=dtype).tobytes()
    f, own = _open(target, "wb")
    try:
        f.write(magic + struct.pack("<II", W, H) + payload)
    finally:
        if own:
            f.close()


def _read_raster(target, magic: bytes) -> np.ndarray:
    dtype, ch = _KINDS[magic]
    f, own = _open(target, "rb")
    try:
        head = f.read(12)
        if len(head) < 12:
            raise FormatError("truncated header")
        if head[:4] != magic:
            raise FormatError(f"bad magic {head[:4]!r}, expected {magic!r}")
        W, H = struct.unpack("<II", head[4:])
        if W < 1 or H < 1 or W * H > MAX_PIXELS:
            raise FormatError(f"implausible raster size {W}x{H}")
        need = W * H * ch * np.dtype(dtype).itemsize
        data = f.read(need)
        if len(data) != need:
            raise FormatError(f"truncated payload: {len(data)} of {need} bytes")
        if f.read(1):
            raise FormatError("trailing bytes after payload")
    finally:
        if own:
            f.close()
    arr = np.frombuffer(data, dtype=dtype).reshape(H, W, ch)
    return arr


def write_flow(target, flow: np.ndarray) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FormatError(f"flow must be (H, W, 2), got {flow.shape}")
    _write_raster(target, b"FLO1", flow)


def read_flow(target) -> np.ndarray:
    arr = _read_raster(target, b"FLO1").astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise FormatError("flow file contains non-finite values")
    return arr


def write_depth(target, rho: np.ndarray) -> None:
    rho = np.asarray(rho)
    if rho.ndim != 2:
        raise FormatError(f"depth raster must be 2-D, got {rho.shape}")
    _write_raster(target, b"DEP1", rho)


def read_depth(target) -> np.ndarray:
    arr = _read_raster(target, b"DEP1")[..., 0].astype(np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise FormatError("inverse depth must be finite and nonnegative")
    return arr


def write_mask(target, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise FormatError(f"mask must be 2-D, got {mask.shape}")
    if mask.dtype != bool and not np.all((mask == 0) | (mask == 1)):
        raise FormatError("mask values must be 0 or 1")
    _write_raster(target, b"MSK1", mask.astype(np.uint8))


def read_mask(target) -> np.ndarray:
    arr = _read_raster(target, b"MSK1")[..., 0]
    if np.any(arr > 1):
        raise FormatError("mask bytes must be 0 or 1")
    return arr.astype(bool)


# --- poses ------------------------------------------------------------------------

def read_pose_file(target) -> list[Pose]:
    f, own = _open(target, "r")
    try:
        lines = f.read().splitlines()
    finally:
        if own:
            f.close()
    poses = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        tok = line.split()
        if len(tok) != 12:
            raise FormatError(f"line {lineno}: expected 12 numbers, got {len(tok)}")
        try:
            vals = np.array([float(t) for t in tok])
        except ValueError as e:
            raise FormatError(f"line {lineno}: non-numeric token ({e})") from None
        if not np.all(np.isfinite(vals)):
            raise FormatError(f"line {lineno}: non-finite value")
        M = vals.reshape(3, 4)
        R = M[:, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-3 or abs(np.linalg.det(R) - 1) > 1e-3:
            raise FormatError(f"line {lineno}: rotation block is not orthonormal")
        poses.append(Pose(orthonormalize(R), M[:, 3]))
    return poses


def format_pose(p: Pose) -> str:
    M = np.hstack([p.R, p.tau[:, None]])
    return " ".join(f"{v:.9e}" for v in M.reshape(-1))


def write_pose_file(target, poses: Iterable[Pose]) -> None:
    f, own = _open(target, "w")
    try:
        for p in poses:
            f.write(format_pose(p) + "\n")
    finally:
        if own:
            f.close()


# --- dataset manifest -------------------------------------------------------------

@dataclass
class ManifestRecord:
    id: str
    flow: str
    depth: str
    mask: str
    obj_flow: str
    ego: EgoMotion


@dataclass
class Manifest:
    camera: CameraModel
    records: list[ManifestRecord]
    poses: str | None = None


def _num(v: float) -> str:
    return f"{v:.17g}"


def write_manifest(target, manifest: Manifest) -> None:
    c = manifest.camera
    f, own = _open(target, "w")
    try:
        f.write("# egoflow dataset v1\n")
        f.write(f"camera {_num(c.f)} {_num(c.cx)} {_num(c.cy)} {c.width} {c.height}\n")
        if manifest.poses:
            f.write(f"poses {manifest.poses}\n")
        for r in manifest.records:
            nums = " ".join(_num(v) for v in (*r.ego.t, *r.ego.omega))
            f.write(f"sample {r.id} {r.flow} {r.depth} {r.mask} {r.obj_flow} {nums}\n")
    finally:
        if own:
            f.close()


def read_manifest(target) -> Manifest:
    f, own = _open(target, "r")
    try:
        lines = f.read().splitlines()
    finally:
        if own:
            f.close()
    camera, poses, records = None, None, []
    for lineno, line in enumerate(lines, 1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        try:
            if tok[0] == "camera" and len(tok) == 6:
                camera = CameraModel(float(tok[1]), float(tok[2]), float(tok[3]),
                                     int(tok[4]), int(tok[5]))
            elif tok[0] == "poses" and len(tok) == 2:
                poses = tok[1]
            elif tok[0] == "sample" and len(tok) == 12:
                vals = [float(v) for v in tok[6:]]
                records.append(ManifestRecord(tok[1], tok[2], tok[3], tok[4], tok[5],
                                              EgoMotion(vals[:3], vals[3:])))
            else:
                raise FormatError(f"manifest line {lineno}: unrecognized record")
        except ValueError as e:
            if isinstance(e, FormatError):
                raise
            raise FormatError(f"manifest line {lineno}: {e}") from None
    if camera is None:
        raise FormatError("manifest has no camera line")
    return Manifest(camera, records, poses)


@dataclass
class LoadedSample:
    id: str
    flow: np.ndarray       # normalized units
    ego: EgoMotion
    rho: np.ndarray
    obj_mask: np.ndarray
    obj_flow: np.ndarray   # normalized units


def load_dataset(directory) -> tuple[Manifest, list[LoadedSample]]:
    """Read a dataset directory; pixel flow files are converted to normalized units."""
    root = Path(directory)
    man = read_manifest(root / "manifest.txt")
    cam = man.camera
    out = []
    for r in man.records:
        flow = cam.to_normalized(read_flow(root / r.flow))
        if flow.shape[:2] != cam.shape:
            raise FormatError(f"sample {r.id}: flow size does not match camera")
        out.append(LoadedSample(r.id, flow, r.ego, read_depth(root / r.depth),
                                read_mask(root / r.mask),
                                cam.to_normalized(read_flow(root / r.obj_flow))))
    return man, out


def write_dataset(directory, cam: CameraModel, samples: Sequence, poses=None) -> Manifest:
    """Write samples (with ``flow``, ``ego``, ``rho``, ``obj_mask``, ``obj_flow``)."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        sid = f"{i:06d}"
        names = (f"{sid}.flo", f"{sid}.dep", f"{sid}.msk", f"{sid}_obj.flo")
        write_flow(root / names[0], cam.to_pixels(s.flow))
        write_depth(root / names[1], s.rho)
        write_mask(root / names[2], s.obj_mask)
        write_flow(root / names[3], cam.to_pixels(s.obj_flow))
        records.append(ManifestRecord(sid, *names, s.ego))
    pose_name = None
    if poses is not None:
        pose_name = "poses.txt"
        write_pose_file(root / pose_name, poses)
    man = Manifest(cam, records, pose_name)
    write_manifest(root / "manifest.txt", man)
    return man
