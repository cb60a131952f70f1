"""Flow color coding (Middlebury 55-bin wheel), trajectory plots, P6 pixmaps."""

from __future__ import annotations

import os
from typing import Sequence

import numpy as np

# segment lengths of the wheel: red-yellow, yellow-green, green-cyan,
# cyan-blue, blue-magenta, magenta-red
RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6


def make_colorwheel() -> np.ndarray:
    """``(55, 3)`` float wheel with values in [0, 255]."""
    ncols = RY + YG + GC + CB + BM + MR
    wheel = np.zeros((ncols, 3))
    col = 0
    wheel[col:col + RY, 0] = 255
    wheel[col:col + RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col:col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col:col + YG, 1] = 255
    col += YG
    wheel[col:col + GC, 1] = 255
    wheel[col:col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col:col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col:col + CB, 2] = 255
    col += CB
    wheel[col:col + BM, 2] = 255
    wheel[col:col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col:col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col:col + MR, 0] = 255
    return wheel


_WHEEL = make_colorwheel()


def wheel_color(angle: np.ndarray) -> np.ndarray:
    """Saturated wheel color in [0, 1] for ``angle = atan2(-v, -u)``, any real angle."""
    ncols = _WHEEL.shape[0]
    a = np.mod(np.asarray(angle, dtype=np.float64) + np.pi, 2 * np.pi) / np.pi - 1.0
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = k0 + 1
    k1[k1 == ncols] = 0
    f = (fk - k0)[..., None]
    return ((1 - f) * _WHEEL[k0] + f * _WHEEL[k1]) / 255.0


def flow_to_image(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """``(H, W, 3)`` uint8 image; hue from direction, saturation from magnitude."""
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(mag.max()) if mag.size else 0.0
    if not max_magnitude > 0:
        return np.full(flow.shape[:2] + (3,), 255, dtype=np.uint8)
    rad = np.minimum(mag / max_magnitude, 1.0)[..., None]
    col = wheel_color(np.atleast_1d(np.arctan2(-v, -u)))
    col = 1 - rad * (1 - col)
    return np.floor(255 * col + 0.5).astype(np.uint8)


def mask_to_image(mask: np.ndarray) -> np.ndarray:
    img = np.where(np.asarray(mask, dtype=bool)[..., None], 0, 255)
    return np.broadcast_to(img, mask.shape + (3,)).astype(np.uint8)


_PALETTE = np.array([[0, 0, 0], [220, 40, 40], [40, 90, 220], [30, 160, 60],
                     [200, 120, 0], [140, 40, 180]], dtype=np.uint8)


def _line(img, r0, c0, r1, c1, color):
    # Bresenham
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr, sc = (1 if r1 > r0 else -1), (1 if c1 > c0 else -1)
    err = dc - dr
    H, W = img.shape[:2]
    while True:
        if 0 <= r0 < H and 0 <= c0 < W:
            img[r0, c0] = color
        if r0 == r1 and c0 == c1:
            break
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c0 += sc
        if e2 < dc:
            err += dc
            r0 += sr


def trajectory_plot(trajs: Sequence[Sequence], labels: Sequence[str] | None = None,
                    size: int = 256) -> np.ndarray:
    """Top-down (x right, z up) polylines, one palette color per trajectory.

    Labels only pick colors (no text rendering); trajectory ``i`` uses the
    palette color of label index ``i``.
    """
    if not trajs or any(len(t) == 0 for t in trajs):
        raise ValueError("need at least one nonempty trajectory")
    pts = [np.array([[p.tau[0], p.tau[2]] for p in t]) for t in trajs]
    allp = np.vstack(pts)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    lo, hi = lo - 0.05 * span, hi + 0.05 * span
    span = hi - lo
    img = np.full((size, size, 3), 255, dtype=np.uint8)

    def to_px(xz):
        c = np.round((xz[:, 0] - lo[0]) / span[0] * (size - 1)).astype(int)
        r = np.round((1 - (xz[:, 1] - lo[1]) / span[1]) * (size - 1)).astype(int)
        return r, c

    for i, xz in enumerate(pts):
        color = _PALETTE[i % len(_PALETTE)]
        r, c = to_px(xz)
        for j in range(len(r) - 1):
            _line(img, r[j], c[j], r[j + 1], c[j + 1], color)
        for rr, cc in zip(r, c):
            img[max(rr - 1, 0):rr + 2, max(cc - 1, 0):cc + 2] = color
    return img


def encode_p6(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {image.shape}")
    H, W = image.shape[:2]
    if H == 0 or W == 0:
        raise ValueError("image must have nonzero width and height")
    return f"P6\n{W} {H}\n255\n".encode("ascii") + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def write_raster(image: np.ndarray, path: str | os.PathLike) -> None:
    data = encode_p6(image)
    with open(path, "wb") as f:
        f.write(data)
