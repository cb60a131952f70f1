"""Synthetic dynamic scenes: ground plane, fronto-parallel boxes, moving objects.

Each sample draws its randomness from a Philox generator keyed by
``(seed, sample index, purpose)``, so any sample can be regenerated on its
own and in any order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import CameraModel, EgoMotion, integrate_trajectory, motion_field

_TAGS = {"ego": 1, "scene": 2, "objects": 3, "noise": 4, "sequence": 5}


@dataclass(frozen=True)
class SceneConfig:
    width: int = 48
    height: int = 16
    focal: float | None = None
    depth_range: tuple[float, float] = (4.0, 50.0)
    camera_height: float = 1.5
    boxes: tuple[int, int] = (0, 5)
    t_mag: tuple[float, float] = (0.0, 1.5)
    forward_bias: float = 3.0
    omega_mag: tuple[float, float] = (0.0, 0.05)
    yaw_bias: float = 3.0
    objects: tuple[int, int] = (0, 3)
    object_flow: tuple[float, float] = (0.0, 1.0)
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    outlier_range: float = 0.5
    max_object_area: float = 0.25
    smoothing: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("scene images must be at least 8x8")
        for name in ("depth_range", "boxes", "t_mag", "omega_mag", "objects", "object_flow"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be a nonempty nonnegative range, got {(lo, hi)}")
        if self.depth_range[0] <= 0:
            raise ValueError("depths must be positive")
        if self.boxes[1] > 5 or self.objects[1] > 3:
            raise ValueError("at most 5 boxes and 3 objects")
        if not 0 <= self.outlier_fraction <= 1 or self.noise_sigma < 0:
            raise ValueError("bad noise settings")
        if not 0 <= self.smoothing < 1:
            raise ValueError("smoothing must be in [0, 1)")

    def camera(self) -> CameraModel:
        f = self.focal if self.focal is not None else self.width / 2.0
        return CameraModel(f, (self.width - 1) / 2.0, (self.height - 1) / 2.0,
                           self.width, self.height)

    def with_(self, **kw) -> "SceneConfig":
        return replace(self, **kw)


@dataclass
class SceneSample:
    flow: np.ndarray          # observed flow, normalized units
    ego: EgoMotion
    rho: np.ndarray           # inverse depth
    obj_mask: np.ndarray      # bool
    obj_flow: np.ndarray      # zero off obj_mask
    clean_flow: np.ndarray    # motion field + object flow, before noise


def rng_for(seed: int, index: int, purpose: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence([seed & 0xFFFFFFFF, index, _TAGS[purpose]])))


def sample_egomotion(cfg: SceneConfig, rng: np.random.Generator) -> EgoMotion:
    d = rng.normal(size=3) + np.array([0.0, 0.0, cfg.forward_bias])
    d /= np.linalg.norm(d)
    t = d * rng.uniform(*cfg.t_mag)
    a = rng.normal(size=3) * np.array([1.0, cfg.yaw_bias, 1.0])
    a /= np.linalg.norm(a)
    w = a * rng.uniform(*cfg.omega_mag)
    return EgoMotion(t, w)


def _rect(rng, cfg: SceneConfig, max_frac: float):
    H, W = cfg.height, cfg.width
    area = rng.uniform(0.02, max_frac) * H * W
    aspect = rng.uniform(0.5, 2.0)
    h = int(np.clip(round(np.sqrt(area / aspect)), 2, H))
    w = int(np.clip(round(area / h), 2, W))
    r0 = int(rng.integers(0, H - h + 1))
    c0 = int(rng.integers(0, W - w + 1))
    return r0, c0, h, w


def scene_depth(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Depth map: ground plane below the camera, far wall above the horizon, boxes."""
    cam = cfg.camera()
    zmin, zmax = cfg.depth_range
    _, y = cam.normalized_grid()
    with np.errstate(divide="ignore"):
        ground = np.where(y > 0, cfg.camera_height / np.where(y > 0, y, 1.0), zmax)
    depth = np.clip(ground, zmin, zmax)
    for _ in range(int(rng.integers(cfg.boxes[0], cfg.boxes[1] + 1))):
        r0, c0, h, w = _rect(rng, cfg, 0.15)
        z = rng.uniform(zmin, zmax)
        patch = depth[r0:r0 + h, c0:c0 + w]
        np.minimum(patch, z, out=patch)
    return depth


def add_objects(cfg: SceneConfig, depth: np.ndarray, rng: np.random.Generator):
    """Paint moving boxes into ``depth``; returns ``(mask, object flow)``."""
    H, W = cfg.height, cfg.width
    mask = np.zeros((H, W), dtype=bool)
    oflow = np.zeros((H, W, 2))
    zmin, zmax = cfg.depth_range
    n = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))
    budget = cfg.max_object_area * H * W
    for _ in range(n):
        r0, c0, h, w = _rect(rng, cfg, min(0.12, cfg.max_object_area))
        region = np.zeros_like(mask)
        region[r0:r0 + h, c0:c0 + w] = True
        if np.sum(mask | region) > budget:
            continue
        z = rng.uniform(zmin, min(zmax, 4.0 * zmin))
        ang = rng.uniform(0, 2 * np.pi)
        mag = rng.uniform(*cfg.object_flow)
        depth[region] = z
        oflow[region] = mag * np.array([np.cos(ang), np.sin(ang)])
        mask |= region
    oflow[~mask] = 0.0
    return mask, oflow


def make_sample(cfg: SceneConfig, index: int, ego: EgoMotion | None = None) -> SceneSample:
    cam = cfg.camera()
    if ego is None:
        ego = sample_egomotion(cfg, rng_for(cfg.seed, index, "ego"))
    depth = scene_depth(cfg, rng_for(cfg.seed, index, "scene"))
    mask, oflow = add_objects(cfg, depth, rng_for(cfg.seed, index, "objects"))
    rho = 1.0 / depth
    clean = motion_field(ego, rho, cam) + oflow
    flow = clean.copy()
    nrng = rng_for(cfg.seed, index, "noise")
    if cfg.noise_sigma > 0:
        flow += nrng.normal(scale=cfg.noise_sigma, size=flow.shape)
    if cfg.outlier_fraction > 0:
        out = nrng.random(cam.shape) < cfg.outlier_fraction
        flow[out] = nrng.uniform(-cfg.outlier_range, cfg.outlier_range, size=(int(out.sum()), 2))
    return SceneSample(flow, ego, rho, mask, oflow, clean)


def generate(cfg: SceneConfig, n: int) -> list[SceneSample]:
    if n < 1:
        raise ValueError("need n >= 1")
    return [make_sample(cfg, i) for i in range(n)]


def sequence_motions(cfg: SceneConfig, length: int) -> list[EgoMotion]:
    """Low-pass filtered egomotion samples, ``length - 1`` of them."""
    rng = rng_for(cfg.seed, 0, "sequence")
    a = cfg.smoothing
    t = w = None
    out = []
    for _ in range(length - 1):
        m = sample_egomotion(cfg, rng)
        if t is None:
            t, w = m.t.copy(), m.omega.copy()
        else:
            t = a * t + (1 - a) * m.t
            w = a * w + (1 - a) * m.omega
        out.append(EgoMotion(t, w))
    return out


def generate_sequence(cfg: SceneConfig, length: int):
    """Returns ``(samples, trajectory)``; sample ``i`` is the flow from frame i to i+1."""
    if length < 2:
        raise ValueError("a sequence needs at least two frames")
    motions = sequence_motions(cfg, length)
    samples = [make_sample(cfg, i, ego=m) for i, m in enumerate(motions)]
    return samples, integrate_trajectory(motions)
