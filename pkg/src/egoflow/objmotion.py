"""Independent object motion from the residual of observed flow and predicted egomotion.

Two masks are combined:

* average thresholding keeps pixels whose squared residual beats
  ``theta_d * mean(tanh(|r|^2))``;
* divisive normalization rescales the squared residual by its frame maximum,
  damps it by ``tanh(depth)^2``, renormalizes, suppresses non-maximal values
  and thresholds against ``theta_p`` times the mean, restricted to pixels
  nearer than ``depth_gate`` (depth normalized to [0, 1]).

"max" and "avg" are global over the frame; all products are elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import check_flow


@dataclass(frozen=True)
class ObjMotionParams:
    theta_d: float = 1.5
    theta_p: float = 0.5
    depth_gate: float = 0.2

    def __post_init__(self):
        if not (self.theta_d > 0 and self.theta_p > 0):
            raise ValueError("thresholds must be positive")
        if not 0 < self.depth_gate <= 1:
            raise ValueError("depth_gate must be in (0, 1]")


@dataclass
class ObjectResult:
    residual: np.ndarray
    mask: np.ndarray
    velocity: np.ndarray
    filter1: np.ndarray
    filter2: np.ndarray


def residual(flow, pred_t, pred_w, rho) -> np.ndarray:
    flow, pred_t, pred_w = check_flow(flow), check_flow(pred_t), check_flow(pred_w)
    rho = np.asarray(rho, dtype=np.float64)
    if not (flow.shape == pred_t.shape == pred_w.shape and rho.shape == flow.shape[:2]):
        raise ValueError("residual: flow, predictions and inverse depth must share a grid")
    return flow - (rho[..., None] * pred_t + pred_w)


def filter1(r: np.ndarray, theta_d: float = 1.5) -> np.ndarray:
    e = np.sum(np.square(r), axis=-1)
    return e > theta_d * np.mean(np.tanh(e))


def normalized_depth(rho: np.ndarray) -> np.ndarray:
    """``1/rho`` scaled to [0, 1] by the frame max; rho=0 pixels get the max depth."""
    rho = np.asarray(rho, dtype=np.float64)
    pos = rho > 0
    if not np.any(pos):
        return np.ones_like(rho)
    d = np.empty_like(rho)
    d[pos] = 1.0 / rho[pos]
    dmax = d[pos].max()
    d[~pos] = dmax
    return d / dmax


def divisive_stages(r: np.ndarray, d: np.ndarray):
    """The normalization stages; returns ``(r1, r2, rs)`` or None when degenerate."""
    e = np.sum(np.square(r), axis=-1)
    emax = e.max()
    if not emax > 0:
        return None
    r1 = e / emax
    r2 = r1 * np.tanh(d) ** 2
    m2 = r2.max()
    if not m2 > 0:
        return None
    r2 = r2 / m2
    rs = r2 / (1.0 + (r2.max() - r2) ** 2)
    return r1, r2, rs


def filter2(r: np.ndarray, d: np.ndarray, theta_p: float = 0.5,
            depth_gate: float = 0.2) -> np.ndarray:
    """``d`` must already be normalized to [0, 1]."""
    d = np.asarray(d, dtype=np.float64)
    stages = divisive_stages(r, d)
    if stages is None:
        return np.zeros(d.shape, dtype=bool)
    rs = stages[2]
    return (rs > theta_p * np.mean(rs)) & (d < depth_gate)


def extract_object_motion(flow, pred_t, pred_w, rho,
                          params: ObjMotionParams | None = None) -> ObjectResult:
    params = params or ObjMotionParams()
    r = residual(flow, pred_t, pred_w, rho)
    f1 = filter1(r, params.theta_d)
    f2 = filter2(r, normalized_depth(rho), params.theta_p, params.depth_gate)
    mask = f1 & f2
    vel = np.where(mask[..., None], r, 0.0)
    return ObjectResult(r, mask, vel, f1, f2)
