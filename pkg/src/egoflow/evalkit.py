"""Trajectory metrics (ATE over short snippets, RPE) and the top-k sparsity sweep."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import CameraModel, EgoMotion, Pose, integrate_trajectory, rotation_angle, so3_exp


@dataclass(frozen=True)
class AteOptions:
    snippet: int = 5

    def __post_init__(self):
        if self.snippet < 2:
            raise ValueError("snippet length must be >= 2")


@dataclass
class MetricReport:
    values: np.ndarray
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mean = float(np.mean(self.values)) if self.values.size else 0.0
        self.std = float(np.std(self.values)) if self.values.size else 0.0


def _positions(traj: Sequence[Pose]) -> np.ndarray:
    return np.array([p.tau for p in traj], dtype=np.float64)


def snippet_ate(pred_xyz: np.ndarray, gt_xyz: np.ndarray) -> float:
    """Anchor both snippets at their first frame, fit one scale, return point RMSE."""
    p = pred_xyz - pred_xyz[0]
    g = gt_xyz - gt_xyz[0]
    den = float(np.sum(p * p))
    s = max(float(np.sum(p * g)) / den, 0.0) if den > 0 else 0.0
    d = s * p - g
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def ate(pred: Sequence[Pose], gt: Sequence[Pose], opts: AteOptions | None = None) -> MetricReport:
    opts = opts or AteOptions()
    if len(pred) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(pred)} vs {len(gt)}")
    if len(gt) < opts.snippet:
        raise ValueError(f"need at least {opts.snippet} poses, got {len(gt)}")
    P, G = _positions(pred), _positions(gt)
    n = opts.snippet
    vals = [snippet_ate(P[i:i + n], G[i:i + n]) for i in range(len(gt) - n + 1)]
    return MetricReport(np.array(vals))


def rpe(pred: Sequence[EgoMotion], gt: Sequence[EgoMotion]) -> tuple[MetricReport, MetricReport]:
    """Per-frame translation distance and relative rotation angle."""
    if len(pred) != len(gt):
        raise ValueError(f"motion sequence lengths differ: {len(pred)} vs {len(gt)}")
    te = [float(np.linalg.norm(a.t - b.t)) for a, b in zip(pred, gt)]
    re = [rotation_angle(so3_exp(a.omega) @ so3_exp(b.omega).T) for a, b in zip(pred, gt)]
    return MetricReport(np.array(te)), MetricReport(np.array(re))


def direction_error(t_hat, t) -> float:
    """Angle in radians between two translation directions (0 if either is zero)."""
    a, b = np.linalg.norm(t_hat), np.linalg.norm(t)
    if a == 0 or b == 0:
        return 0.0 if a == b else np.pi / 2
    c = float(np.dot(t_hat, t) / (a * b))
    s = float(np.linalg.norm(np.cross(t_hat, t)) / (a * b))
    return float(np.arctan2(s, c))


def egomotion_error(pred: EgoMotion, gt: EgoMotion) -> float:
    """Scalar error used by the sparsity sweep: ``|t_hat - t| + |omega_hat - omega|``."""
    return float(np.linalg.norm(pred.t - gt.t) + np.linalg.norm(pred.omega - gt.omega))


def trajectory_from_motions(motions: Sequence[EgoMotion]) -> list[Pose]:
    return integrate_trajectory(motions)


@dataclass
class SweepRow:
    k: float
    value: float
    t_dir_deg: float
    omega_err: float


def sparsity_sweep(model, samples: Sequence, cam: CameraModel,
                   ks: Sequence[float] = (100, 50, 25, 10, 5, 2, 1),
                   metric: str = "egomotion", snippet: int = 5) -> list[SweepRow]:
    """Evaluate top-k masked predictions for each k (rows sorted by k descending).

    ``samples`` need ``.flow`` and ``.ego``.  ``metric`` is ``"egomotion"``
    (mean of :func:`egomotion_error`) or ``"ate"`` (samples are consecutive
    frames of one sequence; ATE over snippets of integrated predictions).
    """
    from .mfg import predict_egomotion

    if metric not in ("egomotion", "ate"):
        raise ValueError(f"unknown sweep metric {metric!r}")
    rows = []
    gt = [s.ego for s in samples]
    gt_traj = integrate_trajectory(gt) if metric == "ate" else None
    for k in sorted(ks, reverse=True):
        pred = [predict_egomotion(model, s.flow, cam, k) for s in samples]
        if metric == "ate":
            value = ate(integrate_trajectory(pred), gt_traj, AteOptions(snippet)).mean
        else:
            value = float(np.mean([egomotion_error(p, g) for p, g in zip(pred, gt)]))
        tdir = float(np.degrees(np.median([direction_error(p.t, g.t) for p, g in zip(pred, gt)])))
        werr = float(np.median([np.linalg.norm(p.omega - g.omega) for p, g in zip(pred, gt)]))
        rows.append(SweepRow(float(k), value, tdir, werr))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], stream) -> None:
    stream.write("k,metric,t_dir_deg,omega_err\n")
    for r in rows:
        stream.write(f"{r.k:.9g},{r.value:.9g},{r.t_dir_deg:.9g},{r.omega_err:.9g}\n")


def write_metric_csv(report: MetricReport, stream, label: str = "ate") -> None:
    stream.write(f"snippet_index,{label}\n")
    for i, v in enumerate(report.values):
        stream.write(f"{i},{v:.9g}\n")
