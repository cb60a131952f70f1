"""Recover egomotion parameters from motion fields or from raw flow.

Two routes live here:

* closed form: given separated translational (unit inverse depth) and
  rotational fields, ``t`` and ``omega`` are plain linear least squares over
  the stacked ``2N x 3`` systems ``A t = v_t`` and ``B omega = v_omega``;
* robust: given a single observed flow, minimize the depth-free residual
  ``sum_p huber(n_p^T (B(p) omega - v(p)))`` where ``n_p`` is the unit vector
  perpendicular to ``A(p) t``.  Translation is searched on the unit sphere
  (Fibonacci grid, then local refinement); for each candidate ``omega``
  follows from iteratively reweighted least squares.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import CameraModel, EgoMotion, a_stack, b_stack, check_flow


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class RobustSolveOptions:
    coarse_grid: int = 1000
    refine_iters: int = 20
    huber_delta: float = 0.05
    inlier_fraction_floor: float = 0.5
    irls_iters: int = 5

    def __post_init__(self):
        for name in ("coarse_grid", "refine_iters", "huber_delta",
                     "inlier_fraction_floor", "irls_iters"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.inlier_fraction_floor > 1:
            raise ValueError("inlier_fraction_floor must be <= 1")


@dataclass
class SolveReport:
    ego: EgoMotion
    residual_rms: float
    inlier_mask: np.ndarray | None = None
    degenerate: bool = False
    ambiguous: bool = False
    objective: float = 0.0


# --- closed form ----------------------------------------------------------------

def _lstsq_normal(M: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``min ||M x - b||`` via normal equations; M is ``(n, 2, 3)``."""
    M2 = M.reshape(-1, 3)
    b2 = b.reshape(-1)
    N = M2.T @ M2
    # scale-aware rank test on the 3x3 normal matrix
    ev = np.linalg.eigvalsh(N)
    if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
        raise DegenerateInputError("normal matrix is rank deficient (need >= 3 distinct points)")
    rhs = M2.T @ b2
    L = np.linalg.cholesky(N)
    y = np.linalg.solve(L, rhs)
    x = np.linalg.solve(L.T, y)
    # one step of iterative refinement keeps the round trip at ~1e-15
    r = rhs - N @ x
    x = x + np.linalg.solve(L.T, np.linalg.solve(L, r))
    return x


def recover_translation(v_t: np.ndarray, cam: CameraModel) -> np.ndarray:
    v_t = check_flow(v_t, cam)
    return _lstsq_normal(a_stack(cam).reshape(-1, 2, 3), v_t)


def recover_rotation(v_w: np.ndarray, cam: CameraModel) -> np.ndarray:
    v_w = check_flow(v_w, cam)
    return _lstsq_normal(b_stack(cam).reshape(-1, 2, 3), v_w)


def depth_from_flow(flow: np.ndarray, ego: EgoMotion, cam: CameraModel) -> np.ndarray:
    """Per-pixel minimizer of ``||rho A t + B omega - v||`` over rho >= 0."""
    flow = check_flow(flow, cam)
    if not np.linalg.norm(ego.t) > 0:
        raise DegenerateInputError("depth is unobservable for zero translation")
    At = a_stack(cam) @ ego.t
    resid = flow - b_stack(cam) @ ego.omega
    den = np.sum(At * At, axis=-1)
    num = np.sum(At * resid, axis=-1)
    ok = den >= 1e-12
    rho = np.zeros(cam.shape)
    rho[ok] = num[ok] / den[ok]
    return np.maximum(rho, 0.0)


# --- robust route ---------------------------------------------------------------

def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _huber(e: np.ndarray, delta: float) -> np.ndarray:
    if np.isinf(delta):
        return 0.5 * e * e
    a = np.abs(e)
    return np.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))


class _Problem:
    """Precomputed per-pixel quantities for the robust objective."""

    def __init__(self, flow: np.ndarray, cam: CameraModel, opts: RobustSolveOptions):
        self.A = a_stack(cam).reshape(-1, 2, 3)
        self.B = b_stack(cam).reshape(-1, 2, 3)
        self.v = flow.reshape(-1, 2)
        self.opts = opts
        self.n = self.v.shape[0]
        self.keep = max(3, int(np.ceil(opts.inlier_fraction_floor * self.n)))

    def normals(self, T: np.ndarray):
        """Unit perpendiculars of ``A(p) t`` for candidates ``T`` (k, 3)."""
        At = np.einsum("pij,kj->kpi", self.A, T)
        perp = np.stack([-At[..., 1], At[..., 0]], axis=-1)
        norm = np.linalg.norm(perp, axis=-1)
        valid = norm > 1e-9
        perp = perp / np.where(valid, norm, 1.0)[..., None]
        return perp, valid

    def solve_candidates(self, T: np.ndarray):
        """Best omega and robust objective for each translation candidate."""
        perp, valid = self.normals(T)
        # residual e = G omega - y per pixel, G = n^T B, y = n^T v
        G = np.einsum("kpi,pij->kpj", perp, self.B)
        y = np.einsum("kpi,pi->kp", perp, self.v)
        w = valid.astype(np.float64)
        omega = np.zeros((T.shape[0], 3))
        delta = self.opts.huber_delta
        for _ in range(self.opts.irls_iters):
            GW = G * w[..., None]
            N = np.einsum("kpi,kpj->kij", GW, G) + 1e-15 * np.eye(3)
            rhs = np.einsum("kpi,kp->ki", GW, y)
            omega = np.linalg.solve(N, rhs[..., None])[..., 0]
            e = np.einsum("kpj,kj->kp", G, omega) - y
            a = np.abs(e)
            w = np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300)) * self._used(a, valid)
        e = np.einsum("kpj,kj->kp", G, omega) - y
        used = self._used(np.abs(e), valid)
        # rejected pixels cost a constant, so dropping one never pays more than keeping it
        cap = _huber(np.array(3.0 * delta), delta)
        cost = np.sum(np.where(used, _huber(e, delta), cap * valid), axis=1)
        cost = cost / np.maximum(valid.sum(axis=1), 1)
        return omega, cost, e, valid

    def _used(self, a, valid):
        """Pixels within three Huber widths, topped up to the inlier floor."""
        delta = self.opts.huber_delta
        inlier = (a <= 3.0 * delta) & valid
        short = inlier.sum(axis=1) < self.keep
        if np.any(short):
            big = np.where(valid, a, np.inf)
            order = np.argsort(big[short], axis=1, kind="stable")[:, :self.keep]
            fix = np.zeros_like(inlier[short])
            np.put_along_axis(fix, order, True, axis=1)
            inlier[short] = fix & valid[short]
        return inlier


def _tangent_basis(t: np.ndarray):
    helper = np.array([1.0, 0.0, 0.0]) if abs(t[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(t, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(t, e1)
    return e1, e2


def _refine(prob: _Problem, t: np.ndarray, step: float):
    """Coordinate descent in the tangent plane at ``t``, halving the step when stuck."""
    opts = prob.opts
    best_cost = prob.solve_candidates(t[None])[1][0]
    halvings = 0
    for _ in range(opts.refine_iters * 4):
        if halvings >= 10 + opts.refine_iters // 2:
            break
        e1, e2 = _tangent_basis(t)
        cands = np.array([t + step * e1, t - step * e1, t + step * e2, t - step * e2])
        cands /= np.linalg.norm(cands, axis=1, keepdims=True)
        c = prob.solve_candidates(cands)[1]
        j = int(np.argmin(c))
        if c[j] < best_cost:
            t, best_cost = cands[j], c[j]
        else:
            step *= 0.5
            halvings += 1
    return t


def _grid_costs(prob: _Problem, grid: np.ndarray) -> np.ndarray:
    costs = np.empty(len(grid))
    chunk = 64
    for s in range(0, len(grid), chunk):
        costs[s:s + chunk] = prob.solve_candidates(grid[s:s + chunk])[1]
    return costs


def robust_egomotion(flow: np.ndarray, cam: CameraModel,
                     opts: RobustSolveOptions | None = None) -> SolveReport:
    opts = opts or RobustSolveOptions()
    flow = check_flow(flow, cam)
    if flow.shape[0] * flow.shape[1] < 6:
        raise DegenerateInputError("need at least 6 pixels")
    if not np.any(flow):
        return SolveReport(EgoMotion([0.0, 0.0, 1.0], np.zeros(3)), 0.0,
                           np.ones(cam.shape, dtype=bool), degenerate=True)

    grid = fibonacci_sphere(opts.coarse_grid)
    # t and -t share the objective; search one hemisphere and fix the sign later
    grid = grid[(grid[:, 2] > 0) | ((grid[:, 2] == 0) & (grid[:, 0] >= 0))]
    prob = _Problem(flow, cam, opts)
    costs = _grid_costs(prob, grid)
    t = grid[int(np.argmin(costs))]  # first index wins ties
    scale = np.mean(np.sum(prob.v ** 2, axis=1))
    ambiguous = (costs.max() - costs.min()) <= 1e-10 * max(scale, 1e-300)

    if not ambiguous:
        step = 0.5 * np.sqrt(4.0 * np.pi / opts.coarse_grid)
        t = _refine(prob, t, step)
        # graduated passes: shrink the Huber width toward the residual scale at the
        # current estimate and refine again from there
        delta = opts.huber_delta
        for _ in range(4):
            e = prob.solve_candidates(t[None])[2][0]
            sigma = 1.4826 * float(np.median(np.abs(e)))
            new = min(max(3.0 * sigma, 0.01 * opts.huber_delta), delta)
            if new >= 0.8 * delta:
                break
            delta = new
            prob = _Problem(flow, cam, replace(opts, huber_delta=delta))
            t = _refine(prob, t, step)

    omega, cost, e, valid = prob.solve_candidates(t[None])
    omega, e, valid = omega[0], e[0], valid[0]
    # sign: the direction that makes inverse depths mostly positive
    At = prob.A @ t
    rot = prob.B @ omega
    if np.sum(np.sign(np.einsum("pi,pi->p", At, prob.v - rot))) < 0:
        t = -t
    inlier = prob._used(np.abs(e)[None], valid[None])[0]
    rms = float(np.sqrt(np.mean(e[valid] ** 2))) if np.any(valid) else 0.0
    return SolveReport(EgoMotion(t, omega), rms, inlier.reshape(cam.shape),
                       ambiguous=bool(ambiguous), objective=float(cost[0]))


def robust_objective(flow: np.ndarray, cam: CameraModel, t,
                     opts: RobustSolveOptions | None = None) -> float:
    """Objective value at a given translation direction (omega optimized)."""
    opts = opts or RobustSolveOptions()
    prob = _Problem(check_flow(flow, cam), cam, opts)
    t = np.asarray(t, dtype=np.float64).reshape(1, 3)
    return float(prob.solve_candidates(t / np.linalg.norm(t))[1][0])
