"""Instantaneous rigid-motion field math and SO(3)/pose helpers.

Conventions used throughout the package:

* Image grids are row-major ``(H, W)``; ``x`` grows rightward with the
  column index and ``y`` grows downward with the row index.
* Flow fields are ``(H, W, 2)`` float arrays holding ``(u, v)`` per pixel.
* Internally everything is in normalized camera coordinates (focal length
  replaced by 1).  Pixel units only appear at file/CLI boundaries, see
  :meth:`CameraModel.to_pixels` and :meth:`CameraModel.to_normalized`.

The motion field of a static scene is ``v(p) = rho(p) A(p) t + B(p) omega``
with::

    A(p) = [[1, 0, -x],          B(p) = [[  -x*y, 1 + x*x, -y],
            [0, 1, -y]]                  [-1 - y*y,    x*y,  x]]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class CameraModel:
    f: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"bad image size {self.width}x{self.height}")

    @classmethod
    def default(cls, width: int, height: int) -> "CameraModel":
        """Centered principal point, focal length of half the image width."""
        return cls(f=width / 2.0, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                   width=width, height=height)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def normalized_grid(self) -> tuple[np.ndarray, np.ndarray]:
        cols = np.arange(self.width, dtype=np.float64)
        rows = np.arange(self.height, dtype=np.float64)
        x = (cols - self.cx) / self.f
        y = (rows - self.cy) / self.f
        return np.broadcast_to(x[None, :], self.shape).copy(), \
            np.broadcast_to(y[:, None], self.shape).copy()

    def to_pixels(self, flow: np.ndarray) -> np.ndarray:
        return np.asarray(flow, dtype=np.float64) * self.f

    def to_normalized(self, flow: np.ndarray) -> np.ndarray:
        return np.asarray(flow, dtype=np.float64) / self.f


@dataclass(frozen=True)
class EgoMotion:
    """Instantaneous translation ``t`` and rotation ``omega`` per frame."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.t, dtype=np.float64).reshape(3)
        w = np.array(self.omega, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(w))):
            raise ValueError("egomotion components must be finite")
        t.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "omega", w)


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform ``X_world = R X_cam + tau``."""

    R: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        tau = np.array(self.tau, dtype=np.float64).reshape(3)
        if not is_rotation(R, tol=1e-9):
            raise ValueError("pose rotation is not orthonormal with det 1")
        R.flags.writeable = False
        tau.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "tau", tau)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.tau + self.tau)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.tau)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.tau
        return T


Trajectory = list  # list[Pose]


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return (np.abs(R.T @ R - np.eye(3)).max() <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol)


def check_flow(flow: np.ndarray, cam: CameraModel | None = None) -> np.ndarray:
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must have shape (H, W, 2), got {flow.shape}")
    if cam is not None and flow.shape[:2] != cam.shape:
        raise ValueError(f"flow shape {flow.shape[:2]} does not match camera {cam.shape}")
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    return flow


# --- per-point matrices -----------------------------------------------------

def a_matrix(p) -> np.ndarray:
    x, y = float(p[0]), float(p[1])
    return np.array([[1.0, 0.0, -x],
                     [0.0, 1.0, -y]])


def b_matrix(p) -> np.ndarray:
    x, y = float(p[0]), float(p[1])
    return np.array([[-x * y, 1.0 + x * x, -y],
                     [-1.0 - y * y, x * y, x]])


def a_stack(cam: CameraModel) -> np.ndarray:
    """A(p) for every pixel, shape ``(H, W, 2, 3)``."""
    x, y = cam.normalized_grid()
    A = np.zeros(cam.shape + (2, 3))
    A[..., 0, 0] = 1.0
    A[..., 1, 1] = 1.0
    A[..., 0, 2] = -x
    A[..., 1, 2] = -y
    return A


def b_stack(cam: CameraModel) -> np.ndarray:
    """B(p) for every pixel, shape ``(H, W, 2, 3)``."""
    x, y = cam.normalized_grid()
    B = np.empty(cam.shape + (2, 3))
    B[..., 0, 0] = -x * y
    B[..., 0, 1] = 1.0 + x * x
    B[..., 0, 2] = -y
    B[..., 1, 0] = -1.0 - y * y
    B[..., 1, 1] = x * y
    B[..., 1, 2] = x
    return B


# --- fields -------------------------------------------------------------------

def translational_field(t, cam: CameraModel) -> np.ndarray:
    """Translational field at unit inverse depth: ``A(p) t``."""
    t = np.asarray(t, dtype=np.float64).reshape(3)
    return a_stack(cam) @ t


def rotational_field(omega, cam: CameraModel) -> np.ndarray:
    """Depth-independent rotational field ``B(p) omega``."""
    w = np.asarray(omega, dtype=np.float64).reshape(3)
    return b_stack(cam) @ w


def motion_field(ego: EgoMotion, rho: np.ndarray, cam: CameraModel) -> np.ndarray:
    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape != cam.shape:
        raise ValueError(f"inverse depth shape {rho.shape} does not match camera {cam.shape}")
    return rho[..., None] * translational_field(ego.t, cam) + rotational_field(ego.omega, cam)


# --- rotations and poses ------------------------------------------------------

def hat(w) -> np.ndarray:
    wx, wy, wz = np.asarray(w, dtype=np.float64).reshape(3)
    return np.array([[0.0, -wz, wy],
                     [wz, 0.0, -wx],
                     [-wy, wx, 0.0]])


def vee(S: np.ndarray) -> np.ndarray:
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < 1e-8:
        # second-order Taylor expansion; error O(theta^3)
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + (np.sin(theta) / theta) * K
            + ((1.0 - np.cos(theta)) / theta ** 2) * K @ K)


def rotation_angle(R: np.ndarray) -> float:
    """Angle of a rotation matrix in ``[0, pi]``, stable for small angles."""
    R = np.asarray(R, dtype=np.float64)
    s = 0.5 * np.linalg.norm(vee(R - R.T))
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(s, c))


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if not is_rotation(R, tol=1e-6):
        raise ValueError("so3_log needs an orthonormal matrix with det 1")
    c = 0.5 * (np.trace(R) - 1.0)
    if c > -1.0 + 1e-6:
        theta = rotation_angle(R)
        v = 0.5 * vee(R - R.T)
        if theta < 1e-8:
            return v
        return v * (theta / np.sin(theta))
    # near pi: axis from the symmetric part, R + I = 2 n n^T (1 + cos) ~ 2 n n^T
    theta = rotation_angle(R)
    S = 0.5 * (R + np.eye(3))
    i = int(np.argmax(np.diag(S)))
    n = S[:, i] / np.sqrt(max(S[i, i], 1e-300))
    n /= np.linalg.norm(n)
    # fix the sign with the (small) antisymmetric part when it is informative
    if np.dot(vee(R - R.T), n) < 0:
        n = -n
    return theta * n


def orthonormalize(M: np.ndarray) -> np.ndarray:
    """Nearest rotation in Frobenius norm (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] = -U[:, -1]
        R = U @ Vt
    return R


def relative_egomotion(a: Pose, b: Pose) -> EgoMotion:
    """Motion ``(t, omega)`` of the camera-frame transform ``a^-1 o b``."""
    rel = a.inverse().compose(b)
    return EgoMotion(rel.tau, so3_log(orthonormalize(rel.R)))


def motion_to_pose(m: EgoMotion) -> Pose:
    return Pose(so3_exp(m.omega), m.t)


def integrate_trajectory(motions: Sequence[EgoMotion], origin: Pose | None = None) -> list[Pose]:
    pose = Pose.identity() if origin is None else origin
    traj = [pose]
    for m in motions:
        pose = pose.compose(motion_to_pose(m))
        traj.append(pose)
    return traj
