import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from egoflow.geometry import (CameraModel, EgoMotion, Pose, a_matrix, b_matrix, integrate_trajectory,
                              motion_field, orthonormalize, relative_egomotion, rotation_angle,
                              rotational_field, so3_exp, so3_log, translational_field)

finite = st.floats(-3, 3, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


def naive_field(t, w, rho, cam):
    # independent per-pixel evaluation of rho*A*t + B*w
    H, W = cam.shape
    out = np.zeros((H, W, 2))
    for r in range(H):
        for c in range(W):
            x = (c - cam.cx) / cam.f
            y = (r - cam.cy) / cam.f
            out[r, c, 0] = rho[r, c] * (t[0] - x * t[2]) + (-x * y * w[0] + (1 + x * x) * w[1] - y * w[2])
            out[r, c, 1] = rho[r, c] * (t[1] - y * t[2]) + (-(1 + y * y) * w[0] + x * y * w[1] + x * w[2])
    return out


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(0.0, 0, 0, 4, 4)
    with pytest.raises(ValueError):
        CameraModel(1.0, 0, 0, 0, 4)


def test_normalized_grid_convention():
    cam = CameraModel(2.0, 1.0, 0.5, 3, 2)
    x, y = cam.normalized_grid()
    assert x.shape == (2, 3)
    np.testing.assert_array_equal(x[0], [-0.5, 0.0, 0.5])
    np.testing.assert_array_equal(y[:, 0], [-0.25, 0.25])


def test_a_matrix_examples():
    np.testing.assert_array_equal(a_matrix((0, 0)), [[1, 0, 0], [0, 1, 0]])
    np.testing.assert_array_equal(a_matrix((0.5, -0.25)), [[1, 0, -0.5], [0, 1, 0.25]])


@given(finite, finite)
def test_a_annihilates_ray(x, y):
    np.testing.assert_allclose(a_matrix((x, y)) @ np.array([x, y, 1.0]), 0, atol=1e-12)


def test_b_matrix_examples():
    np.testing.assert_array_equal(b_matrix((0, 0)) @ [0, 0, 1], [0, 0])
    np.testing.assert_array_equal(b_matrix((0, 0)) @ [1, 0, 0], [0, -1])
    np.testing.assert_allclose(b_matrix((0.2, 0.1)) @ [0, 1, 0], [1.04, 0.02], atol=1e-15)


def test_field_examples():
    cam = CameraModel(2.0, 1.5, 1.5, 4, 4)
    x, y = cam.normalized_grid()
    np.testing.assert_array_equal(translational_field([0, 0, 0], cam), 0)
    np.testing.assert_allclose(translational_field([0, 0, 1], cam), np.stack([-x, -y], -1))
    tf = translational_field([1, 0, 0], cam)
    np.testing.assert_array_equal(tf[..., 0], 1)
    np.testing.assert_array_equal(tf[..., 1], 0)
    # rotational field mirrors the b_matrix examples gridwise
    rf = rotational_field([0, 1, 0], cam)
    np.testing.assert_allclose(rf, np.stack([1 + x * x, x * y], -1))


def test_focus_of_expansion_and_lateral_example():
    cam = CameraModel(1.0, 0.0, 0.0, 1, 1)
    v = motion_field(EgoMotion([0, 0, 1], [0, 0, 0]), np.full((1, 1), 7.0), cam)
    np.testing.assert_array_equal(v, 0)
    cam = CameraModel(4.0, -2.0, 1.0, 1, 1)  # single pixel at p = (0.5, -0.25)
    v = motion_field(EgoMotion([1, 0, 0], [0, 0, 0]), np.full((1, 1), 2.0), cam)
    np.testing.assert_allclose(v[0, 0], [2, 0])


def test_motion_field_matches_naive_oracle(rng):
    cam = CameraModel(5.0, 3.2, 2.1, 7, 5)
    for _ in range(5):
        t, w = rng.normal(size=3), rng.normal(size=3) * 0.1
        rho = rng.uniform(0, 1, size=cam.shape)
        v = motion_field(EgoMotion(t, w), rho, cam)
        np.testing.assert_allclose(v, naive_field(t, w, rho, cam), atol=1e-12)
        sep = rho[..., None] * translational_field(t, cam) + rotational_field(w, cam)
        np.testing.assert_allclose(v, sep, atol=1e-12)


def test_motion_field_shape_mismatch(cam32):
    with pytest.raises(ValueError):
        motion_field(EgoMotion(), np.ones((3, 3)), cam32)


@given(vec3, vec3, vec3, vec3)
def test_linearity(t1, t2, w1, w2):
    cam = CameraModel.default(6, 4)
    rho = np.linspace(0.1, 1, 24).reshape(4, 6)
    lhs = motion_field(EgoMotion(t1 + t2, w1 + w2), rho, cam)
    rhs = motion_field(EgoMotion(t1, w1), rho, cam) + motion_field(EgoMotion(t2, w2), rho, cam)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@given(vec3, st.floats(0.01, 10))
def test_rotation_independent_of_depth(w, s):
    cam = CameraModel.default(5, 5)
    a = motion_field(EgoMotion([0, 0, 0], w), np.ones(cam.shape), cam)
    b = motion_field(EgoMotion([0, 0, 0], w), np.full(cam.shape, s), cam)
    np.testing.assert_array_equal(a, b)


def test_egomotion_rejects_nonfinite():
    with pytest.raises(ValueError):
        EgoMotion([np.nan, 0, 0], [0, 0, 0])


def test_so3_examples():
    np.testing.assert_array_equal(so3_exp([0, 0, 0]), np.eye(3))
    w = np.array([0.1, 0.2, 0.3])
    np.testing.assert_allclose(so3_log(so3_exp(w)), w, atol=1e-12)
    np.testing.assert_allclose(so3_exp([0, 0, np.pi / 2]) @ [1, 0, 0], [0, 1, 0], atol=1e-12)


@given(st.tuples(finite, finite, finite), st.floats(0, np.pi - 1e-3))
def test_so3_roundtrip(axis, theta):
    a = np.array(axis)
    if np.linalg.norm(a) < 1e-6:
        a = np.array([0.0, 0.0, 1.0])
    w = a / np.linalg.norm(a) * theta
    np.testing.assert_allclose(so3_log(so3_exp(w)), w, atol=1e-9)


def test_so3_log_near_pi():
    w = np.array([0.0, 1.0, 0.0]) * (np.pi - 1e-7)
    np.testing.assert_allclose(so3_log(so3_exp(w)), w, atol=1e-6)


def test_so3_log_rejects_non_rotation():
    with pytest.raises(ValueError):
        so3_log(np.diag([1.0, 1.0, 2.0]))


def test_rotation_angle_small():
    assert rotation_angle(so3_exp([0, 1e-9, 0])) == pytest.approx(1e-9, rel=1e-6)


def test_pose_rejects_bad_rotation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_orthonormalize_projects():
    R = so3_exp([0.3, -0.2, 0.1])
    np.testing.assert_allclose(orthonormalize(R + 1e-4 * np.ones((3, 3))), R, atol=1e-3)
    assert np.linalg.det(orthonormalize(-np.eye(3))) == pytest.approx(1.0)


def test_relative_egomotion_examples():
    a = Pose(so3_exp([0.1, 0.2, -0.3]), [1, 2, 3])
    m = relative_egomotion(a, a)
    np.testing.assert_allclose(m.t, 0, atol=1e-15)
    np.testing.assert_allclose(m.omega, 0, atol=1e-15)
    b = a.compose(Pose(np.eye(3), [0, 0, 1]))
    m = relative_egomotion(a, b)
    np.testing.assert_allclose(m.t, [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(m.omega, 0, atol=1e-12)


def test_relative_egomotion_roundtrip(rng):
    for _ in range(20):
        a = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
        b = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
        m = relative_egomotion(a, b)
        back = a.compose(Pose(so3_exp(m.omega), m.t))
        np.testing.assert_allclose(back.R, b.R, atol=1e-10)
        np.testing.assert_allclose(back.tau, b.tau, atol=1e-10)


def test_integrate_trajectory_examples():
    origin = Pose(so3_exp([0, 0.5, 0]), [1, 0, 0])
    assert integrate_trajectory([], origin) == [origin]
    traj = integrate_trajectory([EgoMotion()] * 3, origin)
    assert len(traj) == 4
    for p in traj:
        np.testing.assert_allclose(p.R, origin.R, atol=1e-15)
        np.testing.assert_allclose(p.tau, origin.tau, atol=1e-15)


def test_fold_unfold_roundtrip(rng):
    motions = [EgoMotion(rng.normal(size=3), rng.normal(size=3) * 0.3) for _ in range(25)]
    traj = integrate_trajectory(motions)
    assert len(traj) == 26
    for m, a, b in zip(motions, traj[:-1], traj[1:]):
        back = relative_egomotion(a, b)
        np.testing.assert_allclose(back.t, m.t, atol=1e-10)
        np.testing.assert_allclose(back.omega, m.omega, atol=1e-10)
