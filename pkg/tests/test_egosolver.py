import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import angle_deg, random_unit
from egoflow.egosolver import (DegenerateInputError, RobustSolveOptions, depth_from_flow,
                               fibonacci_sphere, recover_rotation, recover_translation,
                               robust_egomotion, robust_objective)
from egoflow.geometry import (CameraModel, EgoMotion, a_matrix, b_matrix, motion_field,
                              rotational_field, translational_field)

small = st.floats(-2, 2, allow_nan=False)


def naive_lstsq(field, cam, mat):
    # stack rows pixel by pixel and hand the system to numpy's SVD solver
    x, y = cam.normalized_grid()
    rows, rhs = [], []
    for r in range(cam.height):
        for c in range(cam.width):
            M = mat((x[r, c], y[r, c]))
            rows.extend(M)
            rhs.extend(field[r, c])
    return np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]


def varied_depth(cam, rng):
    return 1.0 / rng.uniform(2.0, 30.0, size=cam.shape)


def test_translation_roundtrip_examples(cam32):
    np.testing.assert_allclose(recover_translation(translational_field([0, 0, 1], cam32), cam32),
                               [0, 0, 1], atol=1e-10)
    np.testing.assert_array_equal(recover_translation(np.zeros((32, 32, 2)), cam32), 0)
    np.testing.assert_array_equal(recover_rotation(np.zeros((32, 32, 2)), cam32), 0)
    w = np.array([0.01, -0.02, 0.005])
    np.testing.assert_allclose(recover_rotation(rotational_field(w, cam32), cam32), w, atol=1e-10)


@given(st.tuples(small, small, small), st.floats(0.01, 100))
def test_translation_scale_covariance(t, c):
    cam = CameraModel.default(8, 6)
    v = translational_field(np.array(t), cam)
    np.testing.assert_allclose(recover_translation(c * v, cam),
                               c * recover_translation(v, cam), atol=1e-9 * max(1, c))


def test_matches_naive_lstsq(rng):
    cam = CameraModel(3.0, 2.0, 1.5, 5, 4)
    f = rng.normal(size=(4, 5, 2))
    np.testing.assert_allclose(recover_translation(f, cam), naive_lstsq(f, cam, a_matrix), atol=1e-10)
    np.testing.assert_allclose(recover_rotation(f, cam), naive_lstsq(f, cam, b_matrix), atol=1e-10)


def test_rotational_contamination_shifts_translation(cam32):
    t0 = np.array([0.2, 0.0, 1.0])
    v = translational_field(t0, cam32) + rotational_field([0, 0.02, 0], cam32)
    assert np.linalg.norm(recover_translation(v, cam32) - t0) > 1e-3


def test_rank_deficient_raises():
    cam = CameraModel(1.0, 0.0, 0.0, 1, 1)
    with pytest.raises(DegenerateInputError):
        recover_translation(np.zeros((1, 1, 2)), cam)
    with pytest.raises(DegenerateInputError):
        recover_rotation(np.zeros((1, 1, 2)), cam)


def test_shape_mismatch(cam32):
    with pytest.raises(ValueError):
        recover_translation(np.zeros((4, 4, 2)), cam32)


def test_rotation_noise_monte_carlo(cam32):
    # the estimator is linear and unbiased: its covariance is sigma^2 (B^T B)^-1
    w0 = np.array([0.01, -0.02, 0.005])
    sigma = 0.01
    clean = rotational_field(w0, cam32)
    from egoflow.geometry import b_stack
    B = b_stack(cam32).reshape(-1, 3)
    predicted = sigma * np.sqrt(np.trace(np.linalg.inv(B.T @ B)))
    errs = []
    for seed in range(100):
        noise = np.random.default_rng(seed).normal(scale=sigma, size=clean.shape)
        errs.append(np.linalg.norm(recover_rotation(clean + noise, cam32) - w0))
    rms = np.sqrt(np.mean(np.square(errs)))
    assert 0.7 * predicted < rms < 1.3 * predicted
    assert max(errs) < 5 * predicted


def test_depth_backsubstitution(cam32, rng):
    for _ in range(5):
        ego = EgoMotion(random_unit(rng) * 0.8, rng.normal(size=3) * 0.02)
        rho = varied_depth(cam32, rng)
        v = motion_field(ego, rho, cam32)
        est = depth_from_flow(v, ego, cam32)
        At = np.linalg.norm(translational_field(ego.t, cam32), axis=-1)
        ok = At > 1e-6
        np.testing.assert_allclose(est[ok], rho[ok], atol=1e-9)


def test_depth_pure_rotation_and_foe():
    cam = CameraModel(4.0, 2.0, 2.0, 5, 5)  # pixel (2, 2) is the principal point
    ego = EgoMotion([0, 0, 1], [0.01, 0.02, 0.0])
    est = depth_from_flow(rotational_field(ego.omega, cam), ego, cam)
    np.testing.assert_allclose(est, 0, atol=1e-15)
    est = depth_from_flow(motion_field(ego, np.full(cam.shape, 0.5), cam), ego, cam)
    assert est[2, 2] == 0.0
    assert np.all(est >= 0)


def test_depth_zero_translation_raises(cam32):
    with pytest.raises(ValueError):
        depth_from_flow(np.zeros((32, 32, 2)), EgoMotion(), cam32)


def test_depth_scale_family(cam32, rng):
    ego = EgoMotion(random_unit(rng), [0.01, 0.0, 0.0])
    rho = varied_depth(cam32, rng)
    v = motion_field(ego, rho, cam32)
    c = 3.0
    a = depth_from_flow(v, ego, cam32)
    b = depth_from_flow(v, EgoMotion(c * ego.t, ego.omega), cam32)
    np.testing.assert_allclose(b, a / c, atol=1e-12)


def test_fibonacci_sphere_unit():
    pts = fibonacci_sphere(500)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1, atol=1e-12)
    assert abs(pts.mean(axis=0)).max() < 0.01


def test_robust_noiseless(cam32, rng):
    for _ in range(3):
        t0 = random_unit(rng)
        w0 = rng.normal(size=3) * 0.02
        v = motion_field(EgoMotion(t0, w0), varied_depth(cam32, rng), cam32)
        rep = robust_egomotion(v, cam32)
        assert np.linalg.norm(rep.ego.t) == pytest.approx(1.0)
        assert angle_deg(rep.ego.t, t0) < 0.5
        assert np.linalg.norm(rep.ego.omega - w0) < 1e-3
        assert rep.residual_rms >= 0
        assert not rep.degenerate and not rep.ambiguous


def test_robust_pure_rotation_is_ambiguous(cam32):
    w0 = np.array([0.01, -0.02, 0.005])
    rep = robust_egomotion(rotational_field(w0, cam32), cam32)
    np.testing.assert_allclose(rep.ego.omega, w0, atol=1e-6)
    assert rep.ambiguous


def test_robust_zero_flow_degenerate(cam32):
    rep = robust_egomotion(np.zeros((32, 32, 2)), cam32)
    assert rep.degenerate
    np.testing.assert_array_equal(rep.ego.t, [0, 0, 1])
    assert rep.residual_rms == 0


def test_robust_too_few_pixels():
    cam = CameraModel.default(2, 2)
    with pytest.raises(DegenerateInputError):
        robust_egomotion(np.ones((2, 2, 2)), cam)


def test_objective_minimal_at_truth():
    cam = CameraModel.default(12, 10)
    rng = np.random.default_rng(5)
    t0 = random_unit(rng)
    v = motion_field(EgoMotion(t0, [0.01, 0.0, -0.01]), varied_depth(cam, rng), cam)
    opts = RobustSolveOptions()
    at_truth = robust_objective(v, cam, t0, opts)
    grid = fibonacci_sphere(200)
    costs = [robust_objective(v, cam, g, opts) for g in grid]
    assert at_truth <= min(costs) + 1e-15


def test_options_validation():
    with pytest.raises(ValueError):
        RobustSolveOptions(coarse_grid=0)
    with pytest.raises(ValueError):
        RobustSolveOptions(inlier_fraction_floor=1.5)
