import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynsplat import geometry as geo


def rng_xi(seed, omega_cap=0.9 * np.pi):
    rng = np.random.default_rng(seed)
    xi = rng.normal(size=6)
    n = np.linalg.norm(xi[3:])
    if n > omega_cap:
        xi[3:] *= omega_cap / n
    return xi


def test_exp_zero_is_identity():
    pose = geo.se3_exp(np.zeros(6))
    np.testing.assert_allclose(pose.rotation, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(pose.translation, 0, atol=1e-15)


def test_exp_quarter_turn_about_z():
    pose = geo.se3_exp([0, 0, 0, 0, 0, np.pi / 2])
    np.testing.assert_allclose(
        pose.rotation, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)
    np.testing.assert_allclose(pose.translation, 0, atol=1e-12)


@given(st.integers(0, 500))
@settings(max_examples=60, deadline=None)
def test_exp_log_roundtrip(seed):
    xi = rng_xi(seed)
    back = geo.se3_log(geo.se3_exp(xi))
    np.testing.assert_allclose(back, xi, atol=1e-9)


def test_log_identity_is_zero():
    np.testing.assert_allclose(geo.se3_log(geo.Pose()), 0, atol=1e-15)


def test_log_self_relative_is_zero():
    for seed in range(10):
        pose = geo.se3_exp(rng_xi(seed))
        rel = pose.inverse().compose(pose)
        assert np.linalg.norm(geo.se3_log(rel)) < 1e-12


def test_log_near_pi_raises():
    pose = geo.se3_exp([0, 0, 0, 0, 0, np.pi - 1e-9])
    with pytest.raises(geo.GeometryError):
        geo.se3_log(pose)


def test_compose_inverse_is_identity():
    for seed in range(20):
        pose = geo.se3_exp(rng_xi(seed))
        ident = pose.compose(pose.inverse())
        np.testing.assert_allclose(ident.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(ident.translation, 0, atol=1e-9)


def test_small_angle_branch():
    xi = np.array([0.3, -0.1, 0.2, 1e-10, -2e-10, 5e-11])
    pose = geo.se3_exp(xi)
    np.testing.assert_allclose(geo.se3_log(pose), xi, atol=1e-12)


def test_project_center():
    intr = geo.CameraIntrinsics(100.0, 100.0, 32.0, 24.0)
    uv = geo.project(np.array([0.0, 0.0, 1.0]), intr)
    np.testing.assert_allclose(uv, [32.0, 24.0])


def test_project_known_value():
    intr = geo.CameraIntrinsics(100.0, 100.0, 50.0, 50.0)
    uv = geo.project(np.array([1.0, 0.0, 2.0]), intr)
    assert uv[0] == pytest.approx(100.0)


def test_project_behind_camera_raises():
    intr = geo.CameraIntrinsics(100.0, 100.0, 50.0, 50.0)
    with pytest.raises(geo.GeometryError):
        geo.project(np.array([0.0, 0.0, -1.0]), intr)


def test_unproject_nonpositive_depth_raises():
    intr = geo.CameraIntrinsics(100.0, 100.0, 50.0, 50.0)
    with pytest.raises(geo.GeometryError):
        geo.unproject(np.array([10.0, 10.0]), 0.0, intr)


@given(st.integers(0, 300))
@settings(max_examples=40, deadline=None)
def test_project_unproject_roundtrip(seed):
    rng = np.random.default_rng(seed)
    intr = geo.CameraIntrinsics(*(50 + 100 * rng.random(2)), *(64 * rng.random(2)))
    pixel = rng.random(2) * 128
    depth = 0.1 + 5 * rng.random()
    point = geo.unproject(pixel, depth, intr)
    np.testing.assert_allclose(geo.project(point, intr), pixel, atol=1e-9)
    uv = geo.project(point, intr)
    np.testing.assert_allclose(geo.unproject(uv, point[2], intr), point, atol=1e-9)


def test_left_jacobian_inverse_matches_numeric():
    # J_l obeys exp(xi + d) ~= exp(J_l d) exp(xi); check its inverse
    for seed in range(8):
        xi = rng_xi(seed, omega_cap=0.7 * np.pi)
        t0 = geo.se3_exp(xi)
        h = 1e-6
        j_num = np.zeros((6, 6))
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            jp = geo.se3_log(geo.se3_exp(xi + d).compose(t0.inverse()))
            jm = geo.se3_log(geo.se3_exp(xi - d).compose(t0.inverse()))
            j_num[:, k] = (jp - jm) / (2 * h)
        err = np.abs(geo.se3_left_jacobian_inv(xi) @ j_num - np.eye(6)).max()
        assert err < 1e-5


def test_quaternion_roundtrip():
    for seed in range(50):
        pose = geo.se3_exp(rng_xi(seed))
        q = geo.rotation_to_quat_xyzw(pose.rotation)
        assert abs(np.linalg.norm(q) - 1) < 1e-12
        np.testing.assert_allclose(
            geo.quat_xyzw_to_rotation(q), pose.rotation, atol=1e-12)


def test_tum_trajectory_roundtrip(tmp_path):
    poses = [(0.1 * i, geo.se3_exp(rng_xi(i, omega_cap=0.8 * np.pi)))
             for i in range(5)]
    path = tmp_path / "traj.txt"
    geo.save_tum_trajectory(path, poses)
    back, skipped = geo.load_tum_trajectory(path)
    assert skipped == 0 and len(back) == 5
    for (t0, p0), (t1, p1) in zip(poses, back):
        assert t0 == pytest.approx(t1, abs=1e-6)
        np.testing.assert_allclose(p0.rotation, p1.rotation, atol=1e-6)
        np.testing.assert_allclose(p0.translation, p1.translation, atol=1e-6)


def test_tum_trajectory_skips_malformed(tmp_path):
    path = tmp_path / "traj.txt"
    path.write_text("# comment\n0.0 0 0 0 0 0 0 1\nnot a line\n0.1 1 0 0 0 0 0\n")
    back, skipped = geo.load_tum_trajectory(path)
    assert len(back) == 1 and skipped == 2


def test_exp_output_passes_pose_validation():
    for seed in range(20):
        pose = geo.se3_exp(rng_xi(seed))
        pose.validate(1e-9)  # orthonormal within 1e-9, det +1
