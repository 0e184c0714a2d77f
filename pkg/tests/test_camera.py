import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from equisplat.camera import (
    EquirectCamera,
    PerspectiveCamera,
    Pose,
    jacobian_derivative,
    jacobian_equirect,
    pixel_center_rays,
    project_equirect,
    project_perspective,
    perspective_rays,
    pole_ok,
    rotation_y,
    unproject_equirect,
    world_to_camera,
    yaw_pitch_rotation,
)
from equisplat.errors import BehindCamera, InvalidPose, OutOfBounds, PoleDegenerate, ZeroRadius

CAM = EquirectCamera(2000, 1000)
coord = st.floats(-10, 10, allow_nan=False)
points = st.tuples(coord, coord, coord).map(np.array)


def test_pose_rejects_non_orthonormal():
    with pytest.raises(InvalidPose):
        Pose(np.diag([1.0, 1.0, 1.1]), np.zeros(3))
    with pytest.raises(InvalidPose):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(InvalidPose):
        Pose(np.eye(3), np.array([0.0, np.nan, 0.0]))


def test_pose_matrix_round_trip(rng):
    R = rotation_y(0.7)
    pose = Pose(R, np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(Pose.from_matrix(pose.matrix()).matrix(), pose.matrix())
    T = pose.matrix()
    T[3, 0] = 1.0
    with pytest.raises(InvalidPose):
        Pose.from_matrix(T)


def test_camera_center_maps_to_origin():
    pose = Pose(rotation_y(0.4), np.array([0.3, -0.2, 1.0]))
    t, t_r = world_to_camera(pose.center, pose)
    np.testing.assert_allclose(t, 0.0, atol=1e-12)
    assert t_r == pytest.approx(0.0, abs=1e-12)


def test_forward_axis_projects_to_center():
    p, lonlat, s = project_equirect(np.array([0.0, 0.0, 1.0]), CAM)
    np.testing.assert_allclose(p, [1000.0, 500.0])
    np.testing.assert_allclose(s, [0.0, 0.0])


def test_axes_land_where_expected():
    p, _, _ = project_equirect(np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0.001], [0, -1.0, 0.001]]), CAM)
    np.testing.assert_allclose(p[0], [1500.0, 500.0])
    np.testing.assert_allclose(p[1], [500.0, 500.0])
    assert p[2, 1] == pytest.approx(1000.0, abs=0.5)  # +Y is down
    assert p[3, 1] == pytest.approx(0.0, abs=0.5)


def test_backward_axis_is_left_edge():
    # lon = pi maps to the left edge: the range is [-pi, pi)
    p, lonlat, _ = project_equirect(np.array([0.0, 0.0, -1.0]), CAM)
    assert lonlat[0] == -np.pi
    assert p[0] == 0.0


def test_zero_radius():
    with pytest.raises(ZeroRadius):
        project_equirect(np.zeros(3), CAM)


@given(points)
def test_projection_inverts_unprojection(t):
    r = np.linalg.norm(t)
    assume(r > 1e-3)
    assume(pole_ok(t, 1e-3))
    p, _, _ = project_equirect(t, CAM)
    assume(p[0] < CAM.width)
    d = unproject_equirect(p, CAM)
    np.testing.assert_allclose(d, t / r, atol=1e-9)


@given(points)
def test_projection_is_scale_invariant(t):
    assume(np.linalg.norm(t) > 1e-3)
    p1, _, _ = project_equirect(t, CAM)
    p2, _, _ = project_equirect(3.7 * t, CAM)
    np.testing.assert_allclose(p1, p2, atol=1e-8)


def test_unproject_out_of_bounds():
    with pytest.raises(OutOfBounds):
        unproject_equirect(np.array([2000.0, 10.0]), CAM)
    with pytest.raises(OutOfBounds):
        unproject_equirect(np.array([-0.1, 10.0]), CAM)


def test_pixel_center_rays_project_to_centers():
    cam = EquirectCamera(16, 8)
    rays = pixel_center_rays(cam)
    p, _, _ = project_equirect(rays, cam)
    gx, gy = np.meshgrid(np.arange(16) + 0.5, np.arange(8) + 0.5)
    np.testing.assert_allclose(p[..., 0], gx, atol=1e-9)
    np.testing.assert_allclose(p[..., 1], gy, atol=1e-9)


def _fd_jacobian(t, cam, h=1e-6):
    J = np.zeros(t.shape[:-1] + (2, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        pp, _, _ = project_equirect(t + e, cam)
        pm, _, _ = project_equirect(t - e, cam)
        J[..., k] = (pp - pm) / (2 * h)
    return J


def test_jacobian_matches_finite_differences(rng):
    t = rng.normal(size=(500, 3)) * 3
    t = t[pole_ok(t, 0.05)]
    # keep clear of the seam where the FD stencil would straddle +-pi
    _, lonlat, _ = project_equirect(t, CAM)
    t = t[np.abs(lonlat[:, 0]) < np.pi - 1e-3]
    J = jacobian_equirect(t, CAM)
    np.testing.assert_allclose(J, _fd_jacobian(t, CAM), rtol=1e-5, atol=1e-6)


def test_jacobian_derivative_matches_finite_differences(rng):
    t = rng.normal(size=(200, 3)) * 2
    t = t[pole_ok(t, 0.1)]
    h = 1e-6
    dJ = jacobian_derivative(t, CAM)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (jacobian_equirect(t + e, CAM) - jacobian_equirect(t - e, CAM)) / (2 * h)
        np.testing.assert_allclose(dJ[..., k], fd, rtol=1e-5, atol=1e-4)


def test_jacobian_pole_guard():
    with pytest.raises(PoleDegenerate):
        jacobian_equirect(np.array([0.0, 1.0, 0.0]), CAM)
    assert not pole_ok(np.array([1e-6, 1.0, 0.0]))


def test_perspective_projection_and_rays():
    cam = PerspectiveCamera(100.0, 100.0, 50.0, 40.0, 100, 80)
    np.testing.assert_allclose(project_perspective(np.array([0.0, 0.0, 2.0]), cam), [50.0, 40.0])
    rays = perspective_rays(cam)
    p = project_perspective(rays, cam)
    gx, gy = np.meshgrid(np.arange(100) + 0.5, np.arange(80) + 0.5)
    np.testing.assert_allclose(p[..., 0], gx, atol=1e-9)
    np.testing.assert_allclose(p[..., 1], gy, atol=1e-9)
    with pytest.raises(BehindCamera):
        project_perspective(np.array([0.0, 0.0, -1.0]), cam)


def test_from_fov():
    cam = PerspectiveCamera.from_fov(90.0, 64, 64)
    assert cam.fx == pytest.approx(32.0)
    assert (cam.cx, cam.cy) == (32.0, 32.0)


def test_yaw_pitch_convention():
    z = np.array([0.0, 0.0, 1.0])
    np.testing.assert_allclose(yaw_pitch_rotation(np.pi / 2, 0.0) @ z, [1.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(yaw_pitch_rotation(0.0, np.pi / 2) @ z, [0.0, 1.0, 0.0], atol=1e-12)


def test_camera_size_validation():
    with pytest.raises(ValueError):
        EquirectCamera(1, 10)
