import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmrf.errors import InvalidSpec, MissesROI, NonConvergence, PoseCompositionError
from mmrf.geometry import (
    CameraModel,
    DistortionCoefficients,
    Intrinsics,
    Pose,
    camera_rays,
    compose_star_pose,
    distort,
    frame_pixels,
    look_at,
    pixel_to_ray,
    project,
    ray_sphere,
    relative_pose,
    rotation_about_axis,
    undistort,
)

coef = st.builds(
    DistortionCoefficients,
    k1=st.floats(-0.3, 0.1),
    k2=st.floats(-0.05, 0.05),
    p1=st.floats(-1e-3, 1e-3),
    p2=st.floats(-1e-3, 1e-3),
    max_radius=st.just(0.7),
)


@settings(max_examples=50, deadline=None)
@given(coef, st.integers(0, 2**32 - 1))
def test_distortion_round_trip(c, seed):
    pts = np.random.default_rng(seed).uniform(-0.45, 0.45, size=(200, 2))
    assert np.abs(undistort(distort(pts, c), c) - pts).max() <= 1e-6
    assert np.abs(distort(undistort(pts, c), c) - pts).max() <= 1e-6


def test_zero_distortion_is_identity(rng):
    pts = rng.normal(size=(10, 2))
    c = DistortionCoefficients()
    np.testing.assert_array_equal(distort(pts, c), pts)
    np.testing.assert_array_equal(undistort(pts, c), pts)


def test_non_monotone_distortion_rejected():
    with pytest.raises(InvalidSpec):
        DistortionCoefficients(k1=-1.0, max_radius=1.0)


def test_undistort_reports_non_convergence():
    c = DistortionCoefficients(k1=-0.3, k2=0.05, max_radius=0.5)
    with pytest.raises(NonConvergence):
        undistort(np.array([[3.0, 3.0]]), c, max_iters=1)


def test_pixel_ray_reprojection(camera, rng):
    pix = rng.uniform(0, 63, size=(200, 2))
    o, d, near, far, hit = camera_rays(camera, pix, jitter=(0.0, 0.0), roi_radius=10.0)
    pts = o + d * rng.uniform(0.5, 5.0, size=(200, 1))
    assert np.abs(project(camera, pts) - pix).max() <= 1e-4


def test_ray_invariants(camera):
    o, d, near, far, hit = camera_rays(camera, frame_pixels(64, 64))
    np.testing.assert_allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-9)
    assert np.all(near[hit] < far[hit]) and np.all(near[hit] >= 0)
    # every pixel of one camera shares the origin exactly
    assert np.all(o == o[0])


def test_pixel_center_convention():
    k = Intrinsics(100.0, 100.0, 32.0, 32.0, 64, 64)
    cam = CameraModel(k, DistortionCoefficients(), Pose(np.eye(3), np.array([0.0, 0.0, -3.0])))
    ray = pixel_to_ray(cam, (31, 31))  # center of pixel (31, 31) is (31.5, 31.5)
    np.testing.assert_allclose(ray.direction[:2] / ray.direction[2], [-0.005, -0.005], atol=1e-12)


def test_pixel_to_ray_errors(camera):
    with pytest.raises(InvalidSpec):
        pixel_to_ray(camera, (-3, 10))
    with pytest.raises(MissesROI):
        pixel_to_ray(camera, (0, 0), roi_radius=0.05)


def test_ray_sphere_known_values():
    near, far, hit = ray_sphere(np.array([[0.0, 0.0, -3.0], [0.0, 2.0, -3.0]]), np.array([[0, 0, 1.0], [0, 0, 1.0]]))
    np.testing.assert_allclose([near[0], far[0]], [2.0, 4.0])
    assert hit[0] and not hit[1]


def test_look_at_frame():
    pose = look_at((0.0, -3.0, 0.0))
    np.testing.assert_allclose(pose.rotation[:, 2], [0, 1, 0], atol=1e-12)  # +z looks at the origin
    np.testing.assert_allclose(pose.rotation.T @ pose.rotation, np.eye(3), atol=1e-12)
    assert np.linalg.det(pose.rotation) == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi), st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_star_pose_composition(a, b, t):
    ref = Pose(rotation_about_axis((0.3, 1.0, -0.2), a), np.array([0.5, -1.0, 2.0]))
    ext = Pose(rotation_about_axis((1.0, 0.0, 0.4), b), np.array(t))
    world = compose_star_pose(ref, ext)
    r = world.rotation
    assert np.abs(r.T @ r - np.eye(3)).max() <= 1e-9
    assert abs(np.linalg.det(r) - 1.0) <= 1e-9
    back = relative_pose(ref, world)
    np.testing.assert_allclose(back.rotation, ext.rotation, atol=1e-12)
    np.testing.assert_allclose(back.translation, ext.translation, atol=1e-12)


def test_star_pose_rejects_improper_rotation():
    ref = Pose(np.eye(3), np.zeros(3))
    bad = Pose.__new__(Pose)
    object.__setattr__(bad, "rotation", np.diag([1.0, 1.0, -1.0]))
    object.__setattr__(bad, "translation", np.zeros(3))
    with pytest.raises(PoseCompositionError):
        compose_star_pose(ref, bad)


def test_pose_serialization_round_trip():
    pose = look_at((1.0, 2.0, 2.0))
    back = Pose.from_dict(pose.to_dict())
    np.testing.assert_array_equal(back.rotation, pose.rotation)
    np.testing.assert_array_equal(back.translation, pose.translation)
