import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from skytomo.errors import (BehindCameraError, DegenerateProjectionError, GeometryError,
                            NoIntersectionError, OutOfBoundsError)
from skytomo.geometry import (CameraModel, GridSpec, HeightSweep, Rig, default_rig, look_at,
                              pixel_to_plane, pixels_to_plane, plane_homography, project,
                              project_points, voxel_center, world_to_voxel)


def test_project_principal_axis(upward_camera):
    np.testing.assert_allclose(project(upward_camera, (0, 0, 1000)), (500, 500), atol=1e-12)


def test_project_offset_point(upward_camera):
    np.testing.assert_allclose(project(upward_camera, (100, 0, 1000)), (600, 500), atol=1e-12)


def test_project_camera_center_is_degenerate(upward_camera):
    with pytest.raises(DegenerateProjectionError):
        project(upward_camera, (0, 0, 0))
    cam = look_at((10, 20, 0), (500, 500, 800), 64, 64, 90)
    with pytest.raises(DegenerateProjectionError):
        project(cam, cam.center)


@pytest.mark.parametrize("pixel,h,expected", [
    ((500, 500), 1000, (0, 0)),
    ((600, 500), 1000, (100, 0)),
    ((600, 500), 2000, (200, 0)),
])
def test_pixel_to_plane_examples(upward_camera, pixel, h, expected):
    np.testing.assert_allclose(pixel_to_plane(upward_camera, pixel, h), expected, atol=1e-9)


def test_pixel_to_plane_errors(upward_camera):
    with pytest.raises(BehindCameraError):
        pixel_to_plane(upward_camera, (500, 500), -100)
    with pytest.raises(NoIntersectionError):
        pixel_to_plane(upward_camera, (500, 500), 0.0)
    side = CameraModel(K=upward_camera.K, R=np.array([[1.0, 0, 0], [0, 0, -1], [0, 1, 0]]),
                       t=np.zeros(3), width=1000, height=1000)
    # principal ray of this camera is horizontal
    with pytest.raises(NoIntersectionError):
        pixel_to_plane(side, (500, 500), 1000)


def test_camera_validation():
    with pytest.raises(GeometryError):
        CameraModel(K=np.eye(3), R=2 * np.eye(3), t=np.zeros(3), width=4, height=4)
    with pytest.raises(GeometryError):
        CameraModel(K=[[1, 0, 0], [1, 1, 0], [0, 0, 1]], R=np.eye(3), t=np.zeros(3), width=4, height=4)
    with pytest.raises(GeometryError):
        CameraModel(K=np.eye(3), R=np.diag([1.0, 1.0, -1.0]), t=np.zeros(3), width=4, height=4)


def test_voxel_indexing_examples():
    spec = GridSpec()
    assert world_to_voxel(spec, (12.4, 0.0, 37.5)) == (0, 0, 1)
    np.testing.assert_allclose(voxel_center(spec, (0, 0, 0)), (12.5, 12.5, 12.5))
    idx = (199, 199, 159)
    assert world_to_voxel(spec, voxel_center(spec, idx)) == idx
    with pytest.raises(OutOfBoundsError):
        world_to_voxel(spec, (-1.0, 0, 0))
    with pytest.raises(OutOfBoundsError):
        voxel_center(spec, (200, 0, 0))


@given(st.tuples(st.integers(0, 199), st.integers(0, 199), st.integers(0, 159)))
def test_voxel_round_trip(idx):
    spec = GridSpec(origin=(-300.0, 50.0, 0.0))
    assert world_to_voxel(spec, voxel_center(spec, idx)) == idx


def test_default_sweep():
    assert HeightSweep().heights == tuple(400.0 + 200.0 * k for k in range(18))
    assert HeightSweep().H == 18
    with pytest.raises(GeometryError):
        HeightSweep((1.0, 1.0))


def test_default_rig_outside_volume():
    spec = GridSpec()
    rig = default_rig(spec)
    assert rig.N == 6
    rig.check_outside(spec)
    inside = Rig((look_at((2500, 2500, 1000), (2500, 2600, 2000), 32, 32, 60),))
    with pytest.raises(GeometryError):
        inside.check_outside(spec)


def test_rig_dict_round_trip():
    rig = default_rig(GridSpec(dims=(64, 64, 64)))
    back = Rig.from_dict(rig.to_dict())
    for a, b in zip(rig, back):
        assert np.array_equal(a.K, b.K) and np.array_equal(a.R, b.R) and np.array_equal(a.t, b.t)


def test_homography_matches_ray_intersection():
    rig = default_rig(GridSpec())
    rng = np.random.default_rng(3)
    for cam in rig:
        for h in (400.0, 2200.0, 3800.0):
            Hm = plane_homography(cam, h)
            pix = rng.uniform(0, 63, size=(50, 2))
            q = np.column_stack([pix, np.ones(50)]) @ Hm.T
            xy = q[:, :2] / q[:, 2:]
            ref, ok = pixels_to_plane(cam, pix, h)
            np.testing.assert_allclose(xy[ok], ref[ok], rtol=1e-9, atol=1e-6)


def test_pixel_to_plane_preserves_collinearity():
    cam = default_rig(GridSpec())[2]
    a, b = np.array([5.0, 40.0]), np.array([60.0, 12.0])
    pix = np.array([a + s * (b - a) for s in np.linspace(0, 1, 7)])
    xy, ok = pixels_to_plane(cam, pix, 1800.0)
    assert ok.all()
    d = xy - xy[0]
    d /= np.linalg.norm(d[-1])
    cross = d[1:, 0] * d[-1, 1] - d[1:, 1] * d[-1, 0]
    assert np.max(np.abs(cross)) < 1e-8


@given(st.floats(0, 63), st.floats(0, 63), st.sampled_from(HeightSweep().heights))
def test_round_trip_property(u, v, h):
    cam = default_rig(GridSpec())[0]
    _, ok = pixels_to_plane(cam, np.array([[u, v]]), h)
    assume(ok[0])     # rows near the bottom edge look below the horizon
    xy = pixel_to_plane(cam, (u, v), h)
    uv = project(cam, (xy[0], xy[1], h))
    np.testing.assert_allclose(uv, (u, v), atol=1e-6)
    back = pixel_to_plane(cam, uv, h)
    assert np.max(np.abs(back - xy)) <= 1e-6 * max(1.0, np.max(np.abs(xy)))


def test_project_points_vectorized_matches_scalar():
    cam = default_rig(GridSpec())[1]
    pts = np.random.default_rng(0).uniform([0, 0, 500], [5000, 5000, 4000], size=(20, 3))
    uv, depth = project_points(cam, pts)
    for p, q, d in zip(pts, uv, depth):
        if d > 0:
            np.testing.assert_allclose(project(cam, p), q, rtol=1e-12)
