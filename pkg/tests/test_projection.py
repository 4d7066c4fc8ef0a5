import numpy as np
import pytest

from morphkit.errors import EmptyProjectionError, MeshFormatError, MeshValidationError, MissingInputError, ParameterError
from morphkit.fusion import RigidTransform
from morphkit.landmarks import LandmarkSet
from morphkit.mesh import PointCloud
from morphkit.projection import (Camera, DepthImage, DEPTH_SENTINEL, project_vertices, retrieve_3d_landmarks,
                                 project_landmarks, render_depth, save_pfm, load_pfm, save_pgm16, load_pgm16)


@pytest.fixture
def camera():
    return Camera(100.0, 100.0, 31.5, 23.5, 64, 48)


def test_camera_validation():
    with pytest.raises(ParameterError):
        Camera(0.0, 100.0, 10, 10, 64, 48)
    with pytest.raises(ParameterError):
        Camera(100.0, 100.0, 64, 10, 64, 48)
    with pytest.raises(ParameterError):
        Camera(100.0, 100.0, 10, 10, 0, 48)


def test_pinhole_projection(camera):
    uv, z = camera.project([[0.0, 0.0, 2.0], [0.2, -0.1, 2.0]])
    assert np.allclose(uv, [[31.5, 23.5], [41.5, 18.5]])
    assert np.allclose(z, [2.0, 2.0])


def test_extrinsics_apply_before_projection():
    turn = RigidTransform(np.array([[-1.0, 0, 0], [0, 1.0, 0], [0, 0, -1.0]]), [0.0, 0.0, 0.0])
    cam = Camera(100.0, 100.0, 31.5, 23.5, 64, 48, turn)
    uv, z = cam.project([[0.0, 0.0, -2.0]])
    assert z[0] == pytest.approx(2.0)
    assert np.allclose(uv[0], [31.5, 23.5])


def test_project_vertices_culls(camera):
    cloud = PointCloud([[0.0, 0.0, 2.0],     # centre
                        [0.0, 0.0, -2.0],    # behind
                        [5.0, 0.0, 2.0],     # outside the image
                        [0.1, 0.1, 1.0]])
    projected = project_vertices(cloud, camera)
    assert projected.indices.tolist() == [0, 3]
    assert np.allclose(projected.depths, [2.0, 1.0])


def test_retrieve_nearest_projection(camera, scheme):
    cloud = PointCloud([[0.0, 0.0, 2.0], [0.1, 0.0, 2.0], [0.0, 0.1, 2.0], [0.0, 0.0, -2.0]])
    lms2d = LandmarkSet((scheme.nose_tip, scheme.left_eye), [[36.0, 23.5], [31.5, 28.0]], scheme)
    lms3d = retrieve_3d_landmarks(cloud, camera, lms2d)
    assert lms3d.ids == lms2d.ids
    assert lms3d.vertex_indices.tolist() == [1, 2]
    assert np.array_equal(lms3d.positions, cloud.points[[1, 2]])


def test_retrieve_prefers_lowest_index_on_ties(camera, scheme):
    # both points project to the same pixel
    cloud = PointCloud([[0.1, 0.0, 2.0], [0.05, 0.0, 1.0], [0.0, 0.0, 2.0]])
    lms2d = LandmarkSet((scheme.nose_tip,), [[36.5, 23.5]], scheme)
    assert retrieve_3d_landmarks(cloud, camera, lms2d).vertex_indices.tolist() == [0]


def test_retrieve_needs_visible_points(camera, scheme):
    lms2d = LandmarkSet((scheme.nose_tip,), [[10.0, 10.0]], scheme)
    with pytest.raises(EmptyProjectionError):
        retrieve_3d_landmarks(PointCloud([[0.0, 0.0, -1.0]]), camera, lms2d)
    with pytest.raises(MeshValidationError):
        retrieve_3d_landmarks(PointCloud([[0.0, 0.0, 1.0]]), camera,
                              LandmarkSet((scheme.nose_tip,), [[0.0, 0.0, 1.0]], scheme))


def test_projected_landmarks_come_back(camera, scheme, rng):
    points = np.column_stack([rng.uniform(-0.2, 0.2, (30, 2)), rng.uniform(1.5, 2.5, 30)])
    cloud = PointCloud(points)
    ids = scheme.ids[:5]
    lms3d = LandmarkSet.from_vertices(points, [2, 7, 11, 19, 23], ids, scheme)
    lms2d = project_landmarks(lms3d, camera)
    assert lms2d.dim == 2 and lms2d.ids == ids
    retrieved = retrieve_3d_landmarks(cloud, camera, lms2d)
    assert retrieved.vertex_indices.tolist() == [2, 7, 11, 19, 23]


def test_render_depth_keeps_the_nearest(camera):
    cloud = PointCloud([[0.0, 0.0, 2.0], [0.0, 0.0, 1.0], [0.0, 0.0, 3.0]])
    image = render_depth(cloud, camera)
    assert (image.height, image.width) == (48, 64)
    assert image.depth[23, 31] == 1.0
    assert image.valid.sum() == 1
    assert image.depth[0, 0] == DEPTH_SENTINEL


def test_depth_image_validation():
    with pytest.raises(MeshValidationError):
        DepthImage(np.zeros(5))
    with pytest.raises(MeshValidationError):
        DepthImage([[1.0, -1.0]])


def test_pfm_file(tmp_path, rng):
    depth = rng.uniform(1.0, 3.0, (6, 9)).astype(np.float32).astype(np.float64)
    depth[2, 3] = DEPTH_SENTINEL
    loaded = load_pfm(save_pfm(DepthImage(depth), tmp_path / 'depth.pfm'))
    assert np.array_equal(loaded.depth, depth)


def test_pfm_truncated_and_missing(tmp_path):
    path = save_pfm(DepthImage(np.ones((4, 4))), tmp_path / 'depth.pfm')
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(MeshFormatError):
        load_pfm(path)
    with pytest.raises(MissingInputError):
        load_pfm(tmp_path / 'absent.pfm')


def test_pgm16_quantizes_within_half_a_step(tmp_path, rng):
    depth = rng.uniform(1.0, 3.0, (5, 7))
    depth[0, 0] = DEPTH_SENTINEL
    path = save_pgm16(DepthImage(depth), tmp_path / 'depth.pgm')
    assert (tmp_path / 'depth.json').is_file()
    loaded = load_pgm16(path)
    step = depth.max() / 65534
    assert loaded.depth[0, 0] == DEPTH_SENTINEL
    assert np.all(np.abs(loaded.depth - depth) <= step / 2 + 1e-12)
