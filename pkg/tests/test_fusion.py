import logging

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from morphkit.errors import (DegenerateConfigurationError, EmptySetError, MeshValidationError, NoCorrespondenceError,
                             ParameterError)
from morphkit.fusion import (RigidTransform, IcpParams, fit_transform, estimate_rigid_from_landmarks, icp_refine,
                             fuse_views, carry_topology)
from morphkit.landmarks import LandmarkSet
from morphkit.mesh import PointCloud
from morphkit.synthetic import SyntheticHeadParams, generate_head, simulate_scan

from conftest import random_rotation


@pytest.fixture(scope='module')
def head():
    return generate_head(SyntheticHeadParams(subdivision=3))


# ============= Transforms =============

def test_rotation_must_be_proper():
    with pytest.raises(MeshValidationError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(MeshValidationError):
        RigidTransform(np.full((3, 3), 0.5))
    with pytest.raises(ParameterError):
        RigidTransform(scale=0.0)


def test_compose_and_inverse(rng):
    a = RigidTransform(random_rotation(rng), rng.normal(size=3), 1.7)
    b = RigidTransform(random_rotation(rng), rng.normal(size=3), 0.4)
    points = rng.normal(size=(10, 3))
    assert np.allclose(a.compose(b).apply(points), a.apply(b.apply(points)))
    assert np.allclose(a.inverse().apply(a.apply(points)), points)
    assert np.allclose(a.matrix() @ np.append(points[0], 1.0), np.append(a.apply(points[0]), 1.0))
    restored = RigidTransform.from_dict(a.to_dict())
    assert np.allclose(restored.apply(points), a.apply(points))


@pytest.mark.parametrize('with_scale', [False, True])
def test_fit_transform_recovers_a_known_transform(rng, with_scale):
    truth = RigidTransform(random_rotation(rng), rng.normal(size=3), 2.5 if with_scale else 1.0)
    src = rng.normal(size=(20, 3))
    fitted = fit_transform(src, truth.apply(src), with_scale=with_scale)
    assert np.allclose(fitted.rotation, truth.rotation, atol=1e-10)
    assert np.allclose(fitted.translation, truth.translation, atol=1e-10)
    assert fitted.scale == pytest.approx(truth.scale)


def test_fit_transform_avoids_reflections(rng):
    src = rng.normal(size=(30, 3))
    mirrored = src * [1.0, 1.0, -1.0]
    fitted = fit_transform(src, mirrored)
    assert np.linalg.det(fitted.rotation) == pytest.approx(1.0)


def test_fit_transform_degenerate_configurations():
    with pytest.raises(DegenerateConfigurationError) as e:
        fit_transform(np.eye(3)[:2], np.eye(3)[:2])
    assert e.value.n_points == 2
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateConfigurationError):
        fit_transform(line, line)


def test_estimate_from_partial_landmarks(rng, head):
    _, lms = head
    truth = RigidTransform(random_rotation(rng), rng.normal(size=3))
    partial = lms.subset(lms.ids[::2])
    fitted = estimate_rigid_from_landmarks(partial, lms.transformed(truth))
    assert np.allclose(fitted.apply(lms.positions), truth.apply(lms.positions), atol=1e-10)


def test_rigid_recovery_from_noiseless_landmarks(head):
    _, lms = head
    rng = np.random.default_rng(7)
    for _ in range(100):
        truth = RigidTransform(random_rotation(rng), rng.uniform(-1.0, 1.0, size=3))
        fitted = estimate_rigid_from_landmarks(lms, lms.transformed(truth))
        angle = Rotation.from_matrix(fitted.rotation @ truth.rotation.T).magnitude()
        assert angle < 1e-9
        assert np.linalg.norm(fitted.translation - truth.translation) < 1e-9


# ============= ICP =============

def test_icp_params_validation():
    with pytest.raises(ParameterError):
        IcpParams(pyramid=(0.1, 0.5))
    with pytest.raises(ParameterError):
        IcpParams(metric='point_to_surface')
    with pytest.raises(ParameterError):
        IcpParams(reject_distance='median')


@pytest.mark.parametrize('metric', ['point_to_point', 'point_to_plane'])
def test_icp_undoes_a_small_motion(rng, head, metric):
    mesh, _ = head
    dst = PointCloud(mesh.vertices, normals=mesh.vertex_normals())
    motion = RigidTransform(random_rotation(rng, max_angle=0.03), [0.01, -0.005, 0.0])
    src = PointCloud(motion.apply(mesh.vertices))
    T, rms = icp_refine(src, dst, params=IcpParams(metric=metric, max_iterations=100, convergence_delta=1e-12))
    assert rms < 1e-5
    assert np.allclose(T.apply(src.points), mesh.vertices, atol=1e-4)


def test_icp_converges_from_moderate_motions(head):
    mesh, _ = head
    dst = PointCloud(mesh.vertices)
    diameter = mesh.bounding_box_diagonal()
    params = IcpParams(max_iterations=50, convergence_delta=1e-12, reject_distance=None, pyramid=(1.0,))
    rng = np.random.default_rng(11)
    converged = 0
    for _ in range(100):
        shift = rng.normal(size=3)
        shift *= rng.uniform(0.0, 0.1 * diameter) / np.linalg.norm(shift)
        motion = RigidTransform(random_rotation(rng, max_angle=np.deg2rad(15.0)), shift)
        _, rms, history = icp_refine(PointCloud(motion.apply(mesh.vertices)), dst, params=params,
                                     return_history=True)
        level = history[0]
        assert len(level) <= 50
        assert all(b <= a * (1 + 1e-9) + 1e-12 for a, b in zip(level, level[1:]))
        converged += rms < 1e-6
    assert converged >= 95


def test_icp_iterates_past_the_first_step(rng, head):
    mesh, _ = head
    motion = RigidTransform(random_rotation(rng, max_angle=0.1), [0.02, 0.0, -0.01])
    _, _, history = icp_refine(PointCloud(motion.apply(mesh.vertices)), PointCloud(mesh.vertices),
                               params=IcpParams(pyramid=(1.0,)), return_history=True)
    assert len(history[0]) > 2


def test_icp_keeps_an_exact_seed(rng, head):
    mesh, _ = head
    motion = RigidTransform(random_rotation(rng), rng.normal(size=3))
    src = PointCloud(motion.apply(mesh.vertices))
    T, rms, history = icp_refine(src, PointCloud(mesh.vertices), init=motion.inverse(), return_history=True)
    assert rms < 1e-10
    assert len(history) == len(IcpParams().pyramid)


def test_icp_without_correspondences(head):
    mesh, _ = head
    far = PointCloud(mesh.vertices + 100.0)
    with pytest.raises(NoCorrespondenceError):
        icp_refine(far, PointCloud(mesh.vertices), params=IcpParams(reject_distance=1e-3))
    with pytest.raises(EmptySetError):
        icp_refine(PointCloud(np.zeros((0, 3))), PointCloud(mesh.vertices))


# ============= Fusion =============

def _inputs(views):
    return {v.view: (v.cloud, v.landmarks) for v in views}


def test_fuse_views_recovers_the_surface(head):
    mesh, lms = head
    views = {v.view: v for v in simulate_scan(mesh, lms)}
    inputs = _inputs(views.values())
    fused, fused_lms, poses = fuse_views(inputs['left'], inputs['middle'], inputs['right'], return_poses=True)

    to_middle = views['middle'].to_world.inverse()
    for view in ('left', 'right'):
        expected = to_middle.compose(views[view].to_world)
        assert np.allclose(poses[view].rotation, expected.rotation, atol=1e-6)
        assert np.allclose(poses[view].translation, expected.translation, atol=1e-6)

    seen = np.unique(np.concatenate([v.cloud.vertex_ids for v in views.values()]))
    assert np.array_equal(np.sort(fused.vertex_ids), seen)
    assert np.allclose(fused.points, to_middle.apply(mesh.vertices[fused.vertex_ids]), atol=1e-6)
    assert set(fused.views) <= {'left', 'middle', 'right'}

    seen_lms = set().union(*(v.landmarks.ids for v in views.values()))
    assert set(fused_lms.ids) == seen_lms
    truth = lms.transformed(to_middle)
    _, got, want = fused_lms.matched(truth)
    assert np.allclose(got, want, atol=1e-6)


def test_fuse_views_with_a_missing_view(head, caplog):
    mesh, lms = head
    inputs = _inputs(simulate_scan(mesh, lms))
    empty = (PointCloud(np.zeros((0, 3))), LandmarkSet((), np.zeros((0, 3)), lms.scheme))
    with pytest.raises(EmptySetError):
        fuse_views(inputs['left'], inputs['middle'], empty)
    with caplog.at_level(logging.WARNING, logger='morphkit.fusion'):
        fused, _, poses = fuse_views(inputs['left'], inputs['middle'], empty, allow_missing_view=True,
                                     return_poses=True)
    assert 'Skipping empty right view' in caplog.text
    assert set(poses) == {'left', 'middle'}
    assert 'right' not in set(fused.views)


def test_fuse_views_rejects_bad_epsilon(head):
    mesh, lms = head
    inputs = _inputs(simulate_scan(mesh, lms))
    with pytest.raises(ParameterError):
        fuse_views(inputs['left'], inputs['middle'], inputs['right'], merge_epsilon=0.0)


def test_carry_topology_keeps_complete_faces():
    cloud = PointCloud(np.arange(12.0).reshape(4, 3), vertex_ids=[2, 0, 1, 2])
    mesh = carry_topology(cloud, [[0, 1, 2], [1, 2, 3]])
    assert mesh.faces.tolist() == [[1, 2, 0]]
    assert np.array_equal(mesh.vertices, cloud.points)
    with pytest.raises(MeshValidationError):
        carry_topology(PointCloud(np.zeros((3, 3))), [[0, 1, 2]])
