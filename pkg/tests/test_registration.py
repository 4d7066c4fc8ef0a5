import numpy as np
import pandas as pd
import pytest

from morphkit.errors import MeshValidationError, NicpSolverError, ParameterError, MissingInputError
from morphkit.fusion import RigidTransform
from morphkit.mesh import MeshDistance, TriMesh
from morphkit.registration import (PartSegmentation, StiffnessGraph, VertexTransformField, build_stiffness_edges,
                                   default_stiffness_radius, coarse_register, nicp_register, nicp_cost, register,
                                   dislocated_vertices, save_registration)
from morphkit.synthetic import Bump, SyntheticHeadParams, generate_head, generate_template
from morphkit import reference

from conftest import point_triangle_distance, random_rotation, square_grid


@pytest.fixture(scope='module')
def template():
    return generate_template(subdivision=3)


@pytest.fixture(scope='module')
def subject():
    return generate_head(SyntheticHeadParams(subdivision=3).with_shape([1.0, -1.0, 0.5, 1.0, -1.0, 0.5]))


# ============= Types =============

def test_part_segmentation_validation():
    with pytest.raises(MeshValidationError):
        PartSegmentation(('a', 'b'), (1.0,), [0, 1])
    with pytest.raises(MeshValidationError):
        PartSegmentation(('a',), (-1.0,), [0])
    with pytest.raises(MeshValidationError):
        PartSegmentation(('a',), (1.0,), [0, 1])


def test_lambda_overrides(template, tmp_path):
    _, _, parts = template
    stiffer = parts.with_lambdas({'nose': 20.0})
    assert stiffer.lambda_of('nose') == 20.0
    assert stiffer.lambda_of('cheek') == parts.lambda_of('cheek')
    with pytest.raises(ParameterError):
        parts.with_lambdas({'ear': 1.0})
    loaded = PartSegmentation.load(stiffer.save(tmp_path / 'parts.json'))
    assert loaded.parts == stiffer.parts and loaded.lambdas == stiffer.lambdas
    assert np.array_equal(loaded.vertex_labels, stiffer.vertex_labels)
    with pytest.raises(MissingInputError):
        PartSegmentation.load(tmp_path / 'absent.json')


def test_template_carries_every_part(template):
    mesh, lms, parts = template
    assert parts.n_vertices == mesh.n_vertices
    for part in reference.FACE_PARTS:
        assert len(parts.vertices_of(part)), part
    assert np.array_equal(lms.positions, mesh.vertices[lms.vertex_indices])


def test_stiffness_edges_match_brute_force(template):
    mesh, _, _ = template
    radius = default_stiffness_radius(mesh)
    graph = build_stiffness_edges(mesh, radius)
    d = np.linalg.norm(mesh.vertices[:, None] - mesh.vertices[None], axis=2)
    i, j = np.nonzero(np.triu(d <= radius, k=1))
    assert graph.edges.tolist() == [list(e) for e in sorted(zip(i.tolist(), j.tolist()))]
    assert len(graph.isolated()) == 0
    with pytest.raises(ParameterError):
        build_stiffness_edges(mesh, 0.0)


def test_stiffness_graph_validation():
    with pytest.raises(MeshValidationError):
        StiffnessGraph([[1, 0]], 2)
    with pytest.raises(MeshValidationError):
        StiffnessGraph([[0, 2]], 2)


def test_identity_field(rng):
    field = VertexTransformField.identity(5)
    points = rng.normal(size=(5, 3))
    assert np.array_equal(field.apply(points), points)
    assert field.spread() == 0.0
    with pytest.raises(MeshValidationError):
        VertexTransformField(np.zeros((5, 3, 3)))


# ============= Registration =============

def test_similar_target_is_matched_exactly(rng, template):
    mesh, lms, parts = template
    motion = RigidTransform(random_rotation(rng), rng.normal(size=3), 1.3)
    target = mesh.with_vertices(motion.apply(mesh.vertices))
    result = register(mesh, target, lms, lms.transformed(motion), parts)
    assert np.allclose(result.mesh.vertices, target.vertices, atol=1e-6)
    assert np.array_equal(result.mesh.faces, mesh.faces)
    assert result.residuals.max() < 1e-6


def test_coarse_register_recovers_scale(rng, template):
    mesh, lms, _ = template
    motion = RigidTransform(random_rotation(rng), rng.normal(size=3), 0.7)
    target = mesh.with_vertices(motion.apply(mesh.vertices))
    coarse, T = coarse_register(mesh, target, lms, lms.transformed(motion), return_transform=True)
    assert T.scale == pytest.approx(0.7)
    assert np.allclose(coarse.vertices, target.vertices, atol=1e-8)


def test_nicp_pulls_the_template_onto_a_subject(template, subject):
    mesh, lms, parts = template
    target, target_lms = subject
    coarse = coarse_register(mesh, target, lms, target_lms)
    before, _, _ = MeshDistance(target).query(coarse.vertices)
    graph = build_stiffness_edges(coarse, default_stiffness_radius(coarse))
    result = nicp_register(coarse, target, parts, graph)
    assert result.residuals.mean() < before.mean()
    assert result.mesh.n_vertices == mesh.n_vertices
    # every linear solve minimizes its quadratic surrogate
    for step in result.history:
        assert step['surrogate_after'] <= step['surrogate_before'] * (1 + 1e-9) + 1e-12
    assert {step['multiplier'] for step in result.history} == {8.0, 4.0, 2.0, 1.0}
    cost = nicp_cost(result.transform_field, coarse, target, parts, graph)
    assert cost.value == pytest.approx(result.cost.value)


def test_zero_stiffness_without_data_is_singular(template, subject):
    mesh, lms, parts = template
    target, target_lms = subject
    loose = parts.with_lambdas({p: 0.0 for p in parts.parts})
    with pytest.raises(NicpSolverError):
        register(mesh, target, lms, target_lms, loose)


def test_nicp_rejects_bad_schedules(template, subject):
    mesh, _, parts = template
    target, _ = subject
    graph = build_stiffness_edges(mesh, default_stiffness_radius(mesh))
    with pytest.raises(ParameterError):
        nicp_register(mesh, target, parts, graph, schedule=())
    with pytest.raises(ParameterError):
        nicp_register(mesh, target, parts, graph, max_inner_iterations=0)
    with pytest.raises(MeshValidationError):
        nicp_register(mesh, target, parts.subset(np.arange(10)), graph)


def test_no_dislocation_against_itself(template):
    mesh, _, parts = template
    assert len(dislocated_vertices(mesh, mesh, parts)) == 0


def test_save_registration(tmp_path, rng, template):
    mesh, lms, parts = template
    motion = RigidTransform(random_rotation(rng), rng.normal(size=3))
    target = mesh.with_vertices(motion.apply(mesh.vertices))
    result = register(mesh, target, lms, lms.transformed(motion), parts, schedule=(1.0,), max_inner_iterations=2)
    mesh_path, residual_path, summary_path = save_registration(result, tmp_path, 'registered', 'ply')
    assert mesh_path.suffix == '.ply'
    residuals = pd.read_csv(residual_path)
    assert list(residuals.columns) == ['vertex_index', 'residual']
    assert len(residuals) == mesh.n_vertices
    assert summary_path.is_file()


# ============= Cost and registration against known answers =============

def _cost_from_definition(state, coarse, target, parts, graph):
    nearest = np.argmin(np.linalg.norm(target.vertices[:, None] - coarse.vertices[None], axis=2), axis=1)
    target_labels = parts.vertex_labels[nearest]
    lam = parts.vertex_lambdas()
    value = surrogate = 0.0
    for v in range(coarse.n_vertices):
        region = [f for f in target.faces if (target_labels[f] == parts.vertex_labels[v]).any()]
        region = region or list(target.faces)
        X = state.transforms[v]
        moved = X[:, :3] @ coarse.vertices[v] + X[:, 3]
        d = min(point_triangle_distance(moved, *target.vertices[f]) for f in region)
        diffs = [np.linalg.norm(state.transforms[a] - state.transforms[b]) for a, b in graph.edges if v in (a, b)]
        value += parts.weights[v] * d + lam[v] * sum(diffs)
        surrogate += parts.weights[v] * d ** 2 + lam[v] * sum(x ** 2 for x in diffs)
    return value, surrogate


def test_nicp_cost_matches_its_definition():
    rng = np.random.default_rng(31)
    grid = square_grid(4)
    for _ in range(50):
        target = grid.with_vertices(grid.vertices + np.column_stack([np.zeros((16, 2)),
                                                                     rng.normal(scale=0.1, size=16)]))
        coarse = TriMesh(rng.uniform(-0.2, 1.2, size=(30, 3)), np.zeros((0, 3), dtype=np.int64))
        parts = PartSegmentation(('a', 'b', 'c'), tuple(rng.uniform(0.0, 3.0, size=3)),
                                 rng.integers(0, 3, size=30), rng.uniform(0.5, 2.0, size=30))
        pairs = {tuple(sorted(rng.choice(30, size=2, replace=False))) for _ in range(60)}
        graph = StiffnessGraph(sorted(pairs), 30)
        state = VertexTransformField(np.eye(3, 4) + rng.normal(scale=0.05, size=(30, 3, 4)))
        value, surrogate = _cost_from_definition(state, coarse, target, parts, graph)
        cost = nicp_cost(state, coarse, target, parts, graph)
        assert cost.value == pytest.approx(value, abs=1e-10)
        assert cost.surrogate == pytest.approx(surrogate, abs=1e-10)


def test_nicp_cost_of_a_constant_field(template):
    mesh, _, parts = template
    graph = build_stiffness_edges(mesh, default_stiffness_radius(mesh))
    lifted = mesh.with_vertices(mesh.vertices + [0.0, 0.0, 0.01])
    cost = nicp_cost(VertexTransformField.identity(mesh.n_vertices), lifted, mesh, parts, graph)
    d, _, _ = MeshDistance(mesh).query(lifted.vertices)
    assert cost.value == pytest.approx(np.sum(parts.weights * d))
    with pytest.raises(ParameterError):
        nicp_cost(VertexTransformField.identity(mesh.n_vertices), mesh, mesh, parts, graph, stiffness_scale=-1.0)


def test_nicp_cost_stiffness_scale(rng, template):
    mesh, _, parts = template
    graph = build_stiffness_edges(mesh, default_stiffness_radius(mesh))
    state = VertexTransformField(np.eye(3, 4) + rng.normal(scale=1e-3, size=(mesh.n_vertices, 3, 4)))
    data = nicp_cost(state, mesh, mesh, parts, graph, stiffness_scale=0.0)
    full = nicp_cost(state, mesh, mesh, parts, graph)
    scaled = nicp_cost(state, mesh, mesh, parts, graph, stiffness_scale=2e-4)
    assert scaled.value == pytest.approx(data.value + 2e-4 * (full.value - data.value))
    assert scaled.surrogate == pytest.approx(data.surrogate + 2e-4 * (full.surrogate - data.surrogate))


BUMP_AMPLITUDE = 0.05     # of a head about 1 across in y


@pytest.fixture(scope='module')
def bumped(template):
    mesh, _, parts = template
    units = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1)[:, None]
    bump = Bump('cheek', 0.6, -0.2, BUMP_AMPLITUDE, 0.5).profile(units)
    target = mesh.with_vertices(mesh.vertices + bump[:, None] * units)
    graph = build_stiffness_edges(mesh, default_stiffness_radius(mesh))
    return target, graph


def _roughness(field, graph):
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    return float(np.linalg.norm((field.transforms[i] - field.transforms[j]).reshape(len(i), -1), axis=1).sum())


def test_nicp_follows_a_bump(template, bumped):
    mesh, _, parts = template
    target, graph = bumped
    result = nicp_register(mesh, target, parts, graph, max_inner_iterations=20)
    assert result.residuals.mean() < 0.01 * BUMP_AMPLITUDE
    assert np.array_equal(result.mesh.faces, mesh.faces)
    for step in result.history:
        assert step['surrogate_after'] <= step['surrogate_before'] * (1 + 1e-9) + 1e-12
    assert len(dislocated_vertices(mesh, result.mesh, parts)) == 0


def test_very_stiff_parts_give_a_constant_field(template, bumped):
    mesh, _, parts = template
    target, graph = bumped
    rigid = parts.with_lambdas({p: 1e6 for p in parts.parts})
    result = nicp_register(mesh, target, rigid, graph, base_weight=1.0)
    flat = result.transform_field.transforms.reshape(mesh.n_vertices, -1)
    pairwise = np.linalg.norm(flat[:, None] - flat[None], axis=2)
    assert pairwise.max() < 1e-3
    assert result.transform_field.spread() < 1e-3


def test_stiffer_parts_fit_less_and_bend_less(template, bumped):
    mesh, _, parts = template
    target, graph = bumped
    soft = nicp_register(mesh, target, parts, graph)
    stiff = nicp_register(mesh, target, parts.scaled(1000.0), graph)
    assert stiff.residuals.mean() > soft.residuals.mean()
    assert _roughness(stiff.transform_field, graph) < _roughness(soft.transform_field, graph)


def test_swapped_vertices_are_dislocated(template):
    mesh, lms, parts = template
    nose = lms.vertex_indices[lms.ids.index(lms.scheme.nose_tip)]
    edge = parts.vertices_of('boundary')[0]
    vertices = mesh.vertices.copy()
    vertices[[nose, edge]] = vertices[[edge, nose]]
    flagged = dislocated_vertices(mesh, mesh.with_vertices(vertices), parts)
    assert {nose, edge} <= set(flagged.tolist())
