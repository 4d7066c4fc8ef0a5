'''
Two-stage template registration: landmark-seeded similarity + ICP coarse fit, then
non-rigid ICP with per-part stiffness, producing meshes with the template's faces.
'''
import logging
import pathlib
from dataclasses import dataclass, field
from typing import NamedTuple, Tuple

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .errors import (MeshValidationError, NicpSolverError, ParameterError, MissingInputError)
from .fusion import IcpParams, estimate_rigid_from_landmarks, icp_refine
from .mesh import TriMesh, PointCloud, MeshDistance, save_mesh
from . import utilities

logger = logging.getLogger(__name__)

DEFAULT_SCHEDULE = (8.0, 4.0, 2.0, 1.0)
DEFAULT_INNER_ITERATIONS = 10
STIFFNESS_RADIUS_FRACTION = 0.05    # of the template bounding-box diagonal
STIFFNESS_BASE_WEIGHT = 2e-4        # edge weight per unit lambda, unit-normalized template


# ============= Types =============

@dataclass(frozen=True, eq=False)
class PartSegmentation:
    '''Per-vertex face-part labels with a stiffness weight per part and an importance weight per vertex'''
    parts: Tuple[str, ...]
    lambdas: Tuple[float, ...]
    vertex_labels: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        parts = tuple(self.parts)
        lambdas = tuple(float(x) for x in self.lambdas)
        if len(parts) != len(lambdas) or len(set(parts)) != len(parts):
            raise MeshValidationError('Parts must be unique, one lambda each')
        if any(not (np.isfinite(x) and x >= 0) for x in lambdas):
            raise MeshValidationError(f'Stiffness weights must be non-negative, got {lambdas}')
        labels = np.array(self.vertex_labels, dtype=np.int64).reshape(-1)
        if labels.size and (labels.min() < 0 or labels.max() >= len(parts)):
            raise MeshValidationError('Vertex label outside the part list')
        weights = np.ones(len(labels)) if self.weights is None else np.array(self.weights, dtype=np.float64)
        if weights.shape != labels.shape or not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise MeshValidationError('Vertex weights must be finite, non-negative, one per vertex')
        labels.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, 'parts', parts)
        object.__setattr__(self, 'lambdas', lambdas)
        object.__setattr__(self, 'vertex_labels', labels)
        object.__setattr__(self, 'weights', weights)

    @property
    def n_vertices(self):
        return len(self.vertex_labels)

    def vertex_lambdas(self):
        return np.asarray(self.lambdas)[self.vertex_labels]

    def lambda_of(self, part):
        return self.lambdas[self.parts.index(part)]

    def vertices_of(self, part):
        return np.flatnonzero(self.vertex_labels == self.parts.index(part))

    def with_lambdas(self, overrides):
        unknown = set(overrides) - set(self.parts)
        if unknown:
            raise ParameterError('part', sorted(unknown), f'Unknown face parts {sorted(unknown)}; known: {list(self.parts)}')
        lambdas = tuple(float(overrides.get(p, lam)) for p, lam in zip(self.parts, self.lambdas))
        return PartSegmentation(self.parts, lambdas, self.vertex_labels, self.weights)

    def scaled(self, k):
        return PartSegmentation(self.parts, tuple(k * lam for lam in self.lambdas), self.vertex_labels, self.weights)

    def subset(self, keep):
        return PartSegmentation(self.parts, self.lambdas, self.vertex_labels[keep], self.weights[keep])

    def to_dict(self):
        return {'parts': [{'id': p, 'lambda': lam} for p, lam in zip(self.parts, self.lambdas)],
                'vertex_labels': self.vertex_labels.tolist(),
                'weights': self.weights.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(p['id'] for p in d['parts']), tuple(p['lambda'] for p in d['parts']),
                   d['vertex_labels'], d.get('weights'))

    def save(self, path):
        return utilities.write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        if not pathlib.Path(path).is_file():
            raise MissingInputError(path)
        return cls.from_dict(utilities.read_json(path))


@dataclass(frozen=True, eq=False)
class StiffnessGraph:
    '''Undirected template-vertex pairs within the neighbourhood radius, stored once as i < j'''
    edges: np.ndarray
    n_vertices: int
    radius: float = float('nan')

    def __post_init__(self):
        edges = np.array(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (np.any(edges[:, 0] >= edges[:, 1]) or edges.max() >= self.n_vertices or edges.min() < 0):
            raise MeshValidationError('Stiffness edges must be (i, j) with i < j < n_vertices')
        edges.setflags(write=False)
        object.__setattr__(self, 'edges', edges)

    @property
    def n_edges(self):
        return len(self.edges)

    def degree(self):
        return np.bincount(self.edges.ravel(), minlength=self.n_vertices)

    def isolated(self):
        return np.flatnonzero(self.degree() == 0)


@dataclass(frozen=True, eq=False)
class VertexTransformField:
    '''One 3x4 affine transform per template vertex'''
    transforms: np.ndarray

    def __post_init__(self):
        transforms = np.array(self.transforms, dtype=np.float64)
        if transforms.ndim != 3 or transforms.shape[1:] != (3, 4):
            raise MeshValidationError(f'Transform field must have shape (n, 3, 4), got {transforms.shape}')
        if not np.all(np.isfinite(transforms)):
            raise MeshValidationError('Transform field entries must be finite')
        transforms.setflags(write=False)
        object.__setattr__(self, 'transforms', transforms)

    @classmethod
    def identity(cls, n):
        return cls(np.tile(np.eye(3, 4), (n, 1, 1)))

    def __len__(self):
        return len(self.transforms)

    def apply(self, vertices):
        vertices = np.asarray(vertices, dtype=np.float64)
        return np.einsum('nij,nj->ni', self.transforms[:, :, :3], vertices) + self.transforms[:, :, 3]

    def spread(self):
        '''Norm of the per-entry range over all vertices; bounds every pairwise Frobenius difference'''
        flat = self.transforms.reshape(len(self), -1)
        spread = flat.max(axis=0) - flat.min(axis=0)
        return float(np.linalg.norm(spread))


class NicpCost(NamedTuple):
    value: float        # unsquared distances and Frobenius norms
    surrogate: float    # squared distances and squared Frobenius norms


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    mesh: TriMesh
    cost: NicpCost
    residuals: np.ndarray
    transform_field: VertexTransformField
    history: list = field(default_factory=list)


# ============= Stiffness graph =============

def default_stiffness_radius(template):
    '''A fraction of the bounding-box diagonal, never below twice the median edge length'''
    radius = STIFFNESS_RADIUS_FRACTION * template.bounding_box_diagonal()
    if template.n_faces:
        tri = template.triangles()
        edges = np.linalg.norm(tri - np.roll(tri, 1, axis=1), axis=2)
        radius = max(radius, 2.0 * float(np.median(edges)))
    return radius


def build_stiffness_edges(template, radius):
    '''All template vertex pairs at Euclidean distance <= radius'''
    if not radius > 0:
        raise ParameterError('radius', radius)
    pairs = cKDTree(template.vertices).query_pairs(r=radius, output_type='ndarray')
    pairs = np.sort(pairs, axis=1)
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))] if len(pairs) else pairs.reshape(0, 2)
    graph = StiffnessGraph(pairs, template.n_vertices, float(radius))
    isolated = graph.isolated()
    if len(isolated):
        logger.warning(f'{len(isolated)} of {template.n_vertices} template vertices have no stiffness edge '
                       f'at radius {radius:.4g}')
    return graph


# ============= Coarse stage =============

def coarse_register(template, target, template_lms, target_lms, params=None, return_transform=False):
    '''Similarity transform from the landmarks, refined by ICP against the target vertices'''
    seed = estimate_rigid_from_landmarks(template_lms, target_lms, with_scale=True)
    T, rms = icp_refine(PointCloud(template.vertices), PointCloud(target.vertices), seed, params or IcpParams())
    logger.info(f'Coarse registration: scale {T.scale:.4f}, ICP RMS {rms:.3e}')
    coarse = template.with_vertices(T.apply(template.vertices))
    if return_transform:
        return coarse, T
    return coarse


# ============= Non-rigid stage =============

def part_regions(coarse, target, parts):
    '''Target faces per part: faces touching a target vertex whose nearest coarse vertex carries the part'''
    _, nearest = cKDTree(coarse.vertices).query(target.vertices, workers=utilities.n_workers())
    target_labels = parts.vertex_labels[nearest]
    regions = []
    for p in range(len(parts.parts)):
        touching = (target_labels[target.faces] == p).any(axis=1)
        regions.append(np.flatnonzero(touching))
    return regions


def _region_distances(coarse, target, parts):
    '''One MeshDistance per part; parts without target faces fall back to the whole target'''
    whole = None
    distances = []
    for p, faces in enumerate(part_regions(coarse, target, parts)):
        if len(faces) == 0:
            whole = whole or MeshDistance(target)
            logger.debug(f'Part {parts.parts[p]} has no target region; using the whole target')
            distances.append(whole)
        else:
            distances.append(MeshDistance(TriMesh(target.vertices, target.faces[faces])))
    return distances


def _closest_in_regions(points, parts, region_distances):
    d = np.empty(len(points))
    closest = np.empty_like(points)
    for p, region in enumerate(region_distances):
        members = np.flatnonzero(parts.vertex_labels == p)
        if len(members):
            d[members], closest[members], _ = region.query(points[members])
    return d, closest


def nicp_cost(state, coarse, target, parts, graph, stiffness_scale=1.0):
    '''Per-part data term plus stiffness term, both literal (unsquared) and as the squared surrogate.

    The stiffness term is sum_i lambda_i * sum over the edges at i of the Frobenius
    difference, i.e. (lambda_i + lambda_j) per stored edge, in raw coordinates, times
    `stiffness_scale`. The default reports the objective with the part lambdas as
    given; nicp_register solves with base_weight * multiplier * lambda on the
    unit-normalized template instead, so pass stiffness_scale=base_weight * multiplier
    to weigh the stiffness term the way one solver stage does.
    '''
    if not (np.isfinite(stiffness_scale) and stiffness_scale >= 0):
        raise ParameterError('stiffness_scale', stiffness_scale)
    n = coarse.n_vertices
    if len(state) != n or parts.n_vertices != n or graph.n_vertices != n:
        raise MeshValidationError(f'Field ({len(state)}), segmentation ({parts.n_vertices}) and graph '
                                  f'({graph.n_vertices}) must all match the {n} coarse vertices')
    moved = state.apply(coarse.vertices)
    d, _ = _closest_in_regions(moved, parts, _region_distances(coarse, target, parts))
    lam = parts.vertex_lambdas()
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    diff = np.linalg.norm((state.transforms[i] - state.transforms[j]).reshape(len(i), -1), axis=1)
    pair_weight = stiffness_scale * (lam[i] + lam[j])
    value = float(np.sum(parts.weights * d) + np.sum(pair_weight * diff))
    surrogate = float(np.sum(parts.weights * d ** 2) + np.sum(pair_weight * diff ** 2))
    return NicpCost(value, surrogate)


class _Normalizer:
    '''Centers on the bounding box and scales its half-diagonal to 1'''

    def __init__(self, vertices):
        low, high = vertices.min(axis=0), vertices.max(axis=0)
        self.center = (low + high) / 2
        self.scale = max(float(np.linalg.norm(high - low)) / 2, 1e-300)

    def forward(self, points):
        return (points - self.center) / self.scale

    def backward(self, points):
        return points * self.scale + self.center

    def field_to_raw(self, X):
        '''(n, 4, 3) normalized unknowns -> (n, 3, 4) raw-coordinate transforms'''
        A = np.transpose(X[:, :3, :], (0, 2, 1))
        b = X[:, 3, :]
        translation = self.scale * b + self.center - A @ self.center
        return np.concatenate([A, translation[:, :, None]], axis=2)


def _check_solvable(points, data_weights, edge_weights, graph, parts):
    '''Every stiffness component needs four affinely independent vertices with data'''
    n = len(points)
    active_edges = graph.edges[edge_weights > 0]
    adjacency = sparse.coo_matrix((np.ones(len(active_edges)), (active_edges[:, 0], active_edges[:, 1])),
                                  shape=(n, n))
    n_components, component = csgraph.connected_components(adjacency, directed=False)
    for c in range(n_components):
        members = np.flatnonzero(component == c)
        active = members[data_weights[members] > 0]
        ok = len(active) >= 4
        if ok:
            centered = points[active] - points[active].mean(axis=0)
            sv = np.linalg.svd(centered, compute_uv=False)
            ok = sv[2] > 1e-9 * sv[0]
        if not ok:
            labels = np.bincount(parts.vertex_labels[members], minlength=len(parts.parts))
            raise NicpSolverError(parts.parts[int(np.argmax(labels))])


def _surrogate(X, data_matrix, targets, data_weights, incidence, edge_weights):
    fit = data_matrix @ X - targets
    stiff = incidence @ X
    return float(np.sum(data_weights[:, None] * fit ** 2) + np.sum(np.repeat(edge_weights, 4)[:, None] * stiff ** 2))


def nicp_register(coarse, target, parts, graph, schedule=DEFAULT_SCHEDULE,
                  max_inner_iterations=DEFAULT_INNER_ITERATIONS, tolerance=1e-6,
                  base_weight=STIFFNESS_BASE_WEIGHT):
    '''Non-rigid ICP of the coarse-registered template onto the target surface.

    For each global stiffness multiplier of `schedule` the solver alternates
    closest-point correspondences inside each vertex's part region with one
    sparse linear least-squares solve for every per-vertex affine transform,
    the stiffness term entering as squared Frobenius differences weighted by
    base_weight * multiplier * (lambda_i + lambda_j). Correspondences farther
    than max(3 x median, stiffness radius) are dropped for that iteration.
    Coordinates are unit-normalized on the coarse mesh bounding box.
    '''
    n = coarse.n_vertices
    if parts.n_vertices != n or graph.n_vertices != n:
        raise MeshValidationError(f'Segmentation ({parts.n_vertices}) and graph ({graph.n_vertices}) '
                                  f'must match the {n} coarse vertices')
    if int(max_inner_iterations) != max_inner_iterations or max_inner_iterations < 1:
        raise ParameterError('max_inner_iterations', max_inner_iterations)
    if not schedule or any(not m > 0 for m in schedule):
        raise ParameterError('schedule', schedule)
    normalizer = _Normalizer(coarse.vertices)
    points = normalizer.forward(coarse.vertices)
    reject_floor = graph.radius / normalizer.scale if np.isfinite(graph.radius) else 0.0

    rows = np.repeat(np.arange(n), 4)
    data_matrix = sparse.csr_matrix((np.column_stack([points, np.ones(n)]).ravel(), (rows, np.arange(4 * n))),
                                    shape=(n, 4 * n))
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    m = graph.n_edges
    incidence = sparse.csr_matrix((np.tile([1.0, -1.0], m), (np.repeat(np.arange(m), 2), graph.edges.ravel())),
                                  shape=(m, n))
    incidence4 = sparse.kron(incidence, sparse.identity(4), format='csr')
    lam = parts.vertex_lambdas()
    regions = _region_distances(coarse, target, parts)

    X = np.tile(np.vstack([np.eye(3), np.zeros((1, 3))]), (n, 1))      # (4n, 3)
    history = []
    for multiplier in schedule:
        edge_weights = base_weight * multiplier * (lam[i] + lam[j])
        laplacian = (incidence.T @ sparse.diags(edge_weights) @ incidence).tocsr()
        stiffness = sparse.kron(laplacian, sparse.identity(4), format='csr')
        for iteration in range(max_inner_iterations):
            moved = normalizer.backward(data_matrix @ X)
            d, closest = _closest_in_regions(moved, parts, regions)
            d = d / normalizer.scale
            threshold = max(3.0 * float(np.median(d)), reject_floor)
            kept = d <= threshold
            data_weights = parts.weights * kept
            targets = normalizer.forward(closest)
            _check_solvable(points, data_weights, edge_weights, graph, parts)
            before = _surrogate(X, data_matrix, targets, data_weights, incidence4, edge_weights)
            system = (stiffness + data_matrix.T @ sparse.diags(data_weights) @ data_matrix).tocsc()
            rhs = data_matrix.T @ (data_weights[:, None] * targets)
            try:
                X_new = splu(system).solve(rhs)
            except RuntimeError as e:
                raise NicpSolverError(parts.parts[int(np.bincount(parts.vertex_labels).argmax())],
                                      f'Singular NICP system: {e}')
            after = _surrogate(X_new, data_matrix, targets, data_weights, incidence4, edge_weights)
            if after > before * (1 + 1e-9) + 1e-12:
                logger.warning(f'NICP surrogate increased from {before:.6e} to {after:.6e} '
                               f'(multiplier {multiplier}, iteration {iteration})')
            change = float(np.abs(X_new - X).max())
            X = X_new
            history.append({'multiplier': float(multiplier), 'iteration': iteration,
                            'surrogate_before': before, 'surrogate_after': after,
                            'n_rejected': int((~kept).sum()), 'max_change': change})
            if change < tolerance:
                break
        logger.debug(f'NICP multiplier {multiplier}: {iteration + 1} iterations, surrogate {history[-1]["surrogate_after"]:.4e}')

    state = VertexTransformField(normalizer.field_to_raw(X.reshape(n, 4, 3)))
    registered = coarse.with_vertices(state.apply(coarse.vertices))
    residuals, _, _ = MeshDistance(target).query(registered.vertices)
    cost = nicp_cost(state, coarse, target, parts, graph)
    logger.info(f'NICP done: mean residual {residuals.mean():.3e}, cost {cost.value:.4e}')
    return RegistrationResult(registered, cost, residuals, state, history)


def register(template, target, template_lms, target_lms, parts, icp_params=None, stiffness_radius=None,
             schedule=DEFAULT_SCHEDULE, max_inner_iterations=DEFAULT_INNER_ITERATIONS):
    '''Coarse then non-rigid registration; the stiffness graph is built on the coarse-registered template'''
    coarse = coarse_register(template, target, template_lms, target_lms, icp_params)
    radius = stiffness_radius or default_stiffness_radius(coarse)
    graph = build_stiffness_edges(coarse, radius)
    return nicp_register(coarse, target, parts, graph, schedule, max_inner_iterations)


# ============= Diagnostics and output =============

def dislocated_vertices(template, registered, parts, neighbourhood=1.5):
    '''Vertices whose nearest registered neighbour carries a part not found around them in the template.

    The parts "around" a vertex are its own and those of the template vertices
    within `neighbourhood` times its nearest-neighbour distance.
    '''
    if template.n_vertices != registered.n_vertices:
        raise MeshValidationError('Template and registered mesh must share vertices')
    labels = parts.vertex_labels
    tree_t = cKDTree(template.vertices)
    d_t, _ = tree_t.query(template.vertices, k=2)
    _, nn_r = cKDTree(registered.vertices).query(registered.vertices, k=2)
    flagged = []
    for v in range(template.n_vertices):
        around = tree_t.query_ball_point(template.vertices[v], neighbourhood * d_t[v, 1])
        if labels[nn_r[v, 1]] not in set(labels[around]) | {labels[v]}:
            flagged.append(v)
    return np.array(flagged, dtype=np.int64)


def save_registration(result, out_dir, stem, format='obj'):
    '''Mesh, residual CSV and a JSON summary of cost and solver history'''
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mesh_path = save_mesh(result.mesh, out_dir / f'{stem}.{format}', format)
    residual_path = out_dir / f'{stem}_residuals.csv'
    pd.DataFrame({'vertex_index': np.arange(len(result.residuals)),
                  'residual': result.residuals}).to_csv(residual_path, index=False, float_format='%.17g')
    summary_path = utilities.write_json(out_dir / f'{stem}_summary.json', {
        'cost': result.cost.value, 'surrogate': result.cost.surrogate,
        'mean_residual': float(result.residuals.mean()), 'max_residual': float(result.residuals.max()),
        'history': result.history})
    return mesh_path, residual_path, summary_path
