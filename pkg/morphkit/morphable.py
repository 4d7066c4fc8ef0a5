'''
Linear morphable face model: mean + shape basis * alpha + expression basis * beta over the template topology.
Construction by PCA of registered meshes, landmark and dense coefficient fitting, .p3dm and HDF5 persistence.
'''
import json
import logging
import pathlib
import struct
from dataclasses import dataclass
from typing import Tuple

import h5py
import numpy as np

from .errors import (MeshValidationError, MeshFormatError, DataError, DegenerateConfigurationError,
                     SchemeMismatchError, ParameterError, MissingInputError)
from .fusion import RigidTransform, fit_transform
from .landmarks import LandmarkScheme, LandmarkSet
from .mesh import TriMesh, MeshDistance

logger = logging.getLogger(__name__)

P3DM_MAGIC = b'P3DM'
P3DM_VERSION = 1
ORTHONORMAL_TOLERANCE = 1e-8
DEFAULT_SHAPE_COMPONENTS = 199
DEFAULT_EXPRESSION_COMPONENTS = 99
DEFAULT_VARIANCE_TARGET = 0.99
DEFAULT_REGULARIZATION = (1e-3, 1e-3)


@dataclass(frozen=True, eq=False)
class Coefficients:
    shape: np.ndarray
    expression: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'shape', np.asarray(self.shape, dtype=np.float64).reshape(-1))
        object.__setattr__(self, 'expression', np.asarray(self.expression, dtype=np.float64).reshape(-1))

    @classmethod
    def zeros(cls, model):
        return cls(np.zeros(model.k_shape), np.zeros(model.k_expression))

    @property
    def stacked(self):
        return np.concatenate([self.shape, self.expression])

    def to_dict(self):
        return {'shape': self.shape.tolist(), 'expression': self.expression.tolist()}


@dataclass(frozen=True, eq=False)
class MorphableModel:
    '''Stacked-vertex (x0, y0, z0, x1, ...) mean and bases with the landmark vertices of the template'''
    mean: np.ndarray
    shape_basis: np.ndarray
    shape_variances: np.ndarray
    expression_basis: np.ndarray
    expression_variances: np.ndarray
    faces: np.ndarray
    scheme: LandmarkScheme
    landmark_ids: Tuple[str, ...]
    landmark_vertices: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        if len(mean) % 3:
            raise MeshValidationError(f'Mean shape of length {len(mean)} is not a stack of 3D vertices')
        frozen = {'mean': mean, 'faces': np.asarray(self.faces, dtype=np.int64).reshape(-1, 3),
                  'landmark_vertices': np.asarray(self.landmark_vertices, dtype=np.int64).reshape(-1)}
        for name in ('shape', 'expression'):
            basis = np.asarray(getattr(self, f'{name}_basis'), dtype=np.float64)
            variances = np.asarray(getattr(self, f'{name}_variances'), dtype=np.float64).reshape(-1)
            if basis.ndim != 2 or basis.shape[0] != len(mean) or basis.shape[1] < 1:
                raise MeshValidationError(f'{name} basis of shape {basis.shape} for {len(mean) // 3} vertices')
            if len(variances) != basis.shape[1]:
                raise MeshValidationError(f'{len(variances)} {name} variances for {basis.shape[1]} components')
            if np.abs(basis.T @ basis - np.eye(basis.shape[1])).max() > ORTHONORMAL_TOLERANCE:
                raise MeshValidationError(f'{name} basis is not orthonormal')
            if np.any(np.diff(variances) > 0) or np.any(variances <= 0):
                raise MeshValidationError(f'{name} variances must be positive and sorted descending')
            frozen[f'{name}_basis'] = basis
            frozen[f'{name}_variances'] = variances
        if frozen['faces'].size and frozen['faces'].max() >= len(mean) // 3:
            raise MeshValidationError('Template faces reference missing vertices')
        object.__setattr__(self, 'landmark_ids', tuple(self.landmark_ids))
        if len(self.landmark_ids) != len(frozen['landmark_vertices']):
            raise MeshValidationError('One template vertex per landmark is required')
        for name, value in frozen.items():
            value = value.copy()
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_vertices(self):
        return len(self.mean) // 3

    @property
    def k_shape(self):
        return self.shape_basis.shape[1]

    @property
    def k_expression(self):
        return self.expression_basis.shape[1]

    @property
    def basis(self):
        return np.hstack([self.shape_basis, self.expression_basis])

    @property
    def variances(self):
        return np.concatenate([self.shape_variances, self.expression_variances])

    def mean_mesh(self):
        return TriMesh(self.mean.reshape(-1, 3), self.faces)

    def landmarks(self, vertices=None):
        vertices = self.mean.reshape(-1, 3) if vertices is None else vertices
        return LandmarkSet.from_vertices(vertices, self.landmark_vertices, self.landmark_ids, self.scheme)

    def rows_of(self, vertex_indices):
        '''Stacked-vector rows of the given vertices'''
        return (3 * np.asarray(vertex_indices, dtype=np.int64)[:, None] + np.arange(3)).ravel()

    def project_shape(self, mesh):
        '''Shape coefficients of a mesh by orthogonal projection onto the shape basis'''
        return self.shape_basis.T @ (_stack(mesh, self.n_vertices) - self.mean)


def _stack(mesh, n_vertices=None):
    vertices = getattr(mesh, 'mesh', mesh).vertices
    if n_vertices is not None and len(vertices) != n_vertices:
        raise MeshValidationError(f'Mesh has {len(vertices)} vertices, model has {n_vertices}')
    return vertices.reshape(-1)


def _data_matrix(meshes):
    meshes = [getattr(m, 'mesh', m) for m in meshes]
    first = meshes[0]
    for m in meshes[1:]:
        if m.n_vertices != first.n_vertices or not np.array_equal(m.faces, first.faces):
            raise MeshValidationError('Training meshes do not share the template topology')
    return np.stack([m.vertices.reshape(-1) for m in meshes]), first.faces


# ============= Construction =============

def principal_components(data, variance_target=DEFAULT_VARIANCE_TARGET, max_components=None, center=True):
    '''SVD PCA of the rows of `data` -> (mean, basis (d, k), variances (k,), variance fraction kept)

    variance = s**2 / (rows - 1); k is the smaller of max_components and the fewest
    components whose cumulative variance reaches variance_target. Each component is
    signed so its largest-magnitude entry is positive.
    '''
    if not 0 < variance_target <= 1:
        raise ParameterError('variance_target', variance_target)
    if max_components is not None and max_components < 1:
        raise ParameterError('max_components', max_components)
    data = np.asarray(data, dtype=np.float64)
    mean = data.mean(axis=0) if center else np.zeros(data.shape[1])
    _, s, vt = np.linalg.svd(data - mean, full_matrices=False)
    # rank cutoff relative to the data magnitude: identical rows leave only rounding noise
    scale = max(s.max(initial=0.0), float(np.abs(data).max(initial=0.0)), 1e-300)
    nonzero = s > scale * max(data.shape) * np.finfo(float).eps
    if not np.any(nonzero):
        return mean, np.zeros((data.shape[1], 0)), np.zeros(0), 0.0
    s, vt = s[nonzero], vt[nonzero]
    variances = s ** 2 / max(len(data) - 1, 1)
    fraction = np.cumsum(variances) / variances.sum()
    k = int(np.searchsorted(fraction, variance_target * (1 - 1e-12))) + 1
    k = min(k, len(s), max_components or len(s))
    basis = vt[:k].T
    signs = np.sign(basis[np.abs(basis).argmax(axis=0), np.arange(k)])
    basis = basis * signs
    return mean, basis, variances[:k], float(fraction[k - 1])


def build_shape_model(neutral_meshes, variance_target=DEFAULT_VARIANCE_TARGET,
                      max_components=DEFAULT_SHAPE_COMPONENTS):
    '''PCA of neutral registrations -> (mean, basis, variances)'''
    if len(neutral_meshes) < 2:
        raise DataError(msg=f'A shape model needs at least 2 neutral meshes, got {len(neutral_meshes)}')
    data, _ = _data_matrix(neutral_meshes)
    mean, basis, variances, kept = principal_components(data, variance_target, max_components)
    if basis.shape[1] == 0:
        raise DataError(msg='No shape variance: every neutral mesh is identical')
    logger.info(f'Shape model: {basis.shape[1]} components, {100 * kept:.2f}% of the variance')
    return mean, basis, variances


def build_expression_model(expr_meshes, neutral_by_subject, variance_target=DEFAULT_VARIANCE_TARGET,
                           max_components=DEFAULT_EXPRESSION_COMPONENTS):
    '''PCA of (expression - same subject's neutral) residuals, not re-centred -> (basis, variances)'''
    if not expr_meshes:
        raise DataError(msg='No expression meshes')
    for subject, _ in expr_meshes:
        if subject not in neutral_by_subject:
            raise DataError(subject, f'No neutral registration for subject {subject}')
    data, faces = _data_matrix([m for _, m in expr_meshes] + [neutral_by_subject[s] for s, _ in expr_meshes])
    residuals = data[:len(expr_meshes)] - data[len(expr_meshes):]
    _, basis, variances, kept = principal_components(residuals, variance_target, max_components, center=False)
    if basis.shape[1] == 0:
        raise DataError(msg='No expression variance: every expression equals its neutral')
    logger.info(f'Expression model: {basis.shape[1]} components, {100 * kept:.2f}% of the variance')
    return basis, variances


def align_to_reference(meshes, reference):
    '''Rigidly align each mesh (all vertices, no scale) onto the reference vertex positions'''
    aligned = []
    for m in meshes:
        mesh = getattr(m, 'mesh', m)
        T = fit_transform(mesh.vertices, reference.vertices)
        aligned.append(mesh.with_vertices(T.apply(mesh.vertices)))
    return aligned


def build_model(neutral_meshes, expr_meshes, neutral_by_subject, template_lms,
                shape_variance=DEFAULT_VARIANCE_TARGET, shape_components=DEFAULT_SHAPE_COMPONENTS,
                expression_variance=DEFAULT_VARIANCE_TARGET, expression_components=DEFAULT_EXPRESSION_COMPONENTS,
                reference=None):
    '''Shape and expression PCA assembled into a MorphableModel.

    With `reference`, every mesh is first rigidly aligned onto it. `template_lms` must carry
    template vertex indices.
    '''
    if template_lms.vertex_indices is None:
        raise MeshValidationError('Template landmarks must be tied to template vertices')
    if reference is not None:
        neutral_meshes = align_to_reference(neutral_meshes, reference)
        subjects = list(neutral_by_subject)
        neutral_by_subject = dict(zip(subjects, align_to_reference([neutral_by_subject[s] for s in subjects],
                                                                   reference)))
        expr_meshes = list(zip([s for s, _ in expr_meshes],
                               align_to_reference([m for _, m in expr_meshes], reference)))
    mean, shape_basis, shape_variances = build_shape_model(neutral_meshes, shape_variance, shape_components)
    expression_basis, expression_variances = build_expression_model(expr_meshes, neutral_by_subject,
                                                                    expression_variance, expression_components)
    _, faces = _data_matrix(neutral_meshes[:1])
    return MorphableModel(mean, shape_basis, shape_variances, expression_basis, expression_variances, faces,
                          template_lms.scheme, template_lms.ids, template_lms.vertex_indices)


# ============= Synthesis and fitting =============

def synthesize(model, coeffs):
    if len(coeffs.shape) != model.k_shape or len(coeffs.expression) != model.k_expression:
        raise MeshValidationError(f'Coefficients ({len(coeffs.shape)}, {len(coeffs.expression)}) do not match '
                                  f'the model ({model.k_shape}, {model.k_expression})')
    vertices = model.mean + model.shape_basis @ coeffs.shape + model.expression_basis @ coeffs.expression
    return TriMesh(vertices.reshape(-1, 3), model.faces)


def _penalty(model, regularization):
    shape_weight, expression_weight = regularization
    if shape_weight < 0 or expression_weight < 0:
        raise ParameterError('regularization', regularization)
    return np.concatenate([np.full(model.k_shape, shape_weight) / model.shape_variances,
                           np.full(model.k_expression, expression_weight) / model.expression_variances])


def _solve_coefficients(A, mean_rows, targets, penalty):
    '''argmin_c ||A c + m - y||^2 + sum(penalty * c^2)'''
    lhs = A.T @ A + np.diag(penalty)
    return np.linalg.solve(lhs, A.T @ (targets - mean_rows))


def _split(model, c):
    return Coefficients(c[:model.k_shape], c[model.k_shape:])


def _alternate(model, rows, targets, penalty, c, T):
    '''One similarity update then one coefficient update; both exact minimizers of the joint cost'''
    A, m = model.basis[rows], model.mean[rows]
    current = (m + A @ c).reshape(-1, 3)
    T = fit_transform(current, targets, with_scale=True)
    back = T.inverse().apply(targets).reshape(-1)
    # the data term in the model frame is scaled by 1/scale**2
    c = _solve_coefficients(A, m, back, penalty / T.scale ** 2)
    return c, T


def _landmark_cost(model, rows, targets, penalty, c, T):
    moved = T.apply((model.mean[rows] + model.basis[rows] @ c).reshape(-1, 3))
    sq = np.sum((moved - targets) ** 2, axis=1)
    return float(sq.sum() + np.sum(penalty * c ** 2)), float(np.sqrt(sq.mean()))


def fit_landmarks(model, target_lms, regularization=DEFAULT_REGULARIZATION, max_rounds=100, tolerance=1e-8,
                  return_history=False):
    '''Coefficients and similarity transform putting the model landmarks onto 3D targets.

    Alternates a closed-form similarity fit and a Tikhonov-regularised (per-component
    variance) least-squares solve for the stacked shape / expression coefficients until
    the landmark RMS changes by less than `tolerance`.
    '''
    if target_lms.scheme.name != model.scheme.name:
        raise SchemeMismatchError(model.scheme.name, target_lms.scheme.name)
    if target_lms.dim != 3:
        raise MeshValidationError('Fitting needs 3D landmarks')
    ids = [i for i in model.landmark_ids if i in target_lms]
    if len(ids) < 3:
        raise DegenerateConfigurationError(len(ids))
    vertices = model.landmark_vertices[[model.landmark_ids.index(i) for i in ids]]
    rows = model.rows_of(vertices)
    targets = np.array([target_lms.position(i) for i in ids])
    penalty = _penalty(model, regularization)

    c = np.zeros(model.k_shape + model.k_expression)
    T = RigidTransform.identity()
    history = []
    previous = np.inf
    for _ in range(max_rounds):
        c, T = _alternate(model, rows, targets, penalty, c, T)
        cost, rms = _landmark_cost(model, rows, targets, penalty, c, T)
        history.append({'cost': cost, 'rms': rms})
        if abs(previous - rms) < tolerance:
            break
        previous = rms
    logger.debug(f'Landmark fit: {len(history)} rounds, RMS {history[-1]["rms"]:.3e}')
    if return_history:
        return _split(model, c), T, history
    return _split(model, c), T


def fit_dense(model, target, target_lms, regularization=DEFAULT_REGULARIZATION, icp_rounds=10,
              return_history=False):
    '''fit_landmarks, then rounds against closest points on the target surface; the best-cost iterate wins'''
    if int(icp_rounds) != icp_rounds or icp_rounds < 0:
        raise ParameterError('icp_rounds', icp_rounds)
    coeffs, T = fit_landmarks(model, target_lms, regularization)
    history = []
    if icp_rounds == 0:
        return (coeffs, T, history) if return_history else (coeffs, T)
    distance = MeshDistance(target)
    penalty = _penalty(model, regularization)
    rows = np.arange(len(model.mean))

    def cost_of(c, T):
        moved = T.apply((model.mean + model.basis @ c).reshape(-1, 3))
        d, closest, _ = distance.query(moved)
        return float(np.sum(d ** 2) + np.sum(penalty * c ** 2)), closest

    c = coeffs.stacked
    cost, closest = cost_of(c, T)
    best = (cost, c, T)
    history.append({'round': 0, 'cost': cost})
    for k in range(1, icp_rounds + 1):
        c, T = _alternate(model, rows, closest, penalty, c, T)
        cost, closest = cost_of(c, T)
        history.append({'round': k, 'cost': cost})
        if cost < best[0]:
            best = (cost, c, T)
    logger.debug(f'Dense fit: best cost {best[0]:.4e} over {icp_rounds} rounds')
    result = (_split(model, best[1]), best[2])
    return result + (history,) if return_history else result


# ============= Persistence =============

def _header(model):
    return {'n_vertices': model.n_vertices, 'k_s': model.k_shape, 'k_e': model.k_expression,
            'n_faces': len(model.faces), 'landmark_scheme': model.scheme.to_dict(),
            'landmark_ids': list(model.landmark_ids),
            'landmark_vertices': model.landmark_vertices.tolist()}


def save_model(model, path):
    '''.p3dm: magic, uint32 version, uint32 header length, JSON header, then little-endian
    float64 mean, U, U variances, E, E variances (row-major) and int64 faces'''
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(_header(model), sort_keys=True).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(P3DM_MAGIC + struct.pack('<II', P3DM_VERSION, len(header)) + header)
        for array in (model.mean, model.shape_basis, model.shape_variances,
                      model.expression_basis, model.expression_variances):
            f.write(np.ascontiguousarray(array, dtype='<f8').tobytes())
        f.write(np.ascontiguousarray(model.faces, dtype='<i8').tobytes())
    logger.info(f'Saved model ({model.k_shape} shape, {model.k_expression} expression components) to {path}')
    return path


def load_model(path):
    path = pathlib.Path(path)
    if not path.is_file():
        raise MissingInputError(path)
    data = path.read_bytes()
    if data[:4] != P3DM_MAGIC:
        raise MeshFormatError(path, 'offset 0', f'{path} is not a .p3dm model')
    if len(data) < 12:
        raise MeshFormatError(path, 'offset 4', f'Truncated .p3dm header in {path}')
    version, length = struct.unpack('<II', data[4:12])
    if version != P3DM_VERSION:
        raise MeshFormatError(path, 'offset 4', f'Unsupported .p3dm version {version}')
    try:
        header = json.loads(data[12:12 + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise MeshFormatError(path, 'offset 12', f'Malformed .p3dm header in {path}')
    n3, ks, ke, nf = 3 * header['n_vertices'], header['k_s'], header['k_e'], header['n_faces']
    offset = 12 + length
    arrays = []
    for count, dtype in ((n3, '<f8'), (n3 * ks, '<f8'), (ks, '<f8'), (n3 * ke, '<f8'), (ke, '<f8'),
                         (3 * nf, '<i8')):
        if offset + 8 * count > len(data):
            raise MeshFormatError(path, f'offset {offset}', f'Truncated .p3dm data in {path}')
        arrays.append(np.frombuffer(data, dtype=dtype, count=count, offset=offset))
        offset += 8 * count
    mean, U, var_u, E, var_e, faces = arrays
    return MorphableModel(mean, U.reshape(n3, ks), var_u, E.reshape(n3, ke), var_e, faces.reshape(nf, 3),
                          LandmarkScheme.from_dict(header['landmark_scheme']), header['landmark_ids'],
                          header['landmark_vertices'])


def export_hdf5(model, path):
    '''Basel-style HDF5 layout: {shape,expression}/model/{mean,pcaBasis,pcaVariance} plus the representer'''
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with h5py.File(path, 'w') as f:
        for name, mean, basis, variances in (
                ('shape', model.mean, model.shape_basis, model.shape_variances),
                ('expression', np.zeros_like(model.mean), model.expression_basis, model.expression_variances)):
            group = f.create_group(f'{name}/model')
            group.create_dataset('mean', data=mean.astype(np.float32))
            group.create_dataset('pcaBasis', data=basis.astype(np.float32))
            group.create_dataset('pcaVariance', data=variances.astype(np.float32))
            representer = f.create_group(f'{name}/representer')
            representer.create_dataset('cells', data=model.faces.T.astype(np.int32))
            representer.create_dataset('points', data=model.mean.reshape(-1, 3).T.astype(np.float32))
        landmarks = f.create_group('metadata/landmarks')
        landmarks.attrs['json'] = json.dumps({'scheme': model.scheme.to_dict(),
                                              'ids': list(model.landmark_ids),
                                              'vertices': model.landmark_vertices.tolist()})
    return path
