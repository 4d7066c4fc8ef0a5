'''
Rigid alignment and multi-view fusion: landmark-seeded similarity fits, coarse-to-fine ICP,
and the left / middle / right merge into one full-view cloud.
'''
import logging
from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import (MeshValidationError, DegenerateConfigurationError, NoCorrespondenceError,
                     EmptySetError, ParameterError)
from .mesh import TriMesh, PointCloud, merge_vertices, remove_isolated, estimate_normals
from . import reference, utilities

logger = logging.getLogger(__name__)

ORTHONORMAL_TOLERANCE = 1e-9
ICP_METRICS = ('point_to_point', 'point_to_plane')


# ============= Transforms =============

@dataclass(frozen=True, eq=False)
class RigidTransform:
    '''x -> scale * R x + t'''
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise MeshValidationError('Transform entries must be finite')
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHONORMAL_TOLERANCE:
            raise MeshValidationError('Rotation is not orthonormal')
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise MeshValidationError('Rotation determinant is not +1')
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ParameterError('scale', self.scale)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, 'rotation', R)
        object.__setattr__(self, 'translation', t)
        object.__setattr__(self, 'scale', float(self.scale))

    @classmethod
    def identity(cls):
        return cls()

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation

    def compose(self, other):
        '''self after other'''
        return RigidTransform(self.rotation @ other.rotation,
                              self.scale * self.rotation @ other.translation + self.translation,
                              self.scale * other.scale)

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation / self.scale, 1.0 / self.scale)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def to_dict(self):
        return {'rotation': self.rotation.tolist(), 'translation': self.translation.tolist(), 'scale': self.scale}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d['rotation']), np.array(d['translation']), d.get('scale', 1.0))


def fit_transform(src, dst, with_scale=False, weights=None):
    '''Closed-form least-squares transform taking src rows onto dst rows (cross-covariance SVD)'''
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if n < 3 or len(dst) != n:
        raise DegenerateConfigurationError(n)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    mu_src, mu_dst = w @ src, w @ dst
    xs, xd = src - mu_src, dst - mu_dst
    for x in (xs, xd):
        sv = np.linalg.svd(x * np.sqrt(w)[:, None], compute_uv=False)
        if sv[0] <= 1e-300 or sv[1] <= 1e-10 * sv[0]:
            raise DegenerateConfigurationError(n, f'Collinear or coincident configuration of {n} correspondences')
    cov = (xd * w[:, None]).T @ xs
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = U @ np.diag(S) @ Vt
    scale = 1.0
    if with_scale:
        scale = float(np.sum(D * S) / np.sum(w * np.einsum('ij,ij->i', xs, xs)))
    return RigidTransform(R, mu_dst - scale * R @ mu_src, scale)


def estimate_rigid_from_landmarks(src, dst, with_scale=False):
    '''Least-squares rigid (or similarity) transform mapping src landmarks onto dst landmarks'''
    ids, a, b = src.matched(dst)
    if src.dim != 3 or dst.dim != 3:
        raise MeshValidationError('Rigid estimation needs 3D landmarks')
    return fit_transform(a, b, with_scale=with_scale)


# ============= ICP =============

@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 50
    convergence_delta: float = 1e-7
    reject_distance: Union[float, str, None] = 'auto'   # 'auto' = 3x median correspondence distance
    metric: str = 'point_to_point'
    pyramid: Tuple[float, ...] = (0.1, 0.3, 1.0)
    seed: int = 0

    def __post_init__(self):
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 1:
            raise ParameterError('max_iterations', self.max_iterations)
        if not self.convergence_delta >= 0:
            raise ParameterError('convergence_delta', self.convergence_delta)
        if self.metric not in ICP_METRICS:
            raise ParameterError('metric', self.metric)
        if isinstance(self.reject_distance, str):
            if self.reject_distance != 'auto':
                raise ParameterError('reject_distance', self.reject_distance)
        elif self.reject_distance is not None and not self.reject_distance > 0:
            raise ParameterError('reject_distance', self.reject_distance)
        pyramid = tuple(float(f) for f in self.pyramid)
        if not pyramid or any(not 0 < f <= 1 for f in pyramid) or pyramid[-1] != 1.0:
            raise ParameterError('pyramid', self.pyramid, 'Pyramid fractions must lie in (0, 1] and end at 1')
        object.__setattr__(self, 'pyramid', pyramid)

    def reject(self, distances):
        '''Mask of the correspondences kept'''
        if self.reject_distance is None:
            return np.ones(len(distances), dtype=bool)
        if self.reject_distance == 'auto':
            threshold = max(3.0 * float(np.median(distances)), 1e-12)
        else:
            threshold = self.reject_distance
        return distances <= threshold


def _point_to_plane_step(src, dst, normals):
    '''Linearized rotation + translation minimizing squared distances to the tangent planes at dst'''
    A = np.hstack([np.cross(src, normals), normals])
    b = -np.einsum('ij,ij->i', src - dst, normals)
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    return RigidTransform(Rotation.from_rotvec(x[:3]).as_matrix(), x[3:])


def icp_refine(src, dst, init=None, params=None, return_history=False):
    '''Coarse-to-fine ICP of `src` onto `dst` starting from `init`.

    Each pyramid level runs on a fixed random subsample of `src` (the last level
    on all of it) and iterates nearest-neighbour correspondences plus a closed-form
    update until the RMS improvement drops below `convergence_delta`. The update
    is rigid and composed onto `init`, so any scale in `init` is kept.

    Returns (transform, final RMS) or (transform, final RMS, per-level RMS history).
    '''
    params = params or IcpParams()
    T = init or RigidTransform.identity()
    if len(src) == 0 or len(dst) == 0:
        raise EmptySetError('ICP needs two non-empty clouds')
    workers = utilities.n_workers()
    tree = cKDTree(dst.points)
    dst_normals = None
    if params.metric == 'point_to_plane':
        dst_normals = dst.normals if dst.normals is not None else estimate_normals(dst)
    rng = np.random.default_rng(params.seed)
    n = len(src)
    history = []
    iteration = 0
    for fraction in params.pyramid:
        if fraction < 1.0:
            m = min(n, max(3, int(np.ceil(fraction * n))))
            points = src.points[np.sort(rng.choice(n, size=m, replace=False))]
        else:
            points = src.points
        level = []
        for _ in range(params.max_iterations):
            moved = T.apply(points)
            d, j = tree.query(moved, workers=workers)
            keep = params.reject(d)
            if not keep.any():
                raise NoCorrespondenceError(iteration)
            rms = float(np.sqrt(np.mean(d[keep] ** 2)))
            if level and rms > level[-1] * (1 + 1e-9) + 1e-15:
                logger.warning(f'ICP RMS increased from {level[-1]:.3e} to {rms:.3e} at iteration {iteration}')
            converged = rms == 0.0 or (bool(level) and level[-1] - rms < params.convergence_delta)
            level.append(rms)
            iteration += 1
            if converged:
                break
            if params.metric == 'point_to_point':
                step = fit_transform(moved[keep], dst.points[j[keep]])
            else:
                step = _point_to_plane_step(moved[keep], dst.points[j[keep]], dst_normals[j[keep]])
            T = step.compose(T)
        history.append(level)
    d, _ = tree.query(T.apply(src.points), workers=workers)
    keep = params.reject(d)
    final_rms = float(np.sqrt(np.mean(d[keep] ** 2))) if keep.any() else float('inf')
    logger.debug(f'ICP finished after {iteration} iterations, RMS {final_rms:.3e}')
    if return_history:
        return T, final_rms, history
    return T, final_rms


# ============= Fusion =============

def refine_seam(points, pivot_points, merge_epsilon, k=12):
    '''Per-vertex local rigid refinement of the points lying on the seam with the pivot view.

    A point is on the seam when its nearest pivot point lies within 2 * merge_epsilon.
    Each seam point moves by the rigid transform fitted from its k nearest seam points
    to their pivot matches, weighted by inverse distance.
    '''
    points = np.asarray(points, dtype=np.float64)
    if not len(points) or not len(pivot_points):
        return points
    workers = utilities.n_workers()
    d, match = cKDTree(pivot_points).query(points, workers=workers)
    seam = np.flatnonzero(d <= 2 * merge_epsilon)
    if len(seam) < 3:
        return points
    kk = min(k, len(seam))
    nd, nn = cKDTree(points[seam]).query(points[seam], k=kk, workers=workers)
    refined = points.copy()
    for row, i in enumerate(seam):
        members = seam[nn[row]]
        try:
            local = fit_transform(points[members], pivot_points[match[members]],
                                  weights=1.0 / (nd[row] + merge_epsilon))
        except DegenerateConfigurationError:
            continue
        refined[i] = local.apply(points[i])
    logger.debug(f'Refined {len(seam)} seam points')
    return refined


def default_isolation_radius(points):
    '''3x the median nearest-neighbour spacing'''
    if len(points) < 2:
        return 1.0
    d, _ = cKDTree(points).query(points, k=2, workers=utilities.n_workers())
    spacing = float(np.median(d[:, 1]))
    return 3.0 * spacing if spacing > 0 else 1.0


def fuse_views(left, middle, right, params=None, merge_epsilon=1e-3, allow_missing_view=False,
               local_k=12, isolation_radius=None, min_neighbors=1, return_poses=False):
    '''Bring the left and right (cloud, landmarks) views into the middle view's frame and merge.

    Side views are seeded from shared landmarks, refined with ICP against the
    middle cloud, locally refined along the seam, then concatenated with the middle
    cloud before merge_vertices and remove_isolated. The fused landmarks are the
    middle set plus the side-view landmarks the middle view lacks.
    '''
    params = params or IcpParams()
    if not merge_epsilon > 0:
        raise ParameterError('merge_epsilon', merge_epsilon)
    pivot_cloud, pivot_lms = middle
    if len(pivot_cloud) == 0:
        raise EmptySetError(f'The {reference.PIVOT_VIEW} view is empty')
    parts = [pivot_cloud.tagged(reference.PIVOT_VIEW)]
    fused_lms = pivot_lms
    poses = {reference.PIVOT_VIEW: RigidTransform.identity()}
    for view, (cloud, lms) in (('left', left), ('right', right)):
        lms.check_scheme(pivot_lms)
        if len(cloud) == 0:
            if not allow_missing_view:
                raise EmptySetError(f'The {view} view is empty')
            logger.warning(f'Skipping empty {view} view')
            continue
        seed = estimate_rigid_from_landmarks(lms, pivot_lms)
        T, rms = icp_refine(cloud, pivot_cloud, seed, params)
        logger.info(f'{view} view aligned, ICP RMS {rms:.3e}')
        moved = refine_seam(T.apply(cloud.points), pivot_cloud.points, merge_epsilon, k=local_k)
        parts.append(PointCloud(moved, np.full(len(cloud), view), cloud.vertex_ids))
        fused_lms = fused_lms.augmented(lms.transformed(T))
        poses[view] = T
    fused = merge_vertices(PointCloud.concatenate(parts), merge_epsilon)
    radius = isolation_radius or default_isolation_radius(fused.points)
    fused = remove_isolated(fused, radius, min_neighbors)
    logger.info(f'Fused {sum(len(p) for p in parts)} points into {len(fused)}')
    if return_poses:
        return fused, fused_lms, poses
    return fused, fused_lms


def carry_topology(cloud, source_faces):
    '''Mesh over the fused points reusing the source faces whose three vertex ids survived.

    The first fused point carrying a source vertex id stands in for that vertex.
    '''
    if cloud.vertex_ids is None:
        raise MeshValidationError('Carrying topology needs source vertex ids')
    source_faces = np.asarray(source_faces, dtype=np.int64).reshape(-1, 3)
    ids = cloud.vertex_ids
    tagged = np.flatnonzero(ids >= 0)
    n_source = int(max(ids.max(initial=-1), source_faces.max(initial=-1))) + 1
    point_of = np.full(n_source, -1, dtype=np.int64)
    # reversed so the first occurrence wins
    point_of[ids[tagged][::-1]] = tagged[::-1]
    faces = point_of[source_faces]
    faces = faces[(faces >= 0).all(axis=1)]
    logger.info(f'Carried {len(faces)} of {len(source_faces)} faces onto the fused cloud')
    return TriMesh(cloud.points, faces)
