'''
Geometry foundation: triangle meshes, point clouds, nearest-neighbour search,
exact point-to-mesh distances, the merge / outlier primitives used by fusion and
OBJ / PLY files. Normals, closest points on triangles and mesh reading go through
trimesh; writing stays here so every float64 bit survives a file.
'''
import logging
import itertools
import pathlib
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
import trimesh

from .errors import (MeshValidationError, MeshFormatError, IndexOutOfRangeError, EmptySetError, MissingInputError,
                     DegenerateInputError, ParameterError)
from . import utilities
from .reference import VIEWS

logger = logging.getLogger(__name__)

NORMAL_TOLERANCE = 1e-6
DEGENERATE_AREA = 1e-12


def _frozen(array):
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


def _as_points(points, name, dim=3):
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        points = points.reshape(0, dim)
    if points.ndim != 2 or points.shape[1] != dim:
        raise MeshValidationError(f'{name} must have shape (n, {dim}), got {points.shape}')
    if not np.all(np.isfinite(points)):
        bad = int(np.flatnonzero(~np.isfinite(points).all(axis=1))[0])
        raise MeshValidationError(f'{name}[{bad}] has a non-finite coordinate')
    return points


def _check_unit(normals, name):
    lengths = np.linalg.norm(normals, axis=1)
    bad = np.flatnonzero(np.abs(lengths - 1.0) > NORMAL_TOLERANCE)
    if bad.size:
        raise MeshValidationError(f'{name}[{bad[0]}] has length {lengths[bad[0]]:.9g}, expected 1')


# ============= Types =============

@dataclass(frozen=True, eq=False)
class TriMesh:
    '''Indexed triangle surface. Arrays are copied and frozen on construction.'''
    vertices: np.ndarray
    faces: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        vertices = _as_points(self.vertices, 'vertices')
        faces = np.asarray(self.faces)
        if faces.size == 0:
            faces = np.zeros((0, 3), dtype=np.int64)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshValidationError(f'faces must have shape (m, 3), got {faces.shape}')
        if not np.issubdtype(faces.dtype, np.integer):
            if not np.all(np.equal(np.mod(faces, 1), 0)):
                raise MeshValidationError('faces must hold integer vertex indices')
        faces = faces.astype(np.int64)
        if faces.size:
            out_of_range = (faces < 0) | (faces >= len(vertices))
            if out_of_range.any():
                raise IndexOutOfRangeError(int(faces[out_of_range][0]), len(vertices))
            repeated = ((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2])
                        | (faces[:, 0] == faces[:, 2]))
            if repeated.any():
                raise MeshValidationError(f'face {int(np.flatnonzero(repeated)[0])} references a vertex twice')
        normals = self.normals
        if normals is not None:
            normals = _as_points(normals, 'normals')
            if len(normals) != len(vertices):
                raise MeshValidationError(f'{len(normals)} normals for {len(vertices)} vertices')
            _check_unit(normals, 'normals')
            normals = _frozen(normals)
        object.__setattr__(self, 'vertices', _frozen(vertices))
        object.__setattr__(self, 'faces', _frozen(faces))
        object.__setattr__(self, 'normals', normals)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def with_vertices(self, vertices):
        '''Same topology, relocated vertices (stored normals are dropped)'''
        return TriMesh(vertices, self.faces)

    def with_normals(self):
        return TriMesh(self.vertices, self.faces, self.vertex_normals())

    def triangles(self):
        return self.vertices[self.faces]

    def face_normals(self):
        '''Unnormalized face normals, length equal to twice the face area'''
        tri = self.triangles()
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def to_trimesh(self):
        '''trimesh view of the same arrays, no merging or reordering'''
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=False, validate=False)

    def vertex_normals(self):
        '''Angle-weighted unit vertex normals from trimesh; vertices without faces point away from the centroid'''
        normals = np.zeros_like(self.vertices)
        if self.n_faces:
            normals = np.array(self.to_trimesh().vertex_normals, dtype=np.float64)
        missing = np.abs(np.linalg.norm(normals, axis=1) - 1.0) > NORMAL_TOLERANCE
        if missing.any():
            outward = self.vertices[missing] - self.vertices.mean(axis=0)
            outward[np.linalg.norm(outward, axis=1) <= 1e-300] = (0.0, 0.0, 1.0)
            normals[missing] = outward / np.linalg.norm(outward, axis=1)[:, None]
        return normals

    def referenced_vertices(self):
        return np.unique(self.faces)

    def bounding_box(self):
        if not self.n_vertices:
            raise DegenerateInputError('Bounding box of an empty mesh')
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bounding_box_diagonal(self):
        low, high = self.bounding_box()
        return float(np.linalg.norm(high - low))

    def submesh(self, keep):
        '''Keep the vertices flagged in `keep` and the faces whose three vertices survive; reindex'''
        keep = np.asarray(keep, dtype=bool)
        new_index = np.full(self.n_vertices, -1, dtype=np.int64)
        new_index[keep] = np.arange(int(keep.sum()))
        face_kept = keep[self.faces].all(axis=1) if self.n_faces else np.zeros(0, dtype=bool)
        normals = self.normals[keep] if self.normals is not None else None
        return TriMesh(self.vertices[keep], new_index[self.faces[face_kept]], normals)


@dataclass(frozen=True, eq=False)
class PointCloud:
    '''Unorganized 3D points with optional per-point source view, source vertex id and normal'''
    points: np.ndarray
    views: Optional[np.ndarray] = None
    vertex_ids: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        points = _as_points(self.points, 'points')
        n = len(points)
        views = self.views
        if views is not None:
            views = np.asarray(views, dtype=str).reshape(-1)
            if len(views) != n:
                raise MeshValidationError(f'{len(views)} view tags for {n} points')
            views = _frozen(views)
        vertex_ids = self.vertex_ids
        if vertex_ids is not None:
            vertex_ids = np.asarray(vertex_ids, dtype=np.int64).reshape(-1)
            if len(vertex_ids) != n:
                raise MeshValidationError(f'{len(vertex_ids)} vertex ids for {n} points')
            vertex_ids = _frozen(vertex_ids)
        normals = self.normals
        if normals is not None:
            normals = _as_points(normals, 'normals')
            if len(normals) != n:
                raise MeshValidationError(f'{len(normals)} normals for {n} points')
            _check_unit(normals, 'normals')
            normals = _frozen(normals)
        object.__setattr__(self, 'points', _frozen(points))
        object.__setattr__(self, 'views', views)
        object.__setattr__(self, 'vertex_ids', vertex_ids)
        object.__setattr__(self, 'normals', normals)

    def __len__(self):
        return len(self.points)

    def select(self, index):
        '''Sub-cloud at the given indices or boolean mask, per-point tags carried along'''
        pick = lambda a: None if a is None else a[index]
        return PointCloud(self.points[index], pick(self.views), pick(self.vertex_ids), pick(self.normals))

    def tagged(self, view):
        return PointCloud(self.points, np.full(len(self), view), self.vertex_ids, self.normals)

    @staticmethod
    def concatenate(clouds):
        clouds = list(clouds)
        points = np.concatenate([c.points for c in clouds]) if clouds else np.zeros((0, 3))

        def merged(attr, fill):
            if all(getattr(c, attr) is None for c in clouds):
                return None
            return np.concatenate([getattr(c, attr) if getattr(c, attr) is not None
                                   else np.full(len(c), fill) for c in clouds])

        views = merged('views', '')
        vertex_ids = merged('vertex_ids', -1)
        normals = None
        if clouds and all(c.normals is not None for c in clouds):
            normals = np.concatenate([c.normals for c in clouds])
        return PointCloud(points, views, vertex_ids, normals)


class SpatialIndex:
    '''Immutable KD-tree over a fixed point set; nearest queries break ties by lowest index'''

    TIE_CANDIDATES = 8

    def __init__(self, points, dim=3):
        points = _as_points(points, 'points', dim=dim)
        self.points = _frozen(points)
        self._tree = cKDTree(self.points) if len(points) else None

    def __len__(self):
        return len(self.points)

    def nearest(self, queries):
        '''Nearest indexed point for each query row -> (indices, distances)'''
        if self._tree is None:
            raise EmptySetError('Nearest-neighbour query on an empty index')
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, self.points.shape[1])
        n = len(self.points)
        k = min(self.TIE_CANDIDATES, n)
        dist, idx = self._tree.query(queries, k=k, workers=utilities.n_workers())
        dist = dist.reshape(len(queries), k)
        idx = idx.reshape(len(queries), k)
        best = dist[:, :1]
        tol = 1e-12 * np.maximum(best, 1.0)
        tied = dist <= best + tol
        chosen = np.where(tied, idx, n).min(axis=1)
        # every candidate tied: look further with a ball query
        for row in np.flatnonzero(tied.all(axis=1) & (k < n)):
            members = self._tree.query_ball_point(queries[row], best[row, 0] + tol[row, 0])
            chosen[row] = min(members)
        return chosen.astype(np.int64), dist[:, 0].copy()

    def within(self, query, radius):
        if self._tree is None:
            return np.zeros(0, dtype=np.int64)
        return np.array(sorted(self._tree.query_ball_point(np.asarray(query, float), radius)), dtype=np.int64)


def nearest_vertex(index, query):
    '''Index and Euclidean distance of the indexed point closest to `query`'''
    idx, dist = index.nearest(np.asarray(query, dtype=np.float64)[None, :])
    return int(idx[0]), float(dist[0])


# ============= Point-to-triangle distances =============

def _dot(u, v):
    return np.einsum('ij,ij->i', u, v)


def closest_points_on_segments(p, a, b):
    ab = b - a
    denom = _dot(ab, ab)
    with np.errstate(divide='ignore', invalid='ignore'):
        t = np.where(denom > 0, _dot(p - a, ab) / denom, 0.0)
    t = np.clip(t, 0.0, 1.0)
    return a + t[:, None] * ab


def closest_points_on_triangles(p, a, b, c):
    '''Closest point of triangle (a, b, c) to p, row-wise, solved by trimesh; degenerate triangles use their edges'''
    p, a, b, c = (np.asarray(x, dtype=np.float64).reshape(-1, 3) for x in (p, a, b, c))
    if not len(p):
        return np.zeros((0, 3))
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
    longest = np.max([_dot(e, e) for e in (b - a, c - b, a - c)], axis=0)
    bad = area2 <= DEGENERATE_AREA * longest

    result = np.full_like(p, np.nan)
    good = ~bad
    if good.any():
        with np.errstate(divide='ignore', invalid='ignore'):
            result[good] = trimesh.triangles.closest_point(np.stack([a[good], b[good], c[good]], axis=1), p[good])
        bad |= ~np.isfinite(result).all(axis=1)

    # collinear triangles: closest of the three edges
    if bad.any():
        candidates = np.stack([closest_points_on_segments(p[bad], s[bad], e[bad])
                               for s, e in ((a, b), (b, c), (c, a))])
        d = np.linalg.norm(candidates - p[bad][None], axis=2)
        result[bad] = candidates[np.argmin(d, axis=0), np.arange(int(bad.sum()))]
    return result


class MeshDistance:
    '''Exact closest-point queries against a fixed triangle mesh.

    A query's nearest surface vertex bounds its distance to the surface, so only
    triangles whose centroid lies within that bound plus the largest triangle
    radius can hold the closest point; those are solved exactly.
    '''

    CHUNK = 2048

    def __init__(self, mesh):
        if mesh.n_faces == 0:
            raise DegenerateInputError('Point-to-mesh distance needs a mesh with at least one face')
        self.mesh = mesh
        self._triangles = mesh.triangles()
        centroids = self._triangles.mean(axis=1)
        self._radius = float(np.linalg.norm(self._triangles - centroids[:, None], axis=2).max())
        self._centroid_tree = cKDTree(centroids)
        self._surface_vertices = mesh.vertices[mesh.referenced_vertices()]
        self._vertex_tree = cKDTree(self._surface_vertices)

    def query(self, points):
        '''-> (distances, closest points, face indices); face ties go to the lowest index'''
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        distances = np.empty(len(points))
        closest = np.empty_like(points)
        faces = np.empty(len(points), dtype=np.int64)
        for start in range(0, len(points), self.CHUNK):
            stop = min(start + self.CHUNK, len(points))
            distances[start:stop], closest[start:stop], faces[start:stop] = self._query_chunk(points[start:stop])
        return distances, closest, faces

    def _query_chunk(self, q):
        workers = utilities.n_workers()
        bound, _ = self._vertex_tree.query(q, workers=workers)
        radii = bound * (1 + 1e-9) + self._radius + 1e-12
        candidates = self._centroid_tree.query_ball_point(q, radii, workers=workers)
        counts = np.fromiter((len(c) for c in candidates), dtype=np.int64, count=len(q))
        query_idx = np.repeat(np.arange(len(q)), counts)
        face_idx = np.fromiter(itertools.chain.from_iterable(candidates), dtype=np.int64,
                               count=int(counts.sum()))
        tri = self._triangles[face_idx]
        points = closest_points_on_triangles(q[query_idx], tri[:, 0], tri[:, 1], tri[:, 2])
        d = np.linalg.norm(points - q[query_idx], axis=1)
        order = np.lexsort((face_idx, d, query_idx))
        first = order[np.r_[0, np.flatnonzero(np.diff(query_idx[order])) + 1]]
        return d[first], points[first], face_idx[first]


def point_to_mesh_distance(point, mesh):
    '''Exact Euclidean distance from a point to the closest point of any triangle of `mesh`'''
    d, _, _ = MeshDistance(mesh).query(np.asarray(point, dtype=np.float64)[None, :])
    return float(d[0])


# ============= Cloud clean-up =============

def merge_vertices(cloud, epsilon):
    '''Collapse points closer than `epsilon` into cluster centroids.

    Clusters grow greedily in ascending input order and the pass repeats on the
    centroids until no two outputs are closer than `epsilon`. Per-point tags come
    from the lowest-index member of each cluster.
    '''
    if not epsilon > 0:
        raise ParameterError('epsilon', epsilon)
    n = len(cloud)
    if n == 0:
        return cloud
    labels = np.arange(n)
    positions = cloud.points
    while True:
        m = len(positions)
        pairs = cKDTree(positions).query_pairs(r=epsilon, output_type='ndarray')
        if len(pairs):
            gap = np.linalg.norm(positions[pairs[:, 0]] - positions[pairs[:, 1]], axis=1)
            pairs = pairs[gap < epsilon]
        if not len(pairs):
            break
        adjacency = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(m, m))
        adjacency = (adjacency + adjacency.T).tocsr()
        assigned = np.full(m, -1, dtype=np.int64)
        n_clusters = 0
        for i in range(m):
            if assigned[i] >= 0:
                continue
            neighbours = adjacency.indices[adjacency.indptr[i]:adjacency.indptr[i + 1]]
            assigned[i] = n_clusters
            assigned[neighbours[assigned[neighbours] < 0]] = n_clusters
            n_clusters += 1
        labels = assigned[labels]
        counts = np.bincount(labels, minlength=n_clusters).astype(np.float64)
        positions = np.stack([np.bincount(labels, weights=cloud.points[:, k], minlength=n_clusters)
                              for k in range(3)], axis=1) / counts[:, None]
    if len(positions) == n:
        return cloud
    # lowest original index of every cluster
    seeds = np.full(len(positions), n, dtype=np.int64)
    np.minimum.at(seeds, labels, np.arange(n))
    normals = None
    if cloud.normals is not None:
        summed = np.zeros_like(positions)
        np.add.at(summed, labels, cloud.normals)
        lengths = np.linalg.norm(summed, axis=1)
        summed[lengths <= 1e-300] = cloud.normals[seeds[lengths <= 1e-300]]
        normals = summed / np.linalg.norm(summed, axis=1)[:, None]
    pick = lambda a: None if a is None else a[seeds]
    logger.debug(f'Merged {n} points into {len(positions)}')
    return PointCloud(positions, pick(cloud.views), pick(cloud.vertex_ids), normals)


def remove_isolated(cloud, radius, min_neighbors=1):
    '''Keep the points that have at least `min_neighbors` other points within `radius`'''
    if not radius > 0:
        raise ParameterError('radius', radius)
    if int(min_neighbors) != min_neighbors or min_neighbors < 1:
        raise ParameterError('min_neighbors', min_neighbors)
    if len(cloud) == 0:
        return cloud
    counts = cKDTree(cloud.points).query_ball_point(cloud.points, r=radius, return_length=True,
                                                   workers=utilities.n_workers()) - 1
    keep = counts >= min_neighbors
    if not keep.all():
        logger.debug(f'Removed {int((~keep).sum())} isolated points')
    return cloud.select(np.flatnonzero(keep))


def estimate_normals(cloud, k=12):
    '''Unit normals from the smallest principal axis of each k-neighbourhood, oriented away from the centroid'''
    n = len(cloud)
    if n < 3:
        raise DegenerateInputError(f'Normal estimation needs at least 3 points, got {n}')
    k = min(k, n)
    _, idx = cKDTree(cloud.points).query(cloud.points, k=k, workers=utilities.n_workers())
    neighbourhoods = cloud.points[idx]
    centered = neighbourhoods - neighbourhoods.mean(axis=1, keepdims=True)
    covariance = np.einsum('nki,nkj->nij', centered, centered)
    _, eigenvectors = np.linalg.eigh(covariance)
    normals = eigenvectors[:, :, 0]
    outward = cloud.points - cloud.points.mean(axis=0)
    normals[_dot(normals, outward) < 0] *= -1
    return normals / np.linalg.norm(normals, axis=1)[:, None]


def symmetric_set_distance(a, b):
    '''Hausdorff distance between two finite point sets'''
    a = _as_points(a, 'a')
    b = _as_points(b, 'b')
    if not len(a) or not len(b):
        raise EmptySetError('Set distance with an empty set')
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(max(d_ab.max(), d_ba.max()))


# ============= File formats =============

MESH_FORMATS = ('obj', 'ply')

_PLY_TYPES = {
    'char': 'i1', 'int8': 'i1', 'uchar': 'u1', 'uint8': 'u1',
    'short': 'i2', 'int16': 'i2', 'ushort': 'u2', 'uint16': 'u2',
    'int': 'i4', 'int32': 'i4', 'uint': 'u4', 'uint32': 'u4',
    'float': 'f4', 'float32': 'f4', 'double': 'f8', 'float64': 'f8',
}
_PLY_BYTEORDER = {'ascii': None, 'binary_little_endian': '<', 'binary_big_endian': '>'}
UNTAGGED_VIEW = 255


def _resolve_format(path, format):
    if format is None:
        format = pathlib.Path(path).suffix.lstrip('.').lower()
    if format not in MESH_FORMATS:
        raise ParameterError('format', format, f'Unsupported mesh format {format!r}, expected one of {MESH_FORMATS}')
    return format


def _check_exists(path):
    if not pathlib.Path(path).is_file():
        raise MissingInputError(path)


def _unit_or_none(normals, n, path):
    if normals is None or len(normals) != n or n == 0:
        if normals is not None and len(normals):
            logger.debug(f'{path}: ignoring {len(normals)} normals for {n} vertices')
        return None
    normals = np.asarray(normals, dtype=np.float64)
    lengths = np.linalg.norm(normals, axis=1)
    if np.any(lengths <= 1e-300):
        logger.debug(f'{path}: ignoring normals with zero-length entries')
        return None
    return normals / lengths[:, None]


# ---- OBJ ----

def _save_obj(mesh, path):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(f'# morphkit {mesh.n_vertices} vertices {mesh.n_faces} faces\n')
        np.savetxt(f, mesh.vertices, fmt='v %.17g %.17g %.17g')
        if mesh.normals is not None:
            np.savetxt(f, mesh.normals, fmt='vn %.17g %.17g %.17g')
        np.savetxt(f, mesh.faces + 1, fmt='f %d %d %d')


# ---- PLY ----

def _ply_type(name, path, lineno):
    try:
        return _PLY_TYPES[name]
    except KeyError:
        raise MeshFormatError(path, f'line {lineno}', f'Unknown PLY property type {name!r} in {path} at line {lineno}')


def _read_ply_header(f, path):
    if f.readline().strip() != b'ply':
        raise MeshFormatError(path, 'line 1', f'{path} is not a PLY file (line 1)')
    fmt, elements, lineno = None, [], 1
    while True:
        raw = f.readline()
        lineno += 1
        if not raw:
            raise MeshFormatError(path, f'line {lineno}', f'Unexpected end of PLY header in {path} at line {lineno}')
        tokens = raw.decode('ascii', errors='replace').split()
        if not tokens or tokens[0] in ('comment', 'obj_info'):
            continue
        try:
            if tokens[0] == 'format':
                fmt = tokens[1]
                if fmt not in _PLY_BYTEORDER:
                    raise ValueError(fmt)
            elif tokens[0] == 'element':
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == 'property':
                if tokens[1] == 'list':
                    prop = (tokens[4], ('list', _ply_type(tokens[2], path, lineno), _ply_type(tokens[3], path, lineno)))
                else:
                    prop = (tokens[2], _ply_type(tokens[1], path, lineno))
                elements[-1][2].append(prop)
            elif tokens[0] == 'end_header':
                break
            else:
                raise ValueError(tokens[0])
        except (ValueError, IndexError):
            raise MeshFormatError(path, f'line {lineno}', f'Malformed PLY header in {path} at line {lineno}')
    if fmt is None:
        raise MeshFormatError(path, f'line {lineno}', f'PLY header of {path} declares no format')
    return fmt, elements, lineno


def _read_ply_ascii(f, path, elements, lineno):
    lines = iter(f)
    data = {}
    for name, count, props in elements:
        columns = {p: [] for p, _ in props}
        for _ in range(count):
            raw = next(lines, None)
            lineno += 1
            while raw is not None and not raw.strip():
                raw = next(lines, None)
                lineno += 1
            if raw is None:
                raise MeshFormatError(path, f'line {lineno}', f'Unexpected end of {path} at line {lineno}')
            tokens = raw.split()
            pos = 0
            try:
                for pname, ptype in props:
                    if isinstance(ptype, tuple):
                        n = int(tokens[pos])
                        item = int if ptype[2][0] in 'iu' else float
                        if len(tokens) < pos + 1 + n:
                            raise IndexError(pname)
                        columns[pname].append([item(t) for t in tokens[pos + 1:pos + 1 + n]])
                        pos += 1 + n
                    else:
                        columns[pname].append(float(tokens[pos]))
                        pos += 1
            except (ValueError, IndexError):
                raise MeshFormatError(path, f'line {lineno}', f'Malformed {name} record in {path} at line {lineno}')
        data[name] = columns
    return data


def _read_ply_binary(f, path, elements, byteorder):
    body = f.read()
    offset = 0
    data = {}

    def take(dtype, n):
        nonlocal offset
        need = dtype.itemsize * n
        if offset + need > len(body):
            raise MeshFormatError(path, f'offset {offset}', f'Truncated binary PLY {path} at byte offset {offset}')
        values = np.frombuffer(body, dtype=dtype, count=n, offset=offset)
        offset += need
        return values

    for name, count, props in elements:
        if not any(isinstance(t, tuple) for _, t in props):
            dtype = np.dtype([(p, byteorder + t) for p, t in props])
            records = take(dtype, count)
            data[name] = {p: records[p] for p, _ in props}
            continue
        columns = {p: [] for p, _ in props}
        for _ in range(count):
            for pname, ptype in props:
                if isinstance(ptype, tuple):
                    n = int(take(np.dtype(byteorder + ptype[1]), 1)[0])
                    columns[pname].append(take(np.dtype(byteorder + ptype[2]), n))
                else:
                    columns[pname].append(take(np.dtype(byteorder + ptype), 1)[0])
        data[name] = columns
    return data


def _read_ply(path):
    with open(path, 'rb') as f:
        fmt, elements, lineno = _read_ply_header(f, path)
        byteorder = _PLY_BYTEORDER[fmt]
        if byteorder is None:
            return _read_ply_ascii(f, path, elements, lineno)
        return _read_ply_binary(f, path, elements, byteorder)


def _ply_vertices(data, path):
    vertex = data.get('vertex', {})
    if vertex and not all(k in vertex for k in 'xyz'):
        raise MeshFormatError(path, 'header', f'PLY vertex element of {path} lacks x/y/z')
    if not vertex:
        return np.zeros((0, 3)), vertex
    return np.column_stack([np.asarray(vertex[k], dtype=np.float64) for k in 'xyz']), vertex


def _ply_normals(vertex, n, path):
    if not all(k in vertex for k in ('nx', 'ny', 'nz')):
        return None
    return _unit_or_none(np.column_stack([np.asarray(vertex[k], dtype=np.float64) for k in ('nx', 'ny', 'nz')]), n, path)


def _write_ply(path, vertex_columns, faces, binary):
    n = len(vertex_columns[0][2]) if vertex_columns else 0
    header = ['ply', 'format binary_little_endian 1.0' if binary else 'format ascii 1.0',
              'comment morphkit', f'element vertex {n}']
    header += [f'property {ptype} {name}' for name, ptype, _ in vertex_columns]
    if faces is not None:
        header += [f'element face {len(faces)}', 'property list uchar int vertex_indices']
    header.append('end_header')
    dtype = np.dtype([(name, '<' + _PLY_TYPES[ptype]) for name, ptype, _ in vertex_columns])
    records = np.empty(n, dtype=dtype)
    for name, _, values in vertex_columns:
        records[name] = values
    with open(path, 'wb') as f:
        f.write(('\n'.join(header) + '\n').encode('ascii'))
        if binary:
            f.write(records.tobytes())
            if faces is not None:
                face_records = np.empty(len(faces), dtype=[('n', 'u1'), ('idx', '<i4', (3,))])
                face_records['n'] = 3
                face_records['idx'] = faces
                f.write(face_records.tobytes())
            return
        fmt = ' '.join('%.17g' if _PLY_TYPES[ptype][0] == 'f' else '%d' for _, ptype, _ in vertex_columns)
        if n:
            np.savetxt(f, np.column_stack([np.asarray(v, dtype=np.float64) for _, _, v in vertex_columns]), fmt=fmt)
        if faces is not None and len(faces):
            np.savetxt(f, np.column_stack([np.full(len(faces), 3), faces]), fmt='%d')


def _load_with_trimesh(path, format):
    '''Vertices and triangles exactly as stored; quads and polygons come back triangulated'''
    try:
        loaded = trimesh.load(str(path), file_type=format, process=False, validate=False)
        if isinstance(loaded, trimesh.Scene):
            if not loaded.geometry:
                raise MeshFormatError(path, 'body', f'{path} holds no geometry')
            loaded = loaded.dump(concatenate=True)
        vertices = np.asarray(loaded.vertices, dtype=np.float64).reshape(-1, 3)
        faces = getattr(loaded, 'faces', None)
        faces = np.zeros((0, 3), dtype=np.int64) if faces is None else np.asarray(faces, dtype=np.int64)
    except MeshFormatError:
        raise
    except Exception as e:
        raise MeshFormatError(path, str(e) or type(e).__name__,
                              f'Malformed {format.upper()} file {path}: {type(e).__name__}: {e}') from e
    if not len(vertices):
        raise MeshFormatError(path, 'body', f'{path} holds no vertices')
    return TriMesh(vertices, faces)


def load_mesh(path, format=None):
    '''Read an OBJ or PLY (ASCII or binary) triangle mesh through trimesh.

    Vertices keep their file order, though trimesh's OBJ reader can leave out
    vertices no face uses. Stored normals are not carried over; vertex_normals()
    recomputes them.
    '''
    format = _resolve_format(path, format)
    _check_exists(path)
    mesh = _load_with_trimesh(path, format)
    logger.debug(f'Loaded {path}: {mesh.n_vertices} vertices, {mesh.n_faces} faces')
    return mesh


def save_mesh(mesh, path, format=None, binary=False):
    format = _resolve_format(path, format)
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == 'obj':
        _save_obj(mesh, path)
        return path
    columns = [(k, 'double', mesh.vertices[:, i]) for i, k in enumerate('xyz')]
    if mesh.normals is not None:
        columns += [(k, 'double', mesh.normals[:, i]) for i, k in enumerate(('nx', 'ny', 'nz'))]
    _write_ply(path, columns, mesh.faces, binary)
    return path


def load_point_cloud(path):
    '''Read a PLY point cloud, with the optional per-point `view` and `vertex_id` properties'''
    _check_exists(path)
    if _resolve_format(path, None) == 'obj':
        return PointCloud(_load_with_trimesh(path, 'obj').vertices)
    data = _read_ply(path)
    points, vertex = _ply_vertices(data, path)
    views = None
    if 'view' in vertex:
        codes = np.asarray(vertex['view']).astype(np.int64)
        views = np.array([VIEWS[c] if 0 <= c < len(VIEWS) else '' for c in codes], dtype=str)
    vertex_ids = np.asarray(vertex['vertex_id']).astype(np.int64) if 'vertex_id' in vertex else None
    return PointCloud(points, views, vertex_ids, _ply_normals(vertex, len(points), path))


def save_point_cloud(cloud, path, binary=True):
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = [(k, 'double', cloud.points[:, i]) for i, k in enumerate('xyz')]
    if cloud.normals is not None:
        columns += [(k, 'double', cloud.normals[:, i]) for i, k in enumerate(('nx', 'ny', 'nz'))]
    if cloud.views is not None:
        lookup = {v: i for i, v in enumerate(VIEWS)}
        columns.append(('view', 'uchar', np.array([lookup.get(v, UNTAGGED_VIEW) for v in cloud.views], dtype=np.int64)))
    if cloud.vertex_ids is not None:
        columns.append(('vertex_id', 'int', cloud.vertex_ids))
    _write_ply(path, columns, None, binary)
    return path
