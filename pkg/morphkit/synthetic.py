'''
Synthetic heads with analytic ground truth: a subdivided sphere, stretched into an ellipsoid
and shaped by compact radial bumps, scanned by a simulated three-camera ring.
'''
import logging
import pathlib
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import NamedTuple, Tuple

import numpy as np
from tqdm import tqdm

from .errors import ParameterError
from .fusion import RigidTransform
from .landmarks import LandmarkSet, build_synthetic_scheme
from .mesh import TriMesh, PointCloud, SpatialIndex, save_mesh, save_point_cloud
from .projection import Camera, project_landmarks, render_depth, save_pfm
from .registration import PartSegmentation
from . import reference, utilities

logger = logging.getLogger(__name__)


def direction(azimuth, elevation):
    '''Unit vector for (azimuth, elevation); azimuth 0, elevation 0 is +z, positive azimuth towards +x'''
    return np.array([np.cos(elevation) * np.sin(azimuth), np.sin(elevation), np.cos(elevation) * np.cos(azimuth)])


def elevation_of(units):
    return np.arcsin(np.clip(units[:, 1], -1.0, 1.0))


# ============= Sphere =============

def _icosahedron():
    top = [(2 / np.sqrt(5) * np.cos(2 * np.pi * k / 5), 2 / np.sqrt(5) * np.sin(2 * np.pi * k / 5), 1 / np.sqrt(5))
           for k in range(5)]
    bottom = [(2 / np.sqrt(5) * np.cos(2 * np.pi * k / 5 + np.pi / 5),
               2 / np.sqrt(5) * np.sin(2 * np.pi * k / 5 + np.pi / 5), -1 / np.sqrt(5)) for k in range(5)]
    vertices = np.array([(0.0, 0.0, 1.0)] + top + bottom + [(0.0, 0.0, -1.0)])
    faces = []
    for k in range(5):
        t0, t1 = 1 + k, 1 + (k + 1) % 5
        b0, b1 = 6 + k, 6 + (k + 1) % 5
        faces += [(0, t0, t1), (t0, b0, t1), (t1, b0, b1), (11, b1, b0)]
    return vertices, np.array(faces)


def _orient_outward(vertices, faces):
    tri = vertices[faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    inward = np.einsum('ij,ij->i', normals, tri.mean(axis=1)) < 0
    faces = faces.copy()
    faces[inward] = faces[inward][:, [0, 2, 1]]
    return faces


@lru_cache(maxsize=None)
def icosphere(subdivision):
    '''Unit sphere with vertices at both poles; 10 * 4**subdivision + 2 vertices'''
    vertices, faces = _icosahedron()
    vertices = list(vertices)
    for _ in range(subdivision):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = (vertices[a] + vertices[b]) / 2
                vertices.append(m / np.linalg.norm(m))
                cache[key] = len(vertices) - 1
            return cache[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = np.array(refined)
    vertices = np.array(vertices)
    faces = _orient_outward(vertices, faces)
    vertices.setflags(write=False)
    faces.setflags(write=False)
    return vertices, faces


# ============= Head parameters =============

@dataclass(frozen=True)
class Bump:
    '''Compact radial bump a * (1 - (theta / width)**2)**3 around a direction, zero beyond `width`'''
    name: str
    azimuth: float
    elevation: float
    amplitude: float
    width: float

    def profile(self, units):
        theta = np.arccos(np.clip(units @ direction(self.azimuth, self.elevation), -1.0, 1.0))
        inside = theta < self.width
        values = np.zeros(len(units))
        values[inside] = self.amplitude * (1 - (theta[inside] / self.width) ** 2) ** 3
        return values


DEFAULT_RADII = (0.75, 1.0, 0.9)
DEFAULT_FEATURES = (
    Bump('nose', 0.0, 0.0, 0.25, 0.35),
    Bump('brow_left', 0.42, 0.44, 0.05, 0.25),
    Bump('brow_right', -0.42, 0.44, 0.05, 0.25),
    Bump('chin', 0.0, -0.86, 0.08, 0.35),
    Bump('eye_left', 0.40, 0.22, -0.04, 0.15),
    Bump('eye_right', -0.40, 0.22, -0.04, 0.15),
)
# latent identity modes: (name, radius axis or feature names, standard deviation)
SHAPE_MODES = (
    ('width', 0, 0.06),
    ('height', 1, 0.06),
    ('depth', 2, 0.05),
    ('nose', ('nose',), 0.05),
    ('chin', ('chin',), 0.03),
    ('brows', ('brow_left', 'brow_right'), 0.02),
)

# face region carried by the template: within 80 degrees of the face direction, elevation in range
FACE_REGION_MAX_ANGLE = np.deg2rad(80.0)
FACE_REGION_ELEVATION = (-1.0, 0.9)


@dataclass(frozen=True)
class SyntheticHeadParams:
    radii: Tuple[float, float, float] = DEFAULT_RADII
    features: Tuple[Bump, ...] = DEFAULT_FEATURES
    expression: str = 'neutral'
    expression_magnitude: float = 1.0
    subdivision: int = 4
    n_jawline: int = reference.DEFAULT_JAWLINE_COUNT
    seed: int = 0

    def __post_init__(self):
        if len(self.radii) != 3 or any(not r > 0 for r in self.radii):
            raise ParameterError('radii', self.radii)
        if int(self.subdivision) != self.subdivision or self.subdivision < 1:
            raise ParameterError('subdivision', self.subdivision)
        if self.expression not in reference.EXPRESSION_WEIGHTS:
            raise ParameterError('expression', self.expression)
        if any(not b.width > 0 for b in self.features):
            raise ParameterError('features', self.features, 'Bump widths must be positive')
        object.__setattr__(self, 'radii', tuple(float(r) for r in self.radii))
        object.__setattr__(self, 'features', tuple(self.features))

    def feature(self, name):
        return next(b for b in self.features if b.name == name)

    def with_shape(self, coefficients):
        '''Move along the latent identity modes by `coefficients` standard deviations'''
        coefficients = np.asarray(coefficients, dtype=np.float64)
        if len(coefficients) > len(SHAPE_MODES):
            raise ParameterError('coefficients', coefficients, f'At most {len(SHAPE_MODES)} shape modes')
        radii = list(self.radii)
        amplitude = {b.name: b.amplitude for b in self.features}
        for (name, target, std), c in zip(SHAPE_MODES, coefficients):
            if isinstance(target, int):
                radii[target] += c * std
            else:
                for feature in target:
                    amplitude[feature] += c * std
        features = tuple(replace(b, amplitude=amplitude[b.name]) for b in self.features)
        return replace(self, radii=tuple(radii), features=features)

    def with_expression(self, expression, magnitude=1.0):
        return replace(self, expression=expression, expression_magnitude=magnitude)


def expression_offsets(units, expression, magnitude=1.0):
    offsets = np.zeros(len(units))
    for base, weight in reference.EXPRESSION_WEIGHTS[expression].items():
        azimuth, elevation, width = reference.EXPRESSION_BASES[base]
        offsets += Bump(base, azimuth, elevation, weight * reference.EXPRESSION_UNIT * magnitude, width).profile(units)
    return offsets


@lru_cache(maxsize=None)
def landmark_vertices(subdivision, n_jawline=reference.DEFAULT_JAWLINE_COUNT):
    '''Sphere vertex nearest to each landmark direction'''
    units, _ = icosphere(subdivision)
    directions = np.array([direction(a, e) for _, a, e in reference.landmark_directions(n_jawline)])
    indices, _ = SpatialIndex(units).nearest(directions)
    indices.setflags(write=False)
    return indices


def generate_head(params=None):
    '''Deterministic head mesh and its landmarks at known vertices'''
    params = params or SyntheticHeadParams()
    units, faces = icosphere(params.subdivision)
    offsets = sum((b.profile(units) for b in params.features), np.zeros(len(units)))
    if params.expression != 'neutral':
        offsets = offsets + expression_offsets(units, params.expression, params.expression_magnitude)
    vertices = units * np.asarray(params.radii) + offsets[:, None] * units
    mesh = TriMesh(vertices, faces)
    scheme = build_synthetic_scheme(params.n_jawline)
    lms = LandmarkSet.from_vertices(vertices, landmark_vertices(params.subdivision, params.n_jawline),
                                    scheme.ids, scheme)
    return mesh, lms


def face_region_mask(units):
    elevation = elevation_of(units)
    return ((units[:, 2] >= np.cos(FACE_REGION_MAX_ANGLE))
            & (elevation >= FACE_REGION_ELEVATION[0]) & (elevation <= FACE_REGION_ELEVATION[1]))


def label_face_parts(units):
    '''Part index (into reference.FACE_PARTS) per unit direction; first matching rule wins:
    nose, eyes, mouth, boundary band of the face region, forehead, otherwise cheek.'''
    parts = {name: k for k, name in enumerate(reference.FACE_PARTS)}
    angle = lambda az, el: np.arccos(np.clip(units @ direction(az, el), -1.0, 1.0))
    elevation = elevation_of(units)
    rules = [
        ('nose', angle(0.0, 0.0) < 0.30),
        ('eyes', np.minimum(angle(0.40, 0.22), angle(-0.40, 0.22)) < 0.17),
        ('mouth', angle(0.0, -0.45) < 0.27),
        ('boundary', (angle(0.0, 0.0) > np.deg2rad(66.0)) | (elevation > 0.78) | (elevation < -0.92)),
        ('forehead', elevation > 0.36),
    ]
    labels = np.full(len(units), parts['cheek'])
    assigned = np.zeros(len(units), dtype=bool)
    for name, mask in rules:
        labels[mask & ~assigned] = parts[name]
        assigned |= mask
    return labels


def generate_template(subdivision=4, n_jawline=reference.DEFAULT_JAWLINE_COUNT, lambdas=None):
    '''Mean neutral head cropped to the face region -> (mesh, landmarks, part segmentation)'''
    mesh, lms = generate_head(SyntheticHeadParams(subdivision=subdivision, n_jawline=n_jawline))
    units, _ = icosphere(subdivision)
    keep = face_region_mask(units)
    new_index = np.cumsum(keep) - 1
    template = mesh.submesh(keep)
    if not np.all(keep[lms.vertex_indices]):
        raise ParameterError('subdivision', subdivision, 'Template crop drops landmarks')
    template_lms = LandmarkSet.from_vertices(template.vertices, new_index[lms.vertex_indices], lms.ids, lms.scheme)
    lambdas = {**reference.FACE_PART_LAMBDA, **(lambdas or {})}
    parts = PartSegmentation(reference.FACE_PARTS, tuple(lambdas[p] for p in reference.FACE_PARTS),
                             label_face_parts(units[keep]))
    return template, template_lms, parts


# ============= Scanner =============

@dataclass(frozen=True)
class ScanSimParams:
    '''Camera ring (azimuth in degrees per view), pinhole intrinsics, noise and dropout'''
    view_azimuths: Tuple[Tuple[str, float], ...] = tuple(reference.VIEW_AZIMUTH.items())
    distance: float = 6.0
    focal: float = 800.0
    width: int = 640
    height: int = 480
    noise: float = 0.0
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.noise >= 0:
            raise ParameterError('noise', self.noise)
        if not 0 <= self.dropout < 1:
            raise ParameterError('dropout', self.dropout)
        if not self.distance > 0:
            raise ParameterError('distance', self.distance)


class ScanView(NamedTuple):
    view: str
    cloud: PointCloud           # in the view (camera) frame, vertex_ids = source mesh vertices
    landmarks: LandmarkSet      # vertex_indices index the cloud
    camera: Camera              # identity extrinsics: the cloud is already in its frame
    to_world: RigidTransform


def view_camera(azimuth_degrees, params):
    '''World camera on the ring looking at the origin; image x towards the subject's left, y down'''
    a = np.deg2rad(azimuth_degrees)
    center = params.distance * np.array([np.sin(a), 0.0, np.cos(a)])
    rotation = np.array([[np.cos(a), 0.0, -np.sin(a)],
                         [0.0, -1.0, 0.0],
                         [-np.sin(a), 0.0, -np.cos(a)]])
    return Camera(params.focal, params.focal, (params.width - 1) / 2, (params.height - 1) / 2,
                  params.width, params.height, RigidTransform(rotation, -rotation @ center))


def simulate_scan(mesh, lms, params=None):
    '''Per view: back-face culled, noisy, thinned vertices in the view frame plus the exact pose'''
    params = params or ScanSimParams()
    rng = np.random.default_rng(params.seed)
    normals = mesh.vertex_normals()
    views = []
    for view, azimuth in params.view_azimuths:
        world_camera = view_camera(azimuth, params)
        to_view = world_camera.extrinsics
        center = to_view.inverse().translation
        facing = np.flatnonzero(np.einsum('ij,ij->i', normals, center - mesh.vertices) > 0)
        if params.dropout > 0:
            facing = facing[rng.random(len(facing)) >= params.dropout]
        points = mesh.vertices[facing]
        if params.noise > 0:
            points = points + rng.normal(0.0, params.noise, points.shape)
        cloud = PointCloud(to_view.apply(points), np.full(len(facing), view), facing)
        row = {v: k for k, v in enumerate(facing)}
        seen = [k for k, v in enumerate(lms.vertex_indices) if v in row]
        rows = np.array([row[lms.vertex_indices[k]] for k in seen], dtype=np.int64)
        view_lms = LandmarkSet(tuple(lms.ids[k] for k in seen), cloud.points[rows], lms.scheme, rows)
        camera = Camera(world_camera.fx, world_camera.fy, world_camera.cx, world_camera.cy,
                        world_camera.width, world_camera.height)
        views.append(ScanView(view, cloud, view_lms, camera, to_view.inverse()))
        logger.debug(f'{view}: {len(facing)} points, {len(seen)} landmarks')
    return views


# ============= Population =============

def split_subjects(subject_ids, rng):
    '''Training / evaluation split, at least two training subjects'''
    n = len(subject_ids)
    n_train = max(2, int(np.floor(reference.TRAIN_FRACTION * n)))
    order = rng.permutation(n)
    train = set(order[:n_train].tolist())
    return {sid: ('train' if k in train else 'eval') for k, sid in enumerate(subject_ids)}


def _write_views(views, sample_dir, root):
    records = []
    for v in views:
        stem = sample_dir / 'views' / v.view
        cloud_path = save_point_cloud(v.cloud, stem.with_name(f'{v.view}_cloud.ply'))
        lms_path = project_landmarks(v.landmarks, v.camera).save(stem.with_name(f'{v.view}_landmarks2d.json'))
        camera_path = utilities.write_json(stem.with_name(f'{v.view}_camera.json'), v.camera.to_dict())
        pose_path = utilities.write_json(stem.with_name(f'{v.view}_to_world.json'), v.to_world.to_dict())
        depth_path = save_pfm(render_depth(v.cloud, v.camera), stem.with_name(f'{v.view}_depth.pfm'))
        records.append({'view': v.view,
                        'cloud_path': utilities.relative_posix(cloud_path, root),
                        'landmarks2d_path': utilities.relative_posix(lms_path, root),
                        'camera_path': utilities.relative_posix(camera_path, root),
                        'to_world_path': utilities.relative_posix(pose_path, root),
                        'depth_path': utilities.relative_posix(depth_path, root)})
    return records


def generate_population(n_subjects, n_expressions, seed, out_dir, subdivision=4,
                        n_jawline=reference.DEFAULT_JAWLINE_COUNT, n_modes=len(SHAPE_MODES),
                        scan_params=None, format='obj'):
    '''Write a seeded population of scanned heads and return its manifest.

    `n_expressions` counts the neutral sample; expressions follow the catalogue order.
    '''
    if int(n_subjects) != n_subjects or n_subjects < 2:
        raise ParameterError('n_subjects', n_subjects, 'A population needs at least 2 subjects')
    if not 1 <= n_expressions <= len(reference.EXPRESSIONS):
        raise ParameterError('n_expressions', n_expressions)
    if not 0 <= n_modes <= len(SHAPE_MODES):
        raise ParameterError('n_modes', n_modes)
    scan_params = scan_params or ScanSimParams()
    root = pathlib.Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    subject_ids = [f'subject_{k:03d}' for k in range(n_subjects)]
    split = split_subjects(subject_ids, rng)
    expressions = [name for name, _ in reference.EXPRESSIONS[:n_expressions]]
    scheme = build_synthetic_scheme(n_jawline)
    subjects = []
    for sid in tqdm(subject_ids, desc='synth'):
        gender = str(rng.choice(reference.GENDERS))
        age = int(rng.integers(reference.AGE_RANGE[0], reference.AGE_RANGE[1] + 1))
        coefficients = rng.standard_normal(n_modes)
        base = SyntheticHeadParams(subdivision=subdivision, n_jawline=n_jawline, seed=seed).with_shape(coefficients)
        samples = []
        for expression in expressions:
            magnitude = 0.0 if expression == 'neutral' else float(rng.uniform(0.6, 1.0))
            mesh, lms = generate_head(base.with_expression(expression, magnitude))
            sample_dir = root / 'subjects' / sid / expression
            mesh_path = save_mesh(mesh, sample_dir / f'head.{format}', format)
            lms_path = lms.save(sample_dir / 'landmarks.json')
            views = simulate_scan(mesh, lms, replace(scan_params, seed=int(rng.integers(2 ** 31))))
            samples.append({'expression': expression,
                            'expression_category': reference.EXPRESSION_CATEGORY[expression],
                            'expression_magnitude': magnitude,
                            'mesh_path': utilities.relative_posix(mesh_path, root),
                            'landmarks_path': utilities.relative_posix(lms_path, root),
                            'views': _write_views(views, sample_dir, root)})
        subjects.append({'id': sid, 'split': split[sid],
                         'attributes': {'gender': gender, 'age': age, 'age_band': reference.age_band(age)},
                         'shape_coefficients': coefficients.tolist(),
                         'samples': samples})
    manifest = {'seed': seed, 'n_subjects': n_subjects, 'n_expressions': n_expressions,
                'subdivision': subdivision, 'scheme': scheme.to_dict(), 'format': format,
                'scan': {'distance': scan_params.distance, 'focal': scan_params.focal, 'noise': scan_params.noise,
                         'dropout': scan_params.dropout},
                'subjects': subjects}
    utilities.write_json(root / 'manifest.json', manifest)
    logger.info(f'Wrote {n_subjects} subjects x {n_expressions} expressions to {root}')
    return manifest
