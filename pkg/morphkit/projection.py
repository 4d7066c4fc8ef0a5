'''
Pinhole camera projection: 2D landmark to 3D vertex retrieval and point-splat depth images.
'''
import logging
import pathlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import (MeshValidationError, MeshFormatError, EmptyProjectionError, ParameterError,
                     MissingInputError)
from .fusion import RigidTransform
from .landmarks import LandmarkSet
from .mesh import SpatialIndex
from . import utilities

logger = logging.getLogger(__name__)

DEPTH_SENTINEL = 0.0
PGM_MAX = 65535


@dataclass(frozen=True, eq=False)
class Camera:
    '''Distortion-free pinhole camera; u = fx * X / Z + cx, v = fy * Y / Z + cy in the camera frame'''
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: RigidTransform = field(default_factory=RigidTransform.identity)   # world -> camera

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError('focal length', (self.fx, self.fy))
        if int(self.width) != self.width or int(self.height) != self.height or self.width < 1 or self.height < 1:
            raise ParameterError('image size', (self.width, self.height))
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ParameterError('principal point', (self.cx, self.cy))
        object.__setattr__(self, 'width', int(self.width))
        object.__setattr__(self, 'height', int(self.height))

    def to_camera(self, points):
        return self.extrinsics.apply(points)

    def project(self, points):
        '''World points -> (pixel positions (n, 2), camera depths (n,)); no culling'''
        xyz = self.to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        z = xyz[:, 2]
        with np.errstate(divide='ignore', invalid='ignore'):
            uv = np.column_stack([self.fx * xyz[:, 0] / z + self.cx, self.fy * xyz[:, 1] / z + self.cy])
        return uv, z

    def visible(self, uv, z):
        return ((z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < self.width)
                & (uv[:, 1] >= 0) & (uv[:, 1] < self.height))

    def to_dict(self):
        return {'fx': self.fx, 'fy': self.fy, 'cx': self.cx, 'cy': self.cy,
                'width': self.width, 'height': self.height, 'extrinsics': self.extrinsics.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(d['fx'], d['fy'], d['cx'], d['cy'], d['width'], d['height'],
                   RigidTransform.from_dict(d['extrinsics']))


class Projection(NamedTuple):
    indices: np.ndarray     # cloud indices, ascending
    pixels: np.ndarray      # (k, 2)
    depths: np.ndarray      # (k,)


def project_vertices(cloud, cam):
    '''Every point in front of the camera whose pixel falls inside the image, once, in cloud order'''
    uv, z = cam.project(cloud.points)
    keep = cam.visible(uv, z)
    return Projection(np.flatnonzero(keep), uv[keep], z[keep])


def retrieve_3d_landmarks(cloud, cam, lms2d):
    '''For each 2D landmark pick the point whose projection is nearest in pixel space (lowest index on ties)'''
    if lms2d.dim != 2:
        raise MeshValidationError('Retrieval needs 2D landmarks')
    projected = project_vertices(cloud, cam)
    if not len(projected.indices):
        raise EmptyProjectionError('No point projects into the image')
    nearest, pixel_distance = SpatialIndex(projected.pixels, dim=2).nearest(lms2d.positions)
    indices = projected.indices[nearest]
    logger.debug(f'Retrieved {len(indices)} landmarks, max pixel distance {pixel_distance.max(initial=0):.3f}')
    return LandmarkSet(lms2d.ids, cloud.points[indices], lms2d.scheme, indices)


def project_landmarks(lms3d, cam):
    '''2D annotation of the 3D landmarks that land inside the image'''
    uv, z = cam.project(lms3d.positions)
    keep = cam.visible(uv, z)
    return LandmarkSet(tuple(i for i, k in zip(lms3d.ids, keep) if k), uv[keep], lms3d.scheme)


# ============= Depth images =============

@dataclass(frozen=True, eq=False)
class DepthImage:
    '''Row-major (height, width) camera depths; DEPTH_SENTINEL marks pixels without data'''
    depth: np.ndarray

    def __post_init__(self):
        depth = np.array(self.depth, dtype=np.float64)
        if depth.ndim != 2:
            raise MeshValidationError(f'Depth image must be 2D, got shape {depth.shape}')
        if not np.all(np.isfinite(depth)) or np.any(depth < 0):
            raise MeshValidationError('Depths must be finite and positive (or the 0 sentinel)')
        depth.setflags(write=False)
        object.__setattr__(self, 'depth', depth)

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def valid(self):
        return self.depth != DEPTH_SENTINEL


def render_depth(cloud, cam):
    '''Point-splat z-buffer: each pixel keeps the smallest camera depth among the points landing in it'''
    projected = project_vertices(cloud, cam)
    zbuffer = np.full((cam.height, cam.width), np.inf)
    cols = np.floor(projected.pixels[:, 0]).astype(np.int64)
    rows = np.floor(projected.pixels[:, 1]).astype(np.int64)
    np.minimum.at(zbuffer, (rows, cols), projected.depths)
    zbuffer[np.isinf(zbuffer)] = DEPTH_SENTINEL
    return DepthImage(zbuffer)


def save_pfm(image, path):
    '''Little-endian grayscale PFM, bottom row first'''
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(f'Pf\n{image.width} {image.height}\n-1.0\n'.encode('ascii'))
        f.write(np.flipud(image.depth).astype('<f4').tobytes())
    return path


def load_pfm(path):
    if not pathlib.Path(path).is_file():
        raise MissingInputError(path)
    with open(path, 'rb') as f:
        header = [f.readline().decode('ascii', errors='replace').strip() for _ in range(3)]
        body = f.read()
    if header[0] != 'Pf':
        raise MeshFormatError(path, 'line 1', f'{path} is not a grayscale PFM file')
    try:
        width, height = (int(x) for x in header[1].split())
        scale = float(header[2])
    except ValueError:
        raise MeshFormatError(path, 'header', f'Malformed PFM header in {path}')
    dtype = '<f4' if scale < 0 else '>f4'
    if len(body) < 4 * width * height:
        raise MeshFormatError(path, 'data', f'Truncated PFM data in {path}')
    depth = np.frombuffer(body, dtype=dtype, count=width * height).reshape(height, width)
    return DepthImage(np.flipud(depth).astype(np.float64))


def save_pgm16(image, path, depth_scale=None):
    '''16-bit PGM of round(depth / depth_scale) plus a sidecar JSON declaring the scale'''
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if depth_scale is None:
        max_depth = float(image.depth.max(initial=0.0))
        depth_scale = max_depth / (PGM_MAX - 1) if max_depth > 0 else 1.0
    if not depth_scale > 0:
        raise ParameterError('depth_scale', depth_scale)
    levels = np.rint(image.depth / depth_scale)
    levels = np.where(image.valid, np.clip(levels, 1, PGM_MAX), 0).astype('>u2')
    with open(path, 'wb') as f:
        f.write(f'P5\n{image.width} {image.height}\n{PGM_MAX}\n'.encode('ascii'))
        f.write(levels.tobytes())
    utilities.write_json(path.with_suffix('.json'), {'depth_scale': depth_scale, 'sentinel': DEPTH_SENTINEL})
    return path


def load_pgm16(path):
    path = pathlib.Path(path)
    if not path.is_file():
        raise MissingInputError(path)
    sidecar = path.with_suffix('.json')
    if not sidecar.is_file():
        raise MissingInputError(sidecar)
    depth_scale = float(utilities.read_json(sidecar)['depth_scale'])
    data = path.read_bytes()
    tokens, offset = [], 0
    while len(tokens) < 4:
        while offset < len(data) and data[offset:offset + 1].isspace():
            offset += 1
        start = offset
        while offset < len(data) and not data[offset:offset + 1].isspace():
            offset += 1
        if start == offset:
            raise MeshFormatError(path, f'offset {offset}', f'Truncated PGM header in {path}')
        tokens.append(data[start:offset].decode('ascii', errors='replace'))
    offset += 1
    if tokens[0] != 'P5' or tokens[3] != str(PGM_MAX):
        raise MeshFormatError(path, 'header', f'{path} is not a 16-bit binary PGM')
    width, height = int(tokens[1]), int(tokens[2])
    levels = np.frombuffer(data, dtype='>u2', count=width * height, offset=offset).reshape(height, width)
    return DepthImage(levels.astype(np.float64) * depth_scale)
