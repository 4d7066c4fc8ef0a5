'''
Semantic landmark conventions and landmark sets (2D pixel or 3D model units).
'''
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import MeshValidationError, MissingLandmarkError, SchemeMismatchError, MissingInputError
from . import reference, utilities

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LandmarkScheme:
    '''A landmark convention: ordered semantic ids plus the designated eye-center and nose-tip ids'''
    name: str
    ids: Tuple[str, ...]
    left_eye: str = reference.LEFT_EYE
    right_eye: str = reference.RIGHT_EYE
    nose_tip: str = reference.NOSE_TIP

    def __post_init__(self):
        object.__setattr__(self, 'ids', tuple(self.ids))
        if len(set(self.ids)) != len(self.ids):
            raise MeshValidationError(f'Scheme {self.name} has duplicate landmark ids')
        for designated in (self.left_eye, self.right_eye, self.nose_tip):
            if designated not in self.ids:
                raise MeshValidationError(f'Scheme {self.name} does not declare designated landmark {designated}')

    def to_dict(self):
        return {'name': self.name, 'ids': list(self.ids), 'left_eye': self.left_eye,
                'right_eye': self.right_eye, 'nose_tip': self.nose_tip}

    @classmethod
    def from_dict(cls, d):
        return cls(d['name'], tuple(d['ids']), d['left_eye'], d['right_eye'], d['nose_tip'])


def build_synthetic_scheme(n_jawline=reference.DEFAULT_JAWLINE_COUNT):
    ids = tuple(lid for lid, _, _ in reference.landmark_directions(n_jawline))
    return LandmarkScheme(f'synthetic-{len(ids)}', ids)


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    '''Ordered (semantic id, position) pairs under one scheme; optionally tied to mesh vertices'''
    ids: Tuple[str, ...]
    positions: np.ndarray
    scheme: LandmarkScheme
    vertex_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        ids = tuple(self.ids)
        if len(set(ids)) != len(ids):
            raise MeshValidationError('Landmark ids must be unique')
        unknown = [i for i in ids if i not in self.scheme.ids]
        if unknown:
            raise MeshValidationError(f'Landmarks {unknown} are not part of scheme {self.scheme.name}')
        positions = np.asarray(self.positions, dtype=np.float64)
        if positions.size == 0:
            positions = positions.reshape(0, 3)
        if positions.ndim != 2 or positions.shape[1] not in (2, 3) or len(positions) != len(ids):
            raise MeshValidationError(f'Landmark positions of shape {positions.shape} for {len(ids)} ids')
        if not np.all(np.isfinite(positions)):
            raise MeshValidationError('Landmark positions must be finite')
        positions = positions.copy()
        positions.setflags(write=False)
        vertex_indices = self.vertex_indices
        if vertex_indices is not None:
            vertex_indices = np.array(vertex_indices, dtype=np.int64).reshape(-1)
            if len(vertex_indices) != len(ids):
                raise MeshValidationError(f'{len(vertex_indices)} vertex indices for {len(ids)} landmarks')
            vertex_indices.setflags(write=False)
        object.__setattr__(self, 'ids', ids)
        object.__setattr__(self, 'positions', positions)
        object.__setattr__(self, 'vertex_indices', vertex_indices)

    @classmethod
    def from_vertices(cls, vertices, vertex_indices, ids, scheme):
        vertex_indices = np.asarray(vertex_indices, dtype=np.int64)
        return cls(tuple(ids), np.asarray(vertices)[vertex_indices], scheme, vertex_indices)

    def __len__(self):
        return len(self.ids)

    def __contains__(self, landmark_id):
        return landmark_id in self.ids

    @property
    def dim(self):
        return self.positions.shape[1]

    def index_of(self, landmark_id):
        try:
            return self.ids.index(landmark_id)
        except ValueError:
            raise MissingLandmarkError(landmark_id, self.scheme.name) from None

    def position(self, landmark_id):
        return self.positions[self.index_of(landmark_id)]

    def check_scheme(self, other):
        if self.scheme.name != other.scheme.name:
            raise SchemeMismatchError(self.scheme.name, other.scheme.name)

    def matched(self, other):
        '''Positions of the landmarks present in both sets, in scheme order -> (ids, mine, theirs)'''
        self.check_scheme(other)
        shared = set(self.ids) & set(other.ids)
        ids = [i for i in self.scheme.ids if i in shared]
        mine = self.positions[[self.index_of(i) for i in ids]] if ids else np.zeros((0, self.dim))
        theirs = other.positions[[other.index_of(i) for i in ids]] if ids else np.zeros((0, other.dim))
        return ids, mine, theirs

    def subset(self, ids):
        '''Keep the given ids (those present), preserving this set's order'''
        wanted = set(ids)
        keep = [k for k, i in enumerate(self.ids) if i in wanted]
        vi = self.vertex_indices[keep] if self.vertex_indices is not None else None
        return LandmarkSet(tuple(self.ids[k] for k in keep), self.positions[keep], self.scheme, vi)

    def with_positions(self, positions, vertex_indices=None):
        return LandmarkSet(self.ids, positions, self.scheme, vertex_indices)

    def transformed(self, transform):
        '''Apply a transform (anything with `apply`) to 3D positions; vertex ties are kept'''
        return LandmarkSet(self.ids, transform.apply(self.positions), self.scheme, self.vertex_indices)

    def augmented(self, other):
        '''This set plus the landmarks only `other` carries, reordered by the scheme'''
        self.check_scheme(other)
        extra = [k for k, i in enumerate(other.ids) if i not in self.ids]
        ids = self.ids + tuple(other.ids[k] for k in extra)
        positions = np.concatenate([self.positions, other.positions[extra]]) if extra else self.positions
        order = sorted(range(len(ids)), key=lambda k: self.scheme.ids.index(ids[k]))
        return LandmarkSet(tuple(ids[k] for k in order), positions[order], self.scheme)

    def to_dict(self):
        records = []
        for k, lid in enumerate(self.ids):
            record = {'id': lid, 'position': [float(x) for x in self.positions[k]]}
            if self.vertex_indices is not None:
                record['vertex_index'] = int(self.vertex_indices[k])
            records.append(record)
        return {'scheme': self.scheme.to_dict(), 'dim': self.dim, 'landmarks': records}

    @classmethod
    def from_dict(cls, d):
        scheme = LandmarkScheme.from_dict(d['scheme'])
        records = d['landmarks']
        positions = np.array([r['position'] for r in records], dtype=np.float64).reshape(-1, int(d.get('dim', 3)))
        vertex_indices = None
        if records and all('vertex_index' in r for r in records):
            vertex_indices = [r['vertex_index'] for r in records]
        return cls(tuple(r['id'] for r in records), positions, scheme, vertex_indices)

    def save(self, path):
        return utilities.write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(utilities.read_json(path))
        except FileNotFoundError:
            raise MissingInputError(path)
