'''
Reconstruction benchmark: interocular normalization, landmark alignment into a nose-tip frame,
crop radius sweep, symmetric ARMSE, bounding-box NME and subgroup reports.
'''
import logging
import pathlib
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from .errors import MorphkitError, DegenerateInputError, EmptyCropError, ParameterError, MeshValidationError
from .fusion import RigidTransform, estimate_rigid_from_landmarks
from .mesh import MeshDistance
from . import utilities

logger = logging.getLogger(__name__)

DEFAULT_RADII = (0.6, 0.7, 0.8, 0.9, 1.0)
ALIGNMENT_MODES = ('similarity', 'rigid')
NME_MODES = ('3d', '2d')
GROUP_ATTRIBUTES = ('age_band', 'expression_category', 'gender')
METRICS = ('armse', 'nme')


@dataclass(frozen=True)
class EvalConfig:
    radii: Tuple[float, ...] = DEFAULT_RADII
    alignment: str = 'similarity'
    nme_mode: str = '3d'
    bbox_size: Optional[float] = None     # overrides the ground-truth landmark box
    group_by: Tuple[str, ...] = GROUP_ATTRIBUTES

    def __post_init__(self):
        radii = tuple(float(r) for r in self.radii)
        if not radii or any(not (r > 0 and np.isfinite(r)) for r in radii) or any(np.diff(radii) <= 0):
            raise ParameterError('radii', radii, f'Crop radii must be positive and strictly increasing: {radii}')
        if self.alignment not in ALIGNMENT_MODES:
            raise ParameterError('alignment', self.alignment)
        if self.nme_mode not in NME_MODES:
            raise ParameterError('nme_mode', self.nme_mode)
        if self.bbox_size is not None and not self.bbox_size > 0:
            raise ParameterError('bbox_size', self.bbox_size)
        object.__setattr__(self, 'radii', radii)
        object.__setattr__(self, 'group_by', tuple(self.group_by))


@dataclass(frozen=True, eq=False)
class EvalSample:
    sample_id: str
    pred: object            # TriMesh
    pred_lms: object        # LandmarkSet, 3D
    gt: object
    gt_lms: object
    attributes: dict = field(default_factory=dict)


# ============= Protocol =============

def normalize_interocular(gt, gt_lms):
    '''Scale mesh and landmarks uniformly so the eye centres are 1 apart -> (mesh, landmarks, scale)'''
    scheme = gt_lms.scheme
    distance = float(np.linalg.norm(gt_lms.position(scheme.left_eye) - gt_lms.position(scheme.right_eye)))
    if not distance > 0:
        raise DegenerateInputError('Eye-centre landmarks coincide')
    s = 1.0 / distance
    scaling = RigidTransform(scale=s)
    return gt.with_vertices(scaling.apply(gt.vertices)), gt_lms.transformed(scaling), s


def alignment_transform(pred_lms, gt_lms, mode='similarity'):
    '''Landmark alignment of the prediction onto the ground truth, followed by the move of the gt nose tip to 0'''
    if mode not in ALIGNMENT_MODES:
        raise ParameterError('mode', mode)
    T = estimate_rigid_from_landmarks(pred_lms, gt_lms, with_scale=mode == 'similarity')
    nose = gt_lms.position(gt_lms.scheme.nose_tip)
    return RigidTransform(translation=-nose).compose(T)


def align_prediction(pred, pred_lms, gt_lms, mode='similarity'):
    T = alignment_transform(pred_lms, gt_lms, mode)
    return pred.with_vertices(T.apply(pred.vertices))


def to_nose_origin(mesh, lms):
    '''Translate mesh and landmarks so the nose tip is the origin'''
    shift = RigidTransform(translation=-lms.position(lms.scheme.nose_tip))
    return mesh.with_vertices(shift.apply(mesh.vertices)), lms.transformed(shift)


def crop_by_radius(mesh, r):
    '''Vertices within r of the origin and the faces they fully carry'''
    keep = np.linalg.norm(mesh.vertices, axis=1) <= r
    if not np.any(keep):
        raise EmptyCropError(r)
    return mesh.submesh(keep)


def _rms(x):
    return float(np.sqrt(np.mean(x ** 2)))


def armse(pred, gt, r):
    '''Mean of the RMS gt-vertex -> pred-surface and pred-vertex -> gt-surface distances after cropping at r'''
    pred_c, gt_c = crop_by_radius(pred, r), crop_by_radius(gt, r)
    if pred_c.n_faces == 0 or gt_c.n_faces == 0:
        raise EmptyCropError(r, f'Crop at radius {r} leaves no faces')
    to_pred, _, _ = MeshDistance(pred_c).query(gt_c.vertices)
    to_gt, _, _ = MeshDistance(gt_c).query(pred_c.vertices)
    return (_rms(to_pred) + _rms(to_gt)) / 2


def landmark_box_size(lms):
    '''sqrt(width * height) of the axis-aligned x / y landmark box'''
    extent = lms.positions[:, :2].max(axis=0) - lms.positions[:, :2].min(axis=0)
    return float(np.sqrt(extent[0] * extent[1]))


def nme(pred_lms, gt_lms, bbox_size=None):
    '''Mean landmark error over the shared landmarks divided by the box size'''
    ids, pred, gt = pred_lms.matched(gt_lms)
    if not ids:
        raise DegenerateInputError('No landmark shared by prediction and ground truth')
    if pred.shape[1] != gt.shape[1]:
        raise MeshValidationError('Prediction and ground truth landmarks differ in dimension')
    bbox_size = landmark_box_size(gt_lms) if bbox_size is None else bbox_size
    if not bbox_size > 0:
        raise ParameterError('bbox_size', bbox_size)
    return float(np.mean(np.linalg.norm(pred - gt, axis=1))) / bbox_size


def _drop_depth(lms):
    return type(lms)(lms.ids, lms.positions[:, :2], lms.scheme)


def evaluate_sample(sample, config):
    '''One row per crop radius: {radius, armse, nme}'''
    gt, gt_lms, s = normalize_interocular(sample.gt, sample.gt_lms)
    pred, pred_lms = sample.pred, sample.pred_lms
    if config.alignment == 'rigid':
        # the prediction shares the ground truth's original units
        scaling = RigidTransform(scale=s)
        pred, pred_lms = pred.with_vertices(scaling.apply(pred.vertices)), pred_lms.transformed(scaling)
    T = alignment_transform(pred_lms, gt_lms, config.alignment)
    pred, pred_lms = pred.with_vertices(T.apply(pred.vertices)), pred_lms.transformed(T)
    gt, gt_lms = to_nose_origin(gt, gt_lms)
    if config.nme_mode == '2d':
        landmark_error = nme(_drop_depth(pred_lms), _drop_depth(gt_lms), config.bbox_size)
    else:
        landmark_error = nme(pred_lms, gt_lms, config.bbox_size)
    return [{'radius': r, 'armse': armse(pred, gt, r), 'nme': landmark_error} for r in config.radii]


# ============= Reports =============

def _summary(entries, keys):
    grouped = entries.groupby(keys, sort=True)[list(METRICS)]
    table = grouped.agg(['mean', 'median', lambda x: float(np.std(x, ddof=0)), 'count'])
    table.columns = [f'{metric}_{stat}' for metric, stat in
                     ((m, s) for m in METRICS for s in ('mean', 'median', 'std', 'count'))]
    return table.reset_index()


@dataclass(frozen=True, eq=False)
class EvaluationReport:
    '''Per-sample rows (sample, radius, metrics, attributes), failures and subgroup aggregates'''
    entries: pd.DataFrame
    failures: list
    aggregates: pd.DataFrame
    config: EvalConfig

    @property
    def landmark_space(self):
        return '2D (depth dropped after alignment)' if self.config.nme_mode == '2d' else '3D'

    def headline(self, radius=None):
        '''Overall and per-group metric means at one radius (the first by default)'''
        radius = self.config.radii[0] if radius is None else radius
        table = self.aggregates[(self.aggregates['radius'].astype(float) - radius).abs() < 1e-9]
        return table[['attribute', 'group', 'radius', 'nme_mean', 'armse_mean', 'armse_count']].reset_index(drop=True)

    def to_dict(self):
        return {'config': {'radii': list(self.config.radii), 'alignment': self.config.alignment,
                           'nme_mode': self.config.nme_mode, 'bbox_size': self.config.bbox_size},
                'landmark_space': self.landmark_space,
                'n_samples': int(self.entries['sample'].nunique()) if len(self.entries) else 0,
                'failures': self.failures,
                'entries': self.entries.to_dict(orient='records'),
                'aggregates': self.aggregates.to_dict(orient='records'),
                'headline': self.headline().to_dict(orient='records')}

    def save(self, out_dir):
        '''report.json, per-sample and aggregate CSVs, the headline table and one curve file per subgroup'''
        out_dir = pathlib.Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [utilities.write_json(out_dir / 'report.json', self.to_dict())]
        for name, table in (('per_sample.csv', self.entries), ('aggregates.csv', self.aggregates),
                            ('headline.csv', self.headline())):
            table.to_csv(out_dir / name, index=False, float_format='%.10g')
            paths.append(out_dir / name)
        curves = out_dir / 'curves'
        curves.mkdir(exist_ok=True)
        for (attribute, group), rows in self.aggregates.groupby(['attribute', 'group'], sort=True):
            path = curves / f'{attribute}_{group}.dat'
            with open(path, 'w') as f:
                f.write(f'# {attribute} = {group}; NME landmarks: {self.landmark_space}\n')
                f.write('# radius armse_mean nme_mean\n')
                for _, row in rows.sort_values('radius').iterrows():
                    f.write(f'{row.radius:.4f} {row.armse_mean:.10g} {row.nme_mean:.10g}\n')
            paths.append(path)
        return paths


def aggregate(entries, group_by=GROUP_ATTRIBUTES):
    '''Mean / median / population std / count per (attribute, group, radius), "all" included'''
    columns = ['attribute', 'group', 'radius'] + [f'{m}_{s}' for m in METRICS
                                                  for s in ('mean', 'median', 'std', 'count')]
    if not len(entries):
        return pd.DataFrame(columns=columns)
    overall = _summary(entries, ['radius'])
    overall.insert(0, 'group', 'all')
    overall.insert(0, 'attribute', 'all')
    tables = [overall]
    for attribute in group_by:
        if attribute not in entries:
            continue
        table = _summary(entries.dropna(subset=[attribute]), [attribute, 'radius'])
        table = table.rename(columns={attribute: 'group'})
        table.insert(0, 'attribute', attribute)
        table['group'] = table['group'].astype(str)
        tables.append(table)
    return pd.concat(tables, ignore_index=True)[columns]


def benchmark(samples, config=None):
    '''Run the protocol on every sample; failing samples are recorded, not raised'''
    config = config or EvalConfig()
    if not samples:
        raise ParameterError('samples', samples, 'Nothing to evaluate')
    rows, failures = [], []
    for sample in tqdm(samples, desc='evaluate'):
        try:
            sample_rows = evaluate_sample(sample, config)
        except MorphkitError as e:
            logger.warning(f'Sample {sample.sample_id} failed: {e}')
            failures.append({'sample': sample.sample_id, 'error': type(e).__name__, 'message': str(e)})
            continue
        for row in sample_rows:
            rows.append({'sample': sample.sample_id, **row, **sample.attributes})
    entries = pd.DataFrame(rows)
    if not len(entries):
        entries = pd.DataFrame(columns=['sample', 'radius', *METRICS])
    report = EvaluationReport(entries, failures, aggregate(entries, config.group_by), config)
    logger.info(f'Evaluated {len(samples) - len(failures)} of {len(samples)} samples')
    return report
