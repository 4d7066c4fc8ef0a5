'''
Command-line front end: synth -> fuse -> register -> build-model -> fit -> evaluate.

Every stage reads the outputs of the previous ones under --out, writes its own
directory and a run_manifest.json (parameters, versions, input / output sha256).
'''
import sys
import shlex
import logging
import argparse
import pathlib
import subprocess

import numpy as np
import scipy
from tqdm import tqdm

from .errors import ConfigError, MissingInputError, StageError
from .evaluation import EvalConfig, EvalSample, benchmark
from .fusion import IcpParams, carry_topology, fuse_views
from .landmarks import LandmarkSet
from .mesh import load_mesh, save_mesh, load_point_cloud, save_point_cloud
from .morphable import build_model, fit_dense, load_model, save_model, synthesize
from .projection import Camera, retrieve_3d_landmarks
from .registration import PartSegmentation, register, save_registration
from .settings import load_config, with_overrides
from .synthetic import ScanSimParams, generate_population, generate_template
from . import __version__, reference, utilities

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_STAGE, EXIT_MISSING, EXIT_CONFIG = 0, 1, 2, 3
STAGES = ('synth', 'fuse', 'register', 'build-model', 'fit', 'evaluate')
STAGE_DIRS = {'synth': 'synth', 'fuse': 'fuse', 'register': 'register', 'build-model': 'model',
              'fit': 'fit', 'evaluate': 'evaluate'}
STAGE_INPUTS = {'synth': (), 'fuse': ('synth',), 'register': ('synth', 'fuse'),
                'build-model': ('synth', 'register'), 'fit': ('synth', 'fuse', 'build-model'),
                'evaluate': ('synth', 'fit')}
STAGE_SECTIONS = {'synth': ('synth',), 'fuse': ('fusion', 'custom'), 'register': ('registration', 'custom'),
                  'build-model': ('model',), 'fit': ('fit', 'custom'), 'evaluate': ('evaluate',)}
RUN_MANIFEST = 'run_manifest.json'
MODEL_FILE = 'model.p3dm'


class Run:
    '''Resolved configuration plus the output root of one invocation'''

    def __init__(self, config, out):
        self.config = config
        self.out = pathlib.Path(out)

    def stage_dir(self, stage):
        return self.out / STAGE_DIRS[stage]

    @property
    def synth_dir(self):
        return self.stage_dir('synth')

    @property
    def format(self):
        return self.config.custom.format

    def manifest(self):
        path = self.synth_dir / 'manifest.json'
        if not path.is_file():
            raise MissingInputError(path)
        return utilities.read_json(path)

    def samples(self, split=None):
        '''(subject record, sample record) pairs of the population, optionally one split only'''
        for subject in self.manifest()['subjects']:
            if split is None or subject['split'] == split:
                for sample in subject['samples']:
                    yield subject, sample

    def sample_dir(self, stage, subject, sample):
        return self.stage_dir(stage) / 'subjects' / subject['id'] / sample['expression']

    def template(self):
        template_dir = self.synth_dir / 'template'
        mesh = load_mesh(template_dir / f'template.{self.format}')
        lms = LandmarkSet.load(template_dir / 'template_landmarks.json')
        parts = PartSegmentation.load(template_dir / 'parts.json')
        return mesh, lms, parts


def _require(path):
    path = pathlib.Path(path)
    if not path.exists():
        raise MissingInputError(path)
    return path


# ============= Stages =============

def run_synth(run):
    cfg = run.config.synth
    scan = ScanSimParams(noise=cfg.noise, dropout=cfg.dropout, seed=run.config.seed)
    generate_population(cfg.n_subjects, cfg.n_expressions, run.config.seed, run.synth_dir,
                        subdivision=cfg.subdivision, n_jawline=cfg.n_jawline, n_modes=cfg.n_modes,
                        scan_params=scan, format=run.format)
    template, template_lms, parts = generate_template(cfg.subdivision, cfg.n_jawline)
    template_dir = run.synth_dir / 'template'
    save_mesh(template, template_dir / f'template.{run.format}', run.format)
    template_lms.save(template_dir / 'template_landmarks.json')
    parts.save(template_dir / 'parts.json')


def _view_inputs(run, view_record):
    '''Cloud plus the 3D landmarks retrieved from its 2D annotation'''
    root = run.synth_dir
    cloud = load_point_cloud(_require(root / view_record['cloud_path']))
    camera = Camera.from_dict(utilities.read_json(_require(root / view_record['camera_path'])))
    lms2d = LandmarkSet.load(root / view_record['landmarks2d_path'])
    return cloud, retrieve_3d_landmarks(cloud, camera, lms2d)


def _remesh(command, fused, work_dir):
    '''Run `<command> <in.ply> <out.ply>` on the fused cloud and read the mesh back'''
    source = save_point_cloud(fused, work_dir / 'remesh_in.ply')
    target = work_dir / 'remesh_out.ply'
    try:
        subprocess.run(shlex.split(command) + [str(source), str(target)], check=True,
                       stdout=subprocess.DEVNULL)
    except (OSError, subprocess.CalledProcessError) as e:
        raise StageError('fuse', f'Remesh command failed: {e}')
    return load_mesh(_require(target))


def run_fuse(run):
    cfg = run.config.fusion
    params = IcpParams(max_iterations=cfg.icp_max_iterations, metric=cfg.icp_metric,
                       reject_distance=cfg.reject_distance, seed=run.config.seed)
    for subject, sample in tqdm(list(run.samples()), desc='fuse'):
        views = {v['view']: _view_inputs(run, v) for v in sample['views']}
        missing = [v for v in reference.VIEWS if v not in views]
        if missing:
            raise MissingInputError(f'{subject["id"]}/{sample["expression"]} views {missing}')
        fused, fused_lms, poses = fuse_views(views['left'], views['middle'], views['right'], params,
                                             merge_epsilon=cfg.merge_epsilon,
                                             allow_missing_view=cfg.allow_missing_view, local_k=cfg.local_k,
                                             min_neighbors=cfg.min_neighbors, return_poses=True)
        out = run.sample_dir('fuse', subject, sample)
        save_point_cloud(fused, out / 'fused.ply')
        if run.config.custom.remesh_command:
            scan = _remesh(run.config.custom.remesh_command, fused, out)
        else:
            source = load_mesh(_require(run.synth_dir / sample['mesh_path']))
            scan = carry_topology(fused, source.faces)
        save_mesh(scan, out / f'scan.{run.format}', run.format)
        fused_lms.save(out / 'landmarks.json')
        utilities.write_json(out / 'poses.json', {v: T.to_dict() for v, T in poses.items()})


def run_register(run):
    cfg = run.config.registration
    template, template_lms, parts = run.template()
    parts = parts.with_lambdas(cfg.lambda_overrides)
    for subject, sample in tqdm(list(run.samples()), desc='register'):
        fuse_dir = run.sample_dir('fuse', subject, sample)
        target = load_mesh(_require(fuse_dir / f'scan.{run.format}'))
        target_lms = LandmarkSet.load(fuse_dir / 'landmarks.json')
        result = register(template, target, template_lms, target_lms, parts,
                          stiffness_radius=cfg.stiffness_radius, schedule=tuple(cfg.schedule),
                          max_inner_iterations=cfg.max_inner_iterations)
        save_registration(result, run.sample_dir('register', subject, sample), 'registered', run.format)


def run_build_model(run):
    cfg = run.config.model
    template, template_lms, _ = run.template()
    neutral, expressions = {}, []
    for subject, sample in run.samples(split='train'):
        mesh = load_mesh(_require(run.sample_dir('register', subject, sample) / f'registered.{run.format}'))
        if sample['expression'] == 'neutral':
            neutral[subject['id']] = mesh
        else:
            expressions.append((subject['id'], mesh))
    model = build_model([neutral[s] for s in sorted(neutral)], expressions, neutral, template_lms,
                        cfg.shape_variance, cfg.shape_components, cfg.expression_variance,
                        cfg.expression_components, reference=template if cfg.align_to_template else None)
    save_model(model, run.stage_dir('build-model') / MODEL_FILE)


def run_fit(run):
    cfg = run.config.fit
    model = load_model(run.stage_dir('build-model') / MODEL_FILE)
    regularization = (cfg.shape_regularization, cfg.expression_regularization)
    for subject, sample in tqdm(list(run.samples(split='eval')), desc='fit'):
        fuse_dir = run.sample_dir('fuse', subject, sample)
        target = load_mesh(_require(fuse_dir / f'scan.{run.format}'))
        target_lms = LandmarkSet.load(fuse_dir / 'landmarks.json')
        coeffs, T = fit_dense(model, target, target_lms, regularization, cfg.icp_rounds)
        fitted = synthesize(model, coeffs)
        prediction = fitted.with_vertices(T.apply(fitted.vertices))
        out = run.sample_dir('fit', subject, sample)
        save_mesh(prediction, out / f'prediction.{run.format}', run.format)
        model.landmarks(prediction.vertices).save(out / 'prediction_landmarks.json')
        utilities.write_json(out / 'coefficients.json', {**coeffs.to_dict(), 'transform': T.to_dict()})


def run_evaluate(run):
    cfg = run.config.evaluate
    samples = []
    for subject, sample in run.samples(split='eval'):
        fit_dir = run.sample_dir('fit', subject, sample)
        samples.append(EvalSample(
            f'{subject["id"]}/{sample["expression"]}',
            load_mesh(_require(fit_dir / f'prediction.{run.format}')),
            LandmarkSet.load(fit_dir / 'prediction_landmarks.json'),
            load_mesh(_require(run.synth_dir / sample['mesh_path'])),
            LandmarkSet.load(run.synth_dir / sample['landmarks_path']),
            {**subject['attributes'], 'expression': sample['expression'],
             'expression_category': sample['expression_category']}))
    config = EvalConfig(tuple(cfg.radii), cfg.alignment, cfg.nme_mode, cfg.bbox_size)
    report = benchmark(samples, config)
    report.save(run.stage_dir('evaluate'))
    headline = report.headline()
    overall = headline[headline['attribute'] == 'all']
    for _, row in overall.iterrows():
        logger.info(f'r = {row.radius:.2f}: NME {row.nme_mean:.4f}, ARMSE {row.armse_mean:.4f}')


STAGE_RUNNERS = {'synth': run_synth, 'fuse': run_fuse, 'register': run_register,
                 'build-model': run_build_model, 'fit': run_fit, 'evaluate': run_evaluate}


# ============= Run manifests =============

def _digests(directory, root):
    directory = pathlib.Path(directory)
    files = sorted(p for p in directory.rglob('*') if p.is_file() and p.name != RUN_MANIFEST)
    return {utilities.relative_posix(p, root): utilities.file_digest(p) for p in files}


def write_run_manifest(run, stage):
    inputs = {}
    for upstream in STAGE_INPUTS[stage]:
        inputs.update(_digests(run.stage_dir(upstream), run.out))
    parameters = {'seed': run.config.seed}
    for section in STAGE_SECTIONS[stage]:
        parameters[section] = getattr(run.config, section).model_dump()
    manifest = {'stage': stage,
                'versions': {'morphkit': __version__, 'numpy': np.__version__, 'scipy': scipy.__version__},
                'parameters': parameters,
                'inputs': inputs,
                'outputs': _digests(run.stage_dir(stage), run.out)}
    return utilities.write_json(run.stage_dir(stage) / RUN_MANIFEST, manifest)


def run_stage(run, stage):
    '''Run one stage; failures other than missing input or bad configuration become a StageError'''
    for upstream in STAGE_INPUTS[stage]:
        _require(run.stage_dir(upstream) / RUN_MANIFEST)
    logger.info(f'Running stage {stage}')
    run.stage_dir(stage).mkdir(parents=True, exist_ok=True)
    try:
        STAGE_RUNNERS[stage](run)
    except (MissingInputError, ConfigError, StageError):
        raise
    except Exception as e:
        raise StageError(stage, f'Stage {stage} failed: {type(e).__name__}: {e}') from e
    return write_run_manifest(run, stage)


# ============= Command line =============

class _Parser(argparse.ArgumentParser):
    '''Usage errors exit with the configuration-error status'''

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f'{self.prog}: error: {message}\n')


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=pathlib.Path, help='pipeline configuration JSON')
    common.add_argument('--seed', type=int, help='overrides the configured seed')
    common.add_argument('--out', type=pathlib.Path, default=pathlib.Path('out'), help='output root (default: out)')
    common.add_argument('--radii', help='crop radii, e.g. 0.6,0.7,0.8')
    common.add_argument('--lambda-overrides', help='stiffness weights per part, e.g. nose=8,mouth=2')
    common.add_argument('--format', choices=('obj', 'ply'), help='mesh file format')

    parser = _Parser(prog='morphkit', description='Multi-view face scans to a morphable model and its benchmark')
    commands = parser.add_subparsers(dest='command', metavar='command', parser_class=_Parser)
    commands.required = True
    for stage in STAGES:
        commands.add_parser(stage, parents=[common], help=f'run the {stage} stage')
    commands.add_parser('pipeline', parents=[common], help='run every stage in order')
    return parser


def configure_logging(level):
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s', force=True)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = with_overrides(
            load_config(args.config), seed=args.seed,
            radii=utilities.parse_radii(args.radii) if args.radii else None,
            lambda_overrides=utilities.parse_lambda_overrides(args.lambda_overrides) if args.lambda_overrides else None,
            format=args.format)
        configure_logging(config.loglevel)
        utilities.n_workers()
        run = Run(config, args.out)
        for stage in (STAGES if args.command == 'pipeline' else (args.command,)):
            run_stage(run, stage)
    except MissingInputError as e:
        print(f'morphkit: {e}', file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as e:
        print(f'morphkit: {e}', file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f'morphkit: [{e.stage}] {e}', file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
