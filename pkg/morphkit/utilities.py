'''
Helpers shared by the pipeline stages: parallelism cap, digests, JSON output and flag parsing.
'''
import os
import re
import json
import hashlib
import pathlib

import numpy as np

from .errors import ConfigError

THREADS_ENV = 'MORPHKIT_THREADS'


def n_workers():
    '''Worker count handed to cKDTree queries; -1 means every core'''
    value = os.environ.get(THREADS_ENV)
    if value is None or value.strip() == '':
        return -1
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f'{THREADS_ENV} must be an integer, got {value!r}')
    if n < 1:
        raise ConfigError(f'{THREADS_ENV} must be >= 1, got {n}')
    return n


def file_digest(path):
    sha = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            sha.update(chunk)
    return sha.hexdigest()


def _to_builtin(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, pathlib.PurePath):
        return obj.as_posix()
    raise TypeError(f'Object of type {type(obj).__name__} is not JSON serializable')


def dumps_json(payload):
    # sorted keys + fixed separators: identical payloads give identical bytes
    return json.dumps(payload, sort_keys=True, indent=2, default=_to_builtin) + '\n'


def write_json(path, payload):
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(payload), encoding='utf-8')
    return path


def read_json(path):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def parse_radii(text):
    '''"0.6,0.7,0.8" -> (0.6, 0.7, 0.8)'''
    try:
        radii = tuple(float(r) for r in re.split(r',\s*', text.strip()) if r)
    except ValueError:
        raise ConfigError(f'Cannot parse crop radii: {text!r}')
    if not radii:
        raise ConfigError('Empty crop radius list')
    return radii


def parse_lambda_overrides(text):
    '''"nose=8,mouth=2.5" -> {"nose": 8.0, "mouth": 2.5}'''
    overrides = {}
    for item in re.split(r',\s*', text.strip()):
        if not item:
            continue
        m = re.fullmatch(r'\s*([A-Za-z_][\w\-]*)\s*=\s*([-+0-9.eE]+)\s*', item)
        if m is None:
            raise ConfigError(f'Cannot parse stiffness override: {item!r} (expected part=value)')
        try:
            overrides[m.group(1)] = float(m.group(2))
        except ValueError:
            raise ConfigError(f'Cannot parse stiffness override: {item!r}')
    return overrides


def relative_posix(path, root):
    return pathlib.Path(path).resolve().relative_to(pathlib.Path(root).resolve()).as_posix()
