import json

import pytest

from morphkit import cli, utilities


def write_config(tmp_path, payload):
    path = tmp_path / 'config.json'
    path.write_text(json.dumps(payload))
    return path


SMALL = {'synth': {'n_subjects': 3, 'n_expressions': 2, 'subdivision': 2}}


# ============= Exit codes =============

def test_missing_config_file(tmp_path):
    assert cli.main(['synth', '--config', str(tmp_path / 'absent.json'), '--out', str(tmp_path)]) == cli.EXIT_MISSING


def test_invalid_config_file(tmp_path):
    config = write_config(tmp_path, {'synth': {'n_subjects': 1}})
    assert cli.main(['synth', '--config', str(config), '--out', str(tmp_path)]) == cli.EXIT_CONFIG


@pytest.mark.parametrize('flags', [
    ['--radii', '0.8,0.6'],
    ['--radii', 'a,b'],
    ['--lambda-overrides', 'ear=2'],
    ['--lambda-overrides', 'nose'],
])
def test_bad_flags(tmp_path, flags):
    assert cli.main(['evaluate', '--out', str(tmp_path)] + flags) == cli.EXIT_CONFIG


def test_stage_before_its_inputs(tmp_path):
    assert cli.main(['fuse', '--out', str(tmp_path)]) == cli.EXIT_MISSING
    assert not (tmp_path / 'fuse' / cli.RUN_MANIFEST).exists()


def test_bad_thread_count(tmp_path, monkeypatch):
    monkeypatch.setenv(utilities.THREADS_ENV, '0')
    assert cli.main(['synth', '--out', str(tmp_path)]) == cli.EXIT_CONFIG


def test_unexpected_failure_exits_with_stage_status(tmp_path, monkeypatch, capsys):
    def broken(run):
        raise ValueError('boom')

    monkeypatch.setitem(cli.STAGE_RUNNERS, 'synth', broken)
    assert cli.main(['synth', '--out', str(tmp_path)]) == cli.EXIT_STAGE
    err = capsys.readouterr().err
    assert '[synth]' in err and 'ValueError: boom' in err
    assert not (tmp_path / 'synth' / cli.RUN_MANIFEST).exists()


def test_usage_errors_exit_with_config_status():
    with pytest.raises(SystemExit) as e:
        cli.main(['sculpt'])
    assert e.value.code == cli.EXIT_CONFIG
    with pytest.raises(SystemExit) as e:
        cli.main(['synth', '--format', 'stl'])
    assert e.value.code == cli.EXIT_CONFIG


# ============= Runs =============

def test_synth_is_reproducible(tmp_path):
    config = str(write_config(tmp_path, SMALL))
    for name in ('a', 'b'):
        assert cli.main(['synth', '--config', config, '--seed', '3', '--out', str(tmp_path / name)]) == cli.EXIT_OK
    first = utilities.read_json(tmp_path / 'a' / 'synth' / cli.RUN_MANIFEST)
    second = utilities.read_json(tmp_path / 'b' / 'synth' / cli.RUN_MANIFEST)
    assert first['stage'] == 'synth'
    assert first['parameters']['seed'] == 3
    assert first['outputs'] == second['outputs']
    assert 'synth/manifest.json' in first['outputs']
    assert 'synth/template/parts.json' in first['outputs']


@pytest.mark.slow
def test_full_pipeline(tmp_path):
    config = write_config(tmp_path, {'synth': {'n_subjects': 3, 'n_expressions': 2, 'subdivision': 3},
                                     'fit': {'icp_rounds': 2}})
    out = tmp_path / 'out'
    assert cli.main(['pipeline', '--config', str(config), '--out', str(out), '--radii', '0.8,1.0']) == cli.EXIT_OK
    for stage in cli.STAGES:
        manifest = utilities.read_json(out / cli.STAGE_DIRS[stage] / cli.RUN_MANIFEST)
        assert manifest['stage'] == stage
        assert manifest['outputs']
    fit = utilities.read_json(out / 'fit' / cli.RUN_MANIFEST)
    assert set(fit['inputs']) >= set(utilities.read_json(out / 'model' / cli.RUN_MANIFEST)['outputs'])
    report = utilities.read_json(out / 'evaluate' / 'report.json')
    assert report['n_samples'] + len(report['failures']) == 2
    assert (out / 'model' / cli.MODEL_FILE).is_file()
