#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

import json
import os

import numpy as np
import pytest

from scene3d_llm_tool import datagen, tensorfile
from scene3d_llm_tool.main import EXIT_CLIENT, EXIT_IO, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, main


SMALL_RENDER = 'render:\n  width: 32\n  height: 32\n  n_views: 3\n'

CHAIR_TOKENS = '<loc_32><loc_112><loc_96><loc_96><loc_144><loc_160>'


@pytest.fixture
def run(tmp_path, capsys):
    """Runs the CLI and returns (exit code, parsed stdout or None, last stderr line)."""
    log_file = str(tmp_path / 'run.log')

    def go(*argv):
        capsys.readouterr()
        code = main(['--log-file', log_file] + [str(a) for a in argv])
        out, err = capsys.readouterr()
        try:
            parsed = json.loads(out) if out.strip() else None
        except ValueError:
            parsed = out
        lines = [line for line in err.splitlines() if line.strip()]
        return code, parsed, lines[-1] if lines else ''
    return go


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / 'small.yaml'
    path.write_text(SMALL_RENDER)
    return str(path)


def test_scene_is_deterministic(tmp_path, run):
    a, b = tmp_path / 'a.json', tmp_path / 'b.json'
    code, out, _ = run('scene', '--seed', 4, '--out', a)
    assert code == EXIT_OK
    assert out['objects'] == 3
    run('scene', '--seed', 4, '--out', b)
    assert a.read_bytes() == b.read_bytes()
    code, out, _ = run('scene', '--seed', 4, '--n-objects', 5, '--out', b)
    assert out['objects'] == 5


def test_render_then_extract_direct(tmp_path, run, small_config):
    scene = tmp_path / 'scene.json'
    views_dir = tmp_path / 'views'
    run('scene', '--seed', 1, '--out', scene)
    code, out, _ = run('render', '--config', small_config, '--scene', scene, '--out-dir', views_dir)
    assert code == EXIT_OK
    assert out['views'] == 3
    assert 'cameras.json' in out['files']
    assert 'view_002_features.f3dt' in out['files']

    cloud = tmp_path / 'cloud.f3dt'
    code, out, _ = run('extract', '--method', 'direct', '--views-dir', views_dir, '--out', cloud)
    assert code == EXIT_OK
    assert out['N'] == out['hit_pixels'] > 0
    assert out['D_v'] == 32

    augmented = tmp_path / 'augmented.f3dt'
    code, out, _ = run('embed', '--points', cloud, '--out', augmented)
    assert code == EXIT_OK
    assert tensorfile.read_tensor(str(augmented)).shape == (out['N'], 32)


def test_extract_fuse(tmp_path, run, small_config):
    scene = tmp_path / 'scene.json'
    views_dir = tmp_path / 'views'
    run('scene', '--seed', 2, '--out', scene)
    run('render', '--config', small_config, '--scene', scene, '--out-dir', views_dir)
    code, out, _ = run('extract', '--method', 'fuse', '--views-dir', views_dir, '--out', tmp_path / 'map.f3dt')
    assert code == EXIT_OK
    assert out['kind'] == 'fused_map'
    assert out['N'] > 0
    assert out['dropped'] >= 0
    assert out['integrated'] > 0


def test_extract_unknown_method(tmp_path, run, small_config):
    scene = tmp_path / 'scene.json'
    views_dir = tmp_path / 'views'
    run('scene', '--out', scene)
    run('render', '--config', small_config, '--scene', scene, '--out-dir', views_dir)
    code, _, err = run('extract', '--method', 'magic', '--views-dir', views_dir, '--out', tmp_path / 'x.f3dt')
    assert code == EXIT_USAGE
    assert json.loads(err)['exit_code'] == EXIT_USAGE


def test_tokenize(run):
    code, out, _ = run('tokenize', '--box', '[0, 0, 0, 1, 1, 1]')
    assert code == EXIT_OK
    assert out == '<loc_128><loc_128><loc_128><loc_192><loc_192><loc_192>\n'

    code, out, _ = run('tokenize', '--box', '[-2, -2, -2, 2, 2, 2]')
    assert out == '<loc_0><loc_0><loc_0><loc_255><loc_255><loc_255>\n'

    code, out, _ = run('tokenize', '--decode', '<loc_128><loc_128><loc_128><loc_192><loc_192><loc_192>')
    assert code == EXIT_OK
    assert np.allclose(out['box'], [0.0078125] * 3 + [1.0078125] * 3)
    assert out['ids'] == [32128] * 3 + [32192] * 3

    code, out, _ = run('tokenize', '--bounds', '[0, 0, 0, 8, 8, 8]', '--box', '[1, 1, 1, 2, 2, 2]')
    assert out == '<loc_32><loc_32><loc_32><loc_64><loc_64><loc_64>\n'


def test_tokenize_errors(run):
    code, _, err = run('tokenize', '--box', '[5, 5, 5, 6, 6, 6]')
    assert code == EXIT_VALIDATION
    assert json.loads(err)['error'] == 'LocationOutOfBoundsError'

    code, _, err = run('tokenize', '--decode', '<loc_1><loc_2>')
    assert code == EXIT_VALIDATION

    code, _, _ = run('tokenize')
    assert code == EXIT_USAGE


def _make_scenes(run, scenes_dir, count):
    os.makedirs(str(scenes_dir), exist_ok=True)
    total = 0
    for seed in range(count):
        _, out, _ = run('scene', '--seed', seed, '--out', scenes_dir / ('scene_%03d.json' % seed))
        total += out['objects']
    return total


def test_datagen_mock_is_deterministic(tmp_path, run, monkeypatch):
    monkeypatch.delenv('LLM_ENDPOINT', raising=False)
    scenes_dir = tmp_path / 'scenes'
    total_objects = _make_scenes(run, scenes_dir, 5)

    first, second = tmp_path / 'first.jsonl', tmp_path / 'second.jsonl'
    code, out, _ = run('datagen', '--scenes-dir', scenes_dir, '--task', 'qa', '--out', first)
    assert code == EXIT_OK
    assert out['scenes'] == 5
    assert out['records_emitted'] == total_objects
    run('datagen', '--scenes-dir', scenes_dir, '--task', 'qa', '--out', second)
    assert first.read_bytes() == second.read_bytes()

    records = datagen.read_jsonl(str(first))
    assert len(records) == total_objects
    assert {r.scene_id for r in records} == {'scene_%03d' % i for i in range(5)}
    assert os.path.isfile(str(tmp_path / 'first.report.json'))


def test_datagen_grounding_carries_tokens(tmp_path, run, monkeypatch):
    monkeypatch.delenv('LLM_ENDPOINT', raising=False)
    scenes_dir = tmp_path / 'scenes'
    _make_scenes(run, scenes_dir, 2)
    out_path = tmp_path / 'grounding.jsonl'
    code, _, _ = run('datagen', '--scenes-dir', scenes_dir, '--task', 'grounding', '--out', out_path)
    assert code == EXIT_OK
    records = datagen.read_jsonl(str(out_path))
    assert len(records) == 2
    for record in records:
        assert record.boxes
        assert '<loc_' in record.response


def test_datagen_endpoint_without_key(tmp_path, run, monkeypatch):
    monkeypatch.setenv('LLM_ENDPOINT', 'http://localhost:9/v1/chat/completions')
    monkeypatch.delenv('LLM_API_KEY', raising=False)
    scenes_dir = tmp_path / 'scenes'
    _make_scenes(run, scenes_dir, 1)
    code, _, err = run('datagen', '--scenes-dir', scenes_dir, '--out', tmp_path / 'x.jsonl')
    assert code == EXIT_CLIENT
    assert json.loads(err)['error'] == 'ClientConfigurationError'


def test_datagen_revise_needs_input(tmp_path, run, monkeypatch):
    monkeypatch.delenv('LLM_ENDPOINT', raising=False)
    code, _, _ = run('datagen', '--pipeline', 'revise', '--out', tmp_path / 'x.jsonl')
    assert code == EXIT_USAGE


def test_split(tmp_path, run):
    source = tmp_path / 'all.jsonl'
    records = [datagen.LanguageRecord(scene_id='s%04d' % i, task='caption', prompt='Describe the room.',
                                      response='Room %d.' % i) for i in range(1000)]
    datagen.write_jsonl(str(source), records)
    code, out, _ = run('split', '--input', source, '--out-dir', tmp_path / 'split')
    assert code == EXIT_OK
    assert out['sizes'] == dict(train=800, val=100, test=100)
    ids = set()
    for name in ('train', 'val', 'test'):
        part = datagen.read_jsonl(out['files'][name])
        ids |= {r.scene_id for r in part}
    assert len(ids) == 1000


def test_split_too_small(tmp_path, run):
    source = tmp_path / 'few.jsonl'
    datagen.write_jsonl(str(source), [datagen.LanguageRecord('s', 'caption', 'p', 'r')] * 3)
    code, _, err = run('split', '--input', source)
    assert code == EXIT_VALIDATION
    assert json.loads(err)['error'] == 'SplitSizeError'


def _write_items(path, items):
    with open(str(path), 'w', encoding='utf-8') as f:
        for item in items:
            f.write(json.dumps(item) + '\n')


def test_eval_identity_text(tmp_path, run):
    sentences = ['the red chair stands next to the table',
                 'a small lamp glows in the corner',
                 'two sofas face each other by the window']
    path = tmp_path / 'pred.jsonl'
    _write_items(path, [dict(id=str(i), candidate=s, references=[s]) for i, s in enumerate(sentences)])
    code, out, _ = run('eval', '--predictions', path)
    assert code == EXIT_OK
    for key in ('bleu1', 'bleu4', 'rouge_l', 'em'):
        assert out[key] == pytest.approx(1.0)
    assert out['cider'] > 0
    assert not out['cider_scaled']
    assert len(out['per_item']) == 3


def test_eval_grounding(tmp_path, run):
    path = tmp_path / 'grounding.jsonl'
    reference = 'The chair is at %s.' % CHAIR_TOKENS
    _write_items(path, [dict(id='a', candidate=CHAIR_TOKENS, references=[reference]),
                        dict(id='b', candidate=reference, references=[reference])])
    code, out, _ = run('eval', '--predictions', path, '--task', 'grounding')
    assert code == EXIT_OK
    assert out['acc@0.25'] == 1.0
    assert out['avg_iou'] == pytest.approx(1.0)
    assert out['avg_dist'] == pytest.approx(0.0)


def test_nav_bundled_maze(run):
    code, out, _ = run('nav')
    assert code == EXIT_OK
    assert out['success']
    assert out['steps'] == 18
    assert out['stop_reason'] == 'policy_stop'
    assert 'turns' not in out

    code, out, _ = run('nav', '--policy', 'stop', '--transcript')
    assert not out['success']
    assert out['steps'] == 0
    assert out['turns'][0]['reply'] == 'stop'

    code, _, _ = run('nav', '--policy', 'teleport')
    assert code == EXIT_USAGE


def test_nav_random_maze(run):
    code, out, _ = run('nav', '--random-dims', 8, 8, 1, '--seed', 5)
    assert code == EXIT_OK
    assert out['success']


def test_dump(tmp_path, run):
    path = tmp_path / 'small.f3dt'
    tensorfile.write_tensor(str(path), np.arange(6, dtype=np.float32).reshape(2, 3))
    code, out, _ = run('dump', path, '--max-values', 4)
    assert code == EXIT_OK
    lines = out.splitlines()
    assert lines[0].endswith('rank 2 dims [2, 3]')
    assert lines[1] == '0 1 2 3'
    assert lines[2] == '... (2 more)'


def test_missing_file_is_io_error(tmp_path, run):
    code, _, err = run('dump', tmp_path / 'absent.f3dt')
    assert code == EXIT_IO
    assert json.loads(err)['exit_code'] == EXIT_IO


def test_usage_errors(run):
    code, _, err = run()
    assert code == EXIT_USAGE
    assert json.loads(err)['error'] == 'UsageError'
    code, _, _ = run('scene')
    assert code == EXIT_USAGE
    code, _, _ = run('frobnicate')
    assert code == EXIT_USAGE


def test_extract_field_writes_loss_trace(tmp_path, run):
    config = tmp_path / 'field.yaml'
    config.write_text(SMALL_RENDER + 'fusion:\n  grid_resolution: 6\n'
                      'ray_sample:\n  n_samples: 16\n'
                      'train:\n  learning_rate: 0.05\n  warmup_steps: 5\n  steps: 30\n  batch_rays: 64\n'
                      '  eval_rays: 256\n  log_every: 10\n')
    scene = tmp_path / 'scene.json'
    views_dir = tmp_path / 'views'
    run('scene', '--seed', 3, '--out', scene)
    run('render', '--config', config, '--scene', scene, '--out-dir', views_dir)
    code, out, _ = run('extract', '--method', 'field', '--config', config, '--views-dir', views_dir,
                       '--out', tmp_path / 'field.f3dt')
    assert code == EXIT_OK
    assert out['steps'] == 30
    with open(out['loss_trace']) as f:
        rows = f.read().splitlines()
    assert rows[0] == 'step,loss'
    assert [int(r.split(',')[0]) for r in rows[1:]] == list(range(30))


def test_end_to_end_pipeline(tmp_path, run, small_config, monkeypatch):
    monkeypatch.delenv('LLM_ENDPOINT', raising=False)
    scenes_dir = tmp_path / 'scenes'
    _make_scenes(run, scenes_dir, 5)
    views_dir = tmp_path / 'views'
    assert run('render', '--config', small_config, '--scene', scenes_dir / 'scene_000.json',
               '--out-dir', views_dir)[0] == EXIT_OK
    assert run('extract', '--method', 'direct', '--views-dir', views_dir, '--out', tmp_path / 'cloud.f3dt')[0] == 0
    assert run('embed', '--points', tmp_path / 'cloud.f3dt', '--out', tmp_path / 'cloud_pe.f3dt')[0] == 0
    assert run('tokenize', '--box', '[0, 0, 0, 1, 1, 1]')[0] == EXIT_OK

    data = tmp_path / 'qa.jsonl'
    assert run('datagen', '--scenes-dir', scenes_dir, '--task', 'qa', '--out', data)[0] == EXIT_OK
    code, out, _ = run('split', '--input', data, '--seed', 1)
    assert code == EXIT_OK

    predictions = tmp_path / 'predictions.jsonl'
    test_records = datagen.read_jsonl(out['files']['test'])
    assert test_records
    _write_items(predictions, [dict(id=str(i), candidate=r.response, references=[r.response])
                               for i, r in enumerate(test_records)])
    code, report, _ = run('eval', '--predictions', predictions)
    assert code == EXIT_OK
    for key in ('bleu1', 'bleu2', 'bleu3', 'bleu4', 'rouge_l', 'em'):
        assert report[key] == pytest.approx(1.0)


def _direct_cloud(tmp_path, run, config):
    scene = tmp_path / 'scene.json'
    views_dir = tmp_path / 'views'
    cloud = tmp_path / 'cloud.f3dt'
    run('scene', '--seed', 1, '--out', scene)
    run('render', '--config', config, '--scene', scene, '--out-dir', views_dir)
    run('extract', '--method', 'direct', '--views-dir', views_dir, '--out', cloud)
    return cloud


def test_embed_resamples_to_latents(tmp_path, run):
    from scene3d_llm_tool.resampler import ResamplerParams
    config = tmp_path / 'resample.yaml'
    config.write_text(SMALL_RENDER + 'resampler:\n  n_latents: 4\n  d_model: 16\n  n_layers: 1\n  seed: 3\n')
    cloud = _direct_cloud(tmp_path, run, config)

    first, second = tmp_path / 'first.f3dt', tmp_path / 'second.f3dt'
    code, out, _ = run('embed', '--config', config, '--points', cloud, '--out', tmp_path / 'pe.f3dt',
                       '--latents', first)
    assert code == EXIT_OK
    assert (out['K'], out['D_model']) == (4, 16)
    latents = tensorfile.read_tensor(str(first))
    assert latents.shape == (4, 16)
    assert np.all(np.isfinite(latents))
    assert tensorfile.read_sidecar(tensorfile.sidecar_path(str(first)))['kind'] == 'resampled_latents'

    run('embed', '--config', config, '--points', cloud, '--out', tmp_path / 'pe.f3dt', '--latents', second)
    assert first.read_bytes() == second.read_bytes()

    params = tmp_path / 'params.f3dt'
    ResamplerParams.init(16, 4, 1, d_input=32, seed=3).save(str(params))
    third = tmp_path / 'third.f3dt'
    code, _, _ = run('embed', '--points', cloud, '--out', tmp_path / 'pe.f3dt', '--latents', third,
                     '--params', params)
    assert code == EXIT_OK
    assert np.allclose(tensorfile.read_tensor(str(third)), latents, atol=1e-4)


def test_embed_resampler_errors(tmp_path, run, small_config):
    from scene3d_llm_tool.resampler import ResamplerParams
    cloud = _direct_cloud(tmp_path, run, small_config)
    params = tmp_path / 'params.f3dt'
    ResamplerParams.init(16, 4, 1, d_input=8, seed=0).save(str(params))

    code, _, _ = run('embed', '--points', cloud, '--out', tmp_path / 'pe.f3dt', '--params', params)
    assert code == EXIT_USAGE

    code, _, err = run('embed', '--points', cloud, '--out', tmp_path / 'pe.f3dt', '--latents',
                       tmp_path / 'z.f3dt', '--params', params)
    assert code == EXIT_VALIDATION
    assert json.loads(err)['error'] == 'InvalidInputError'


@pytest.mark.parametrize('argv', [
    ('tokenize', '--box', '[5, 5, 5, 6, 6, 6]'),
    ('dump', 'absent.f3dt'),
    ('nav', '--policy', 'teleport'),
    (),
])
def test_stderr_on_failure_is_one_json_line(tmp_path, capsys, argv):
    capsys.readouterr()
    code = main(['--log-file', str(tmp_path / 'run.log')] + list(argv))
    out, err = capsys.readouterr()
    assert code != EXIT_OK
    assert out == ''
    lines = err.splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])['exit_code'] == code


def test_log_goes_to_file(tmp_path, capsys):
    log_file = tmp_path / 'run.log'
    capsys.readouterr()
    assert main(['--log-file', str(log_file), 'scene', '--seed', '2', '--out', str(tmp_path / 's.json')]) == EXIT_OK
    assert capsys.readouterr().err == ''
    assert "Running 'scene'" in log_file.read_text()
