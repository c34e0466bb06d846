#!/usr/bin/env python3
"""
Tests for the cavinet command-line entry point
"""
import hashlib
import os
import sys
import logging
from unittest import mock

import numpy as np
import pytest
import simplejson as json

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import cavinet
from conftest import REPO_ROOT, small_run_config
from dataset import save_image

logger = logging.getLogger(__name__)


@pytest.fixture(autouse=True)
def restore_root_logging():
    """main() replaces the root handlers; put the test session's back afterwards"""
    root_logger = logging.getLogger()
    handlers, level = list(root_logger.handlers), root_logger.level
    yield
    for handler in list(root_logger.handlers):
        if handler not in handlers:
            root_logger.removeHandler(handler)
            getattr(handler, 'handler', handler).close()
    for handler in handlers:
        if handler not in root_logger.handlers:
            root_logger.addHandler(handler)
    root_logger.setLevel(level)


def write_config(tmp_path, root):
    config = small_run_config(root, tmp_path / 'runs')
    path = tmp_path / 'run.json'
    path.write_text(json.dumps(config))
    return str(path), config['output_dir']


def tree_hash(root):
    digest = hashlib.sha256()
    for folder, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            with open(os.path.join(folder, name), 'rb') as f:
                digest.update(name.encode() + f.read())
    return digest.hexdigest()


def read_log(output_dir, command):
    with open(os.path.join(output_dir, command, 'cavinet.log')) as f:
        return f.read()


def test_gen_refuses_to_overwrite_without_force(tmp_path):
    root = tmp_path / 'data'
    config_path, output_dir = write_config(tmp_path, root)
    assert cavinet.main(['gen', '--config', config_path]) == 0
    assert os.path.exists(root / 'manifest.csv')
    assert os.path.exists(os.path.join(output_dir, 'gen', 'effective_config.json'))

    assert cavinet.main(['gen', '--config', config_path]) == 1
    assert '--force' in read_log(output_dir, 'gen')
    assert cavinet.main(['gen', '--config', config_path, '--force']) == 0


def test_gen_is_reproducible_for_a_seed(tmp_path):
    root = tmp_path / 'data'
    config_path, _ = write_config(tmp_path, root)
    assert cavinet.main(['gen', '--config', config_path, '--seed', '7']) == 0
    first = tree_hash(root)
    assert cavinet.main(['gen', '--config', config_path, '--seed', '7', '--force']) == 0
    assert tree_hash(root) == first


def test_seed_selects_the_synthetic_dataset_for_every_command(tmp_path):
    root = tmp_path / 'data'
    config_path, output_dir = write_config(tmp_path, root)
    assert cavinet.main(['gen', '--config', config_path, '--seed', '7']) == 0
    assert cavinet.main(['train', '--config', config_path, '--seed', '7', '--epochs', '0']) == 0
    with open(os.path.join(output_dir, 'train', 'effective_config.json')) as f:
        assert json.load(f)['dataset']['synth']['seed'] == 7

    assert cavinet.main(['train', '--config', config_path, '--epochs', '0']) == 1
    assert 'gen --force' in read_log(output_dir, 'train')


@pytest.fixture
def trained(tmp_path, small_dataset_root):
    """Config path, output dir and final checkpoint of a zero-epoch training run"""
    config_path, output_dir = write_config(tmp_path, small_dataset_root)
    assert cavinet.main(['train', '--config', config_path, '--epochs', '0']) == 0
    final = os.path.join(output_dir, 'train', 'checkpoints', 'final.npz')
    assert os.path.exists(final)
    return config_path, output_dir, final


def test_eval_with_missing_checkpoint_names_the_path(trained):
    config_path, output_dir, _ = trained
    missing = os.path.join(output_dir, 'nowhere.npz')
    assert cavinet.main(['eval', '--config', config_path, '--checkpoint', missing]) == 1
    assert missing in read_log(output_dir, 'eval')


def test_eval_defaults_to_best_checkpoint(trained):
    config_path, output_dir, _ = trained
    # zero epochs never write best.npz
    assert cavinet.main(['eval', '--config', config_path]) == 1
    assert 'best.npz' in read_log(output_dir, 'eval')


def test_eval_unseen_reports_verification_only(trained):
    config_path, output_dir, final = trained
    assert cavinet.main(['eval', '--config', config_path, '--checkpoint', final, '--unseen']) == 0
    with open(os.path.join(output_dir, 'eval', 'eval_report.json')) as f:
        report = json.load(f)
    assert report['protocol'] == 'unseen_only'
    for key in ('rank1_cari', 'rank1_visual', 'verification_acc_seen', 'confusion_seen'):
        assert key not in report
    assert set(report['reference']['verification']) == {'unseen'}
    assert 0.0 <= report['verification_acc_unseen'] <= 1.0
    assert report['metadata']['checkpoint'] == final


def test_eval_seen_exports_confusions(trained):
    config_path, output_dir, final = trained
    assert cavinet.main(['eval', '--config', config_path, '--checkpoint', final]) == 0
    for cell in ('tp', 'tn', 'fp', 'fn'):
        assert os.path.isdir(os.path.join(output_dir, 'eval', 'confusions', cell))


def test_viz_saliency_writes_map_and_overlay(trained, tmp_path):
    config_path, output_dir, final = trained
    image = save_image(np.random.default_rng(0).uniform(size=(3, 20, 20)), str(tmp_path / 'face.png'))
    assert cavinet.main(['viz', 'saliency', '--config', config_path, '--checkpoint', final,
                         '--image', image, '--modality', 'visual']) == 0
    for name in ('saliency_visual_face_map.png', 'saliency_visual_face_overlay.png'):
        assert os.path.exists(os.path.join(output_dir, 'viz', name))


def test_viz_saliency_needs_an_image(trained):
    config_path, _, final = trained
    assert cavinet.main(['viz', 'saliency', '--config', config_path, '--checkpoint', final]) == 1


def test_viz_actmax_writes_image_and_trace(trained):
    config_path, output_dir, final = trained
    assert cavinet.main(['viz', 'actmax', '--config', config_path, '--checkpoint', final,
                         '--network', 'visual_id', '--neuron', '1', '--steps', '3']) == 0
    with open(os.path.join(output_dir, 'viz', 'actmax_visual_id_1_trace.json')) as f:
        assert len(json.load(f)['activations']) == 4
    assert os.path.exists(os.path.join(output_dir, 'viz', 'actmax_visual_id_1.png'))


def test_lint_passes_on_repository(tmp_path, capsys):
    config_path, _ = write_config(tmp_path, tmp_path / 'data')
    assert cavinet.main(['lint', '--config', config_path, '--root', REPO_ROOT]) == 0
    assert json.loads(capsys.readouterr().out)['pass'] is True


def test_ablate_matrix_writes_observations(tmp_path):
    config_path, output_dir = write_config(tmp_path, tmp_path / 'data')
    flags = {'untied_ge_tied_verification': True, 'ortho_ge_without_ortho_verification': None}
    with mock.patch('cavinet.run_matrix', return_value=(None, None, flags)) as run_matrix:
        assert cavinet.main(['ablate', '--config', config_path, '--matrix', 'reference', '--seeds', '0', '1']) == 0
    assert run_matrix.call_args[0][2] == [0, 1]
    with open(os.path.join(output_dir, 'ablate', 'observations.json')) as f:
        assert json.load(f) == flags


def test_ablate_accepts_paper_as_the_reference_matrix(tmp_path):
    config_path, output_dir = write_config(tmp_path, tmp_path / 'data')
    with mock.patch('cavinet.run_matrix', return_value=(None, None, {})) as run_matrix:
        assert cavinet.main(['ablate', '--config', config_path, '--matrix', 'paper', '--seeds', '0']) == 0
    names = [variant.name for variant in run_matrix.call_args[0][1]]
    assert names == [variant.name for variant in cavinet.reference_matrix()]


def test_unknown_preset_fails_before_running(tmp_path):
    config_path, output_dir = write_config(tmp_path, tmp_path / 'data')
    assert cavinet.main(['gen', '--config', config_path, '--preset', 'enormous']) == 1
    assert not os.path.exists(os.path.join(output_dir, 'gen'))
