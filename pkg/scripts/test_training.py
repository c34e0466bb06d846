#!/usr/bin/env python3
"""
Tests for the SGD trainer and run log
"""
import os
import sys
import logging

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from checkpoint import load_checkpoint
from config import ConfigError
from conftest import random_batch, random_pairs, tiny_model
from run_log import RunLog
from training import SGD, NonFiniteLossError, Trainer, build_model, load_dataset, sgd_step

logger = logging.getLogger(__name__)


def step_config(eta=0.01, decay=0.0, seed=0):
    return {'seed': seed, 'train': {'eta': eta, 'decay': decay}}


def test_learning_rate_follows_inverse_time_decay():
    sgd = SGD(1e-3, 1e-6)
    assert sgd.learning_rate(0) == 1e-3
    assert sgd.learning_rate(1000) == pytest.approx(1e-3 / (1 + 1e-3))


def test_sgd_skips_frozen_parameters_and_zero_rate():
    params = {'a': np.ones(2), 'b': np.ones(2)}
    grads = {'a': np.full(2, 2.0), 'b': np.full(2, 2.0)}
    SGD(0.5).step(params, grads, t=0, frozen={'b'})
    assert np.array_equal(params['a'], np.zeros(2))
    assert np.array_equal(params['b'], np.ones(2))
    SGD(0.0).step(params, grads, t=0)
    assert np.array_equal(params['a'], np.zeros(2))


def test_sgd_matches_hand_computed_descent_on_a_quadratic():
    # f(w) = 0.5 * (w - 1)^2 from w = 3 with eta 0.5 and decay 1: rates 1/2, 1/4, 1/6, 1/8, 1/10
    sgd = SGD(0.5, 1.0)
    params = {'w': np.array([3.0])}
    expected = [2.0, 1.75, 1.625, 1.546875, 1.4921875]
    for t, value in enumerate(expected):
        sgd.step(params, {'w': params['w'] - 1.0}, t)
        assert params['w'][0] == pytest.approx(value, abs=1e-12)


def test_negative_rate_is_rejected():
    with pytest.raises(ValueError):
        SGD(-1.0)


def test_repeated_steps_reduce_loss_on_a_fixed_batch():
    model = tiny_model(dropout_p=0.0)
    trainer = Trainer(model, step_config(eta=0.01))
    batch = random_batch(n_pairs=6, seed=3)
    losses = [trainer.sgd_step(batch).total for _ in range(40)]
    assert losses[-1] < losses[0]
    assert trainer.step_index == 40


def test_frozen_parameters_do_not_move():
    model = tiny_model(freeze_depth=1)
    before = model.get_state()
    sgd_step(model, random_pairs(), step_config(eta=0.1), step_index=0)
    after = model.parameter_dict()
    for name in model.frozen_names():
        assert np.array_equal(before[name], after[name])
    assert not np.array_equal(before['projection.S'], after['projection.S'])


def test_tied_branches_stay_identical_after_updates():
    model = tiny_model(tied_weights=True)
    trainer = Trainer(model, step_config(eta=0.1))
    for _ in range(3):
        trainer.sgd_step(random_batch(seed=trainer.step_index))
    assert model.branches_identical()


def test_zero_lambda_keeps_penalty_zero_through_training():
    model = tiny_model(**{'lambda': 0.0})
    trainer = Trainer(model, step_config(eta=0.05))
    for _ in range(3):
        assert trainer.sgd_step(random_batch()).l_ortho == 0.0


def test_non_finite_parameter_aborts_with_tensor_name():
    model = tiny_model()
    model.block.S[0, 0] = np.nan
    with pytest.raises(NonFiniteLossError) as excinfo:
        sgd_step(model, random_pairs(), step_config(), step_index=7)
    assert excinfo.value.tensor == 'projection.S'
    assert excinfo.value.step == 7


def test_empty_batch_is_rejected():
    with pytest.raises(ValueError):
        sgd_step(tiny_model(), [], step_config(), step_index=0)


def test_training_is_deterministic(run_config, small_data):
    _, split, store = small_data
    _, log_a = Trainer(build_model(run_config, split.n_seen), run_config).train(split, store)
    _, log_b = Trainer(build_model(run_config, split.n_seen), run_config).train(split, store)
    assert log_a.losses() == log_b.losses()
    assert [r['val_verification'] for r in log_a.records] == [r['val_verification'] for r in log_b.records]


def test_training_writes_checkpoints_and_run_log(run_config, small_data, tmp_path):
    _, split, store = small_data
    out_dir = str(tmp_path / 'train')
    model, run_log = Trainer(build_model(run_config, split.n_seen), run_config, out_dir).train(split, store)

    assert len(run_log.records) == run_config['train']['epochs']
    for name in ('run_log.jsonl', 'run_summary.json', os.path.join('checkpoints', 'best.npz'),
                 os.path.join('checkpoints', 'final.npz')):
        assert os.path.exists(os.path.join(out_dir, name)), name
    assert RunLog.load(os.path.join(out_dir, 'run_log.jsonl')) == run_log.records

    final, metadata = load_checkpoint(os.path.join(out_dir, 'checkpoints', 'final.npz'))
    assert metadata['steps'] == run_log.summary['steps']
    for (_, a), (_, b) in zip(model.named_parameters(), final.named_parameters()):
        assert np.array_equal(a, b)
    for record in run_log.records:
        assert record['learning_rate'] > 0
        assert 0.0 <= record['val_verification'] <= 1.0


def test_zero_epochs_still_writes_final_checkpoint(run_config, small_data, tmp_path):
    _, split, store = small_data
    out_dir = str(tmp_path / 'train')
    _, run_log = Trainer(build_model(run_config, split.n_seen), run_config, out_dir).train(split, store, epochs=0)
    assert run_log.records == []
    assert os.path.exists(os.path.join(out_dir, 'checkpoints', 'final.npz'))
    assert not os.path.exists(os.path.join(out_dir, 'checkpoints', 'best.npz'))


def test_run_log_rejects_out_of_order_epochs_and_bad_accuracy():
    run_log = RunLog()
    run_log.record_epoch(1, {'total': 1.0}, 1e-3, 0.1, val_verification=0.5)
    with pytest.raises(ValueError):
        run_log.record_epoch(1, {'total': 1.0}, 1e-3, 0.1)
    with pytest.raises(ValueError):
        run_log.record_epoch(2, {'total': 1.0}, 1e-3, 0.1, val_verification=1.5)
    with pytest.raises(ValueError):
        run_log.record_epoch(2, {'total': 1.0}, 1e-3, 0.1, test_accuracy=0.5)
    assert run_log.best()['epoch'] == 1


def test_stale_synthetic_dataset_is_refused(run_config):
    run_config['dataset']['synth'].update({'identities': 9, 'seed': 5})
    with pytest.raises(ConfigError) as excinfo:
        load_dataset(run_config, generate=False)
    assert 'identities' in str(excinfo.value) and 'gen --force' in str(excinfo.value)


def test_matching_synthetic_dataset_is_reused(run_config):
    manifest, split, _ = load_dataset(run_config, generate=False)
    assert len(manifest.identities) == 6 and len(split.unseen) == 2
