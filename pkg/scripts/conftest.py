"""
Shared fixtures for the CaVINet test scripts
"""
import copy
import os
import sys
import logging

import numpy as np
import pytest
from hypothesis import settings

# Add parent directory to path so we can import modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import load_run_config  # noqa: E402
from model import CaVINet, PairLabels  # noqa: E402
from dataset import CrossModalPair  # noqa: E402

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)

settings.register_profile('cavinet', deadline=None, max_examples=50)
settings.load_profile('cavinet')

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

# 6 identities x 4 images per modality at 16x16, two held out as unseen
SMALL_OVERRIDES = {
    'dataset.synth.identities': 6,
    'dataset.synth.images_per_identity': 4,
    'dataset.synth.image_size': 16,
    'dataset.unseen_count': 2,
    'model.profile': 'tiny',
    'model.input_shape': [3, 16, 16],
    'model.shared_dim': 8,
    'model.specific_dim': 8,
    'model.id_head_widths': [16, 8],
    'model.ver_head_widths': [16, 8],
    'model.dtype': 'float64',
    'train.epochs': 2,
    'train.pairs_per_epoch': 20,
    'train.val_pairs': 10,
    'train.batch_size': 5,
    'eval.test_pairs': 10,
    'eval.unseen_pairs': 10,
    'eval.confusions_per_cell': 2,
    'ablation.seeds': [0],
    'viz.steps': 4,
}


def small_run_config(root, output_dir):
    overrides = dict(SMALL_OVERRIDES)
    overrides['dataset.synth.root'] = str(root)
    overrides['output_dir'] = str(output_dir)
    return load_run_config(overrides=overrides)


@pytest.fixture(scope='session')
def small_dataset_root(tmp_path_factory):
    """Synthetic dataset generated once per session"""
    from training import load_dataset
    root = tmp_path_factory.mktemp('synthetic')
    load_dataset(small_run_config(root, tmp_path_factory.mktemp('unused')), generate=True)
    return root


@pytest.fixture
def run_config(small_dataset_root, tmp_path):
    """Fresh small run config over the shared synthetic dataset"""
    return copy.deepcopy(small_run_config(small_dataset_root, tmp_path / 'runs'))


@pytest.fixture
def small_data(run_config):
    from training import load_dataset
    return load_dataset(run_config, generate=False)


def tiny_model(n_identities=3, seed=0, **train_overrides):
    """Double-precision model on 10x10 inputs, small enough for finite differences"""
    model_config = {'profile': 'tiny', 'input_shape': [3, 10, 10], 'shared_dim': 4, 'specific_dim': 4,
                    'id_head_widths': [6, 5], 'ver_head_widths': [6, 5], 'dtype': 'float64'}
    train_config = {'weights': [55, 30, 15], 'lambda': 0.2, 'dropout_p': 0.6, 'freeze_depth': 0,
                    'tied_weights': False, 'feature_mode': 'shared_plus_specific', 'verification_only': False}
    train_config.update(train_overrides)
    return CaVINet(model_config, train_config, n_identities, seed=seed)


def random_batch(n_pairs=4, n_identities=3, shape=(3, 10, 10), seed=0):
    """(cari, vis, labels) with consistent labels and both pair kinds present"""
    rng = np.random.default_rng(seed)
    cari = rng.uniform(0.0, 1.0, size=(n_pairs,) + tuple(shape))
    vis = rng.uniform(0.0, 1.0, size=(n_pairs,) + tuple(shape))
    y_ci = rng.integers(0, n_identities, size=n_pairs)
    y_vi = y_ci.copy()
    y_vi[1::2] = (y_ci[1::2] + 1) % n_identities
    labels = np.stack([(y_ci == y_vi).astype(np.int64), y_ci, y_vi], axis=1)
    return cari, vis, labels


def random_pairs(n_pairs=4, n_identities=3, shape=(3, 10, 10), seed=0):
    cari, vis, labels = random_batch(n_pairs, n_identities, shape, seed)
    return [CrossModalPair(cari[i], vis[i], PairLabels(*(int(v) for v in labels[i]))) for i in range(n_pairs)]


def linear_model(n_identities=3, seed=0, **train_overrides):
    """Branch-free model on (1, 4, 4) inputs: the flattened image is the feature vector"""
    model_config = {'profile': 'linear', 'input_shape': [1, 4, 4], 'shared_dim': 3, 'specific_dim': 2,
                    'id_head_widths': [4, 4], 'ver_head_widths': [4, 4], 'dtype': 'float64'}
    train_config = {'weights': [55, 30, 15], 'lambda': 0.2, 'dropout_p': 0.0}
    train_config.update(train_overrides)
    return CaVINet(model_config, train_config, n_identities, seed=seed)
