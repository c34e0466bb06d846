#!/usr/bin/env python3
"""
Tests for manifests, identity splits, pair sampling and augmentation
"""
import os
import sys
import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st
from scipy import stats

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import ConfigError
from dataset import (
    IDENTITY_POLICY, ImageRecord, ImageStore, ManifestError, SplitError, augment, augmented_pair_count, hflip,
    identity_images, load_manifest, make_splits, sample_pair_records, sample_pairs, save_image,
)
from model import CARICATURE, VISUAL

logger = logging.getLogger(__name__)


def write_dataset(root, identities=4, per_modality=4, size=8):
    """Small on-disk dataset plus its manifest; returns the manifest path"""
    rows = ['identity,modality,relative_path']
    rng = np.random.default_rng(0)
    for i in range(identities):
        identity = f"person{i}"
        os.makedirs(os.path.join(root, identity), exist_ok=True)
        for modality in (CARICATURE, VISUAL):
            for j in range(per_modality):
                rel = f"{identity}/{modality}_{j}.png"
                save_image(rng.uniform(size=(3, size, size)), os.path.join(root, rel))
                rows.append(f"{identity},{modality},{rel}")
    path = os.path.join(root, 'manifest.csv')
    with open(path, 'w') as f:
        f.write('\n'.join(rows) + '\n')
    return path


def write_rows(tmp_path, rows):
    path = tmp_path / 'manifest.csv'
    path.write_text('\n'.join(rows) + '\n')
    return str(path)


def test_load_manifest_counts(tmp_path):
    manifest = load_manifest(write_dataset(str(tmp_path)))
    assert len(manifest.identities) == 4
    assert manifest.n_caricature == 16 and manifest.n_visual == 16
    assert os.path.exists(manifest.absolute_path(manifest.records[0]))


def test_manifest_header_is_required(tmp_path):
    with pytest.raises(ManifestError) as excinfo:
        load_manifest(write_rows(tmp_path, ['who,what,where', 'a,caricature,a/1.png']))
    assert excinfo.value.line == 1


def test_manifest_invalid_modality_names_line(tmp_path):
    rows = ['identity,modality,relative_path', 'a,caricature,a/1.png', 'a,sketch,a/2.png']
    with pytest.raises(ManifestError) as excinfo:
        load_manifest(write_rows(tmp_path, rows))
    assert excinfo.value.line == 3
    assert 'sketch' in str(excinfo.value)


def test_manifest_duplicate_path_rejected(tmp_path):
    rows = ['identity,modality,relative_path', 'a,caricature,a/1.png', 'a,visual,a/1.png']
    with pytest.raises(ManifestError):
        load_manifest(write_rows(tmp_path, rows))


def test_identity_without_visual_images_is_named(tmp_path):
    rows = ['identity,modality,relative_path', 'a,caricature,a/1.png', 'a,visual,a/2.png',
            'b,caricature,b/1.png']
    with pytest.raises(ManifestError) as excinfo:
        load_manifest(write_rows(tmp_path, rows))
    assert excinfo.value.identity == 'b'


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(str(tmp_path / 'absent.csv'))


def test_splits_are_disjoint_and_deterministic(tmp_path):
    manifest = load_manifest(write_dataset(str(tmp_path), identities=5))
    split = make_splits(manifest, unseen_count=1, ratios=(0.5, 0.25, 0.25), seed=3)
    again = make_splits(manifest, unseen_count=1, ratios=(0.5, 0.25, 0.25), seed=3)
    assert split.partitions == again.partitions and split.unseen == again.unseen

    paths = {name: {r.path for r in split.records(name)} for name in ('train', 'val', 'test', 'unseen')}
    names = list(paths)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            assert not paths[a] & paths[b], (a, b)
    assert sum(len(p) for p in paths.values()) == len(manifest.records)
    assert not set(split.seen) & set(split.unseen)
    for name in ('train', 'val', 'test'):
        assert {r.identity for r in split.records(name)} == set(split.seen)


def test_unseen_identities_get_labels_after_seen(tmp_path):
    manifest = load_manifest(write_dataset(str(tmp_path), identities=5))
    split = make_splits(manifest, unseen_count=2, seed=0)
    assert sorted(split.label_index[i] for i in split.seen) == [0, 1, 2]
    assert sorted(split.label_index[i] for i in split.unseen) == [3, 4]


def test_split_needs_three_images_per_modality(tmp_path):
    manifest = load_manifest(write_dataset(str(tmp_path), per_modality=2))
    with pytest.raises(SplitError):
        make_splits(manifest, unseen_count=0)


def test_split_rejects_holding_out_everyone(tmp_path):
    manifest = load_manifest(write_dataset(str(tmp_path), identities=3))
    with pytest.raises(SplitError):
        make_splits(manifest, unseen_count=3)


@pytest.fixture
def seen_split(tmp_path):
    manifest = load_manifest(write_dataset(str(tmp_path), identities=4, per_modality=6))
    return manifest, make_splits(manifest, unseen_count=0, seed=1)


@settings(suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(count=st.integers(min_value=0, max_value=40), fraction=st.floats(min_value=0.0, max_value=1.0))
def test_positive_count_is_exact(seen_split, count, fraction):
    _, split = seen_split
    pairs = sample_pair_records(split.records('train'), count, fraction, 5, split.label_index)
    assert len(pairs) == count
    assert sum(labels.y_ve for _, _, labels in pairs) == int(round(count * fraction))


def test_pairs_are_consistent_and_cross_modal(seen_split):
    _, split = seen_split
    for cari, vis, labels in sample_pair_records(split.records('train'), 60, 0.5, 2, split.label_index):
        assert cari.modality == CARICATURE and vis.modality == VISUAL
        assert labels.y_ci == split.label_index[cari.identity]
        assert labels.y_vi == split.label_index[vis.identity]
        assert labels.y_ve == int(cari.identity == vis.identity)


def test_pair_stream_is_deterministic(seen_split):
    manifest, split = seen_split
    store = ImageStore(manifest)
    a = list(sample_pairs(split.records('train'), 10, 0.5, 7, split.label_index, store, IDENTITY_POLICY))
    b = list(sample_pairs(split.records('train'), 10, 0.5, 7, split.label_index, store, IDENTITY_POLICY))
    assert [(p.caricature_path, p.visual_path) for p in a] == [(p.caricature_path, p.visual_path) for p in b]
    c = sample_pair_records(split.records('train'), 10, 0.5, 8, split.label_index)
    assert [(x.path, y.path) for x, y, _ in c] != [(p.caricature_path, p.visual_path) for p in a]


def test_augmented_pair_stream_is_reproducible(seen_split):
    manifest, split = seen_split
    store = ImageStore(manifest)
    policy = {'translate': 0.1, 'rotate': 15.0, 'noise': 0.05, 'flip': 0.5}
    a = list(sample_pairs(split.records('train'), 6, 0.5, 3, split.label_index, store, policy))
    b = list(sample_pairs(split.records('train'), 6, 0.5, 3, split.label_index, store, policy))
    for x, y in zip(a, b):
        assert np.array_equal(x.caricature, y.caricature) and np.array_equal(x.visual, y.visual)


def test_negatives_need_two_identities(seen_split):
    _, split = seen_split
    one = [r for r in split.records('train') if r.identity == split.seen[0]]
    assert len(sample_pair_records(one, 5, 1.0, 0, split.label_index)) == 5
    with pytest.raises(SplitError):
        sample_pair_records(one, 5, 0.5, 0, split.label_index)


def test_positive_fraction_out_of_range(seen_split):
    _, split = seen_split
    with pytest.raises(ConfigError):
        sample_pair_records(split.records('train'), 5, 1.5, 0, split.label_index)


def test_zero_policy_returns_input_unchanged():
    image = np.random.default_rng(0).uniform(size=(3, 8, 8))
    assert augment(image, IDENTITY_POLICY, seed=4) is image


def test_augment_is_deterministic_and_bounded():
    image = np.random.default_rng(0).uniform(size=(3, 12, 12))
    policy = {'translate': 0.1, 'rotate': 15.0, 'noise': 0.05, 'flip': 0.5}
    a = augment(image, policy, seed=(1, 0, CARICATURE))
    b = augment(image, policy, seed=(1, 0, CARICATURE))
    c = augment(image, policy, seed=(1, 1, CARICATURE))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.shape == image.shape and a.dtype == image.dtype
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_certain_flip_matches_hflip():
    image = np.random.default_rng(0).uniform(size=(3, 6, 6))
    flipped = augment(image, dict(IDENTITY_POLICY, flip=1.0), seed=0)
    assert np.array_equal(flipped, hflip(image))


def test_double_flip_restores_the_image():
    image = np.random.default_rng(1).uniform(size=(3, 6, 7))
    policy = dict(IDENTITY_POLICY, flip=1.0)
    np.testing.assert_array_equal(augment(augment(image, policy, seed=0), policy, seed=1), image)
    np.testing.assert_array_equal(hflip(hflip(image)), image)


def test_negative_identity_pairs_are_uniform():
    identities = [f"person{i}" for i in range(10)]
    records = [ImageRecord(name, modality, f"{name}/{modality}.png")
               for name in identities for modality in (CARICATURE, VISUAL)]
    label_index = {name: i for i, name in enumerate(identities)}
    pairs = sample_pair_records(records, 10000, 0.0, seed=0, label_index=label_index)
    counts = np.zeros((10, 10), dtype=np.int64)
    for _, _, labels in pairs:
        counts[labels.y_ci, labels.y_vi] += 1
    assert np.all(np.diag(counts) == 0)
    observed = counts[~np.eye(10, dtype=bool)]
    assert observed.sum() == 10000
    assert stats.chisquare(observed).pvalue > 0.01


def test_augment_rejects_magnitudes_above_caps():
    with pytest.raises(ConfigError):
        augment(np.zeros((3, 4, 4)), dict(IDENTITY_POLICY, rotate=30.0), seed=0)


def test_augmented_pair_count():
    assert augmented_pair_count(100, 4) == 400


def test_identity_images_stack_one_modality(seen_split):
    manifest, split = seen_split
    images, labels = identity_images(split, 'test', VISUAL, ImageStore(manifest))
    assert images.shape[1:] == (3, 8, 8)
    assert len(images) == len(labels) == sum(1 for r in split.records('test') if r.modality == VISUAL)
    assert set(labels.tolist()) <= set(range(split.n_seen))
