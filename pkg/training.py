"""
Mini-batch SGD training for CaVINet
"""
import logging
import os
import time

import numpy as np

from checkpoint import CheckpointStore
from dataset import ImageStore, identity_images, load_manifest, make_splits, sample_pairs
from evaluation import (
    EmptyStreamError, batched, evaluate_identification, evaluate_verification, evaluation_pairs,
)
from model import CARICATURE, VISUAL, CaVINet, stack_pairs
from numerics import TRAIN, first_non_finite
from run_log import RunLog
from seeding import derive_rng, derive_seed
from synthetic import SynthSpec, check_synthetic, generate_synthetic

logger = logging.getLogger(__name__)

LOSS_FIELDS = ('l_ve', 'l_ci', 'l_vi', 'l_ortho', 'total')

INTERPRETATIONS = (
    'inverse-time-decay',
    'batch-mean-gradients',
    'best-on-validation-verification',
    'plain-sgd',
)


class NonFiniteLossError(ArithmeticError):
    """A training step produced a non-finite loss or gradient"""

    def __init__(self, tensor, step):
        self.tensor = tensor
        self.step = step
        super().__init__(f"non-finite value in {tensor} at step {step}")


class SGD:
    """p <- p - eta_t * g with eta_t = eta / (1 + decay * t)"""

    def __init__(self, eta, decay=0.0):
        if eta < 0 or decay < 0:
            raise ValueError("eta and decay must be >= 0")
        self.eta = float(eta)
        self.decay = float(decay)

    def learning_rate(self, t):
        return self.eta / (1.0 + self.decay * t)

    def step(self, params, grads, t, frozen=()):
        lr = self.learning_rate(t)
        if lr == 0.0:
            return lr
        for name, param in params.items():
            if name in frozen:
                continue
            param -= (lr * grads[name]).astype(param.dtype, copy=False)
        return lr


def build_model(config, n_identities):
    return CaVINet(config['model'], config['train'], n_identities, seed=config['seed'])


def augment_policy(dataset_config):
    policy = dataset_config.get('augment') or {}
    if not policy.get('enabled', False):
        return None
    return {key: policy.get(key, 0.0) for key in ('translate', 'rotate', 'noise', 'flip')}


def load_dataset(config, generate=True):
    """(manifest, split, store) for the configured manifest or synthetic dataset"""
    dataset = config['dataset']
    if dataset.get('manifest'):
        manifest = load_manifest(dataset['manifest'])
    else:
        spec = SynthSpec.from_config(dataset['synth'])
        manifest_path = os.path.join(spec.root, 'manifest.csv')
        if os.path.exists(manifest_path):
            check_synthetic(spec)
            manifest = load_manifest(manifest_path)
        elif generate:
            manifest = generate_synthetic(spec)
        else:
            raise FileNotFoundError(f"No synthetic dataset at {spec.root}; run 'gen' first")
    split = make_splits(manifest, dataset['unseen_count'], dataset['split_ratios'], seed=config['seed'])
    store = ImageStore(manifest, dtype=np.dtype(config['model']['dtype']))
    return manifest, split, store


class Trainer:
    def __init__(self, model, config, out_dir=None):
        self.model = model
        self.config = config
        self.train_config = config['train']
        self.seed = int(config['seed'])
        self.optimizer = SGD(self.train_config['eta'], self.train_config.get('decay', 0.0))
        self.step_index = 0
        self.out_dir = out_dir
        self.checkpoints = CheckpointStore(os.path.join(out_dir, 'checkpoints')) if out_dir else None

    def sgd_step(self, batch, step_index=None):
        """
        One update from a batch (list of CrossModalPair or (cari, vis, labels) arrays)

        Frozen parameters are skipped; tied branches receive the summed gradient of
        both modalities once. Raises NonFiniteLossError naming the first bad tensor.
        """
        if isinstance(batch, tuple):
            cari, vis, labels = batch
        else:
            cari, vis, labels = stack_pairs(batch)
        if len(labels) == 0:
            raise ValueError("sgd_step needs a non-empty batch")
        t = self.step_index if step_index is None else int(step_index)

        breakdown, grads = self.model.compute_gradients(cari, vis, labels, mode=TRAIN,
                                                        rng=derive_rng(self.seed, 'train', 'dropout', t))
        state = self.model._state
        named = [(f"loss.{name}", getattr(breakdown, name)) for name in LOSS_FIELDS]
        named += [(f"output.{name}", value) for name, value in state.outputs.items()]
        named += [('features.caricature', state.x_c), ('features.visual', state.x_v)]
        named += [(f"grad.{name}", value) for name, value in grads.items()]
        culprit = first_non_finite(named)
        if culprit:
            culprit = first_non_finite(self.model.named_parameters()) or culprit
            logger.error(f"Non-finite value in {culprit} at step {t}; aborting")
            raise NonFiniteLossError(culprit, t)

        lr = self.optimizer.step(self.model.parameter_dict(), grads, t, frozen=self.model.frozen_names())
        self.step_index = t + 1
        logger.debug(f"Step {t}: total={breakdown.total:.5f} lr={lr:.3e}")
        return breakdown

    def epoch_metrics(self, split, store, train_eval_pairs, val_pairs):
        threshold = self.config['eval']['threshold']
        metrics = {
            'train_verification': evaluate_verification(self.model, train_eval_pairs, threshold).accuracy,
            'val_verification': evaluate_verification(self.model, val_pairs, threshold).accuracy,
        }
        if self.model.verification_only:
            return metrics
        for partition in ('train', 'val'):
            for modality, column in ((CARICATURE, 'caricature'), (VISUAL, 'visual')):
                images, labels = identity_images(split, partition, modality, store)
                try:
                    metrics[f"{partition}_rank1_{column}"] = evaluate_identification(self.model, images, labels, modality)
                except EmptyStreamError:
                    metrics[f"{partition}_rank1_{column}"] = None
        return metrics

    def train(self, split, store, epochs=None):
        """Run the configured epochs; returns (model, RunLog)"""
        epochs = self.train_config['epochs'] if epochs is None else epochs
        dataset = self.config['dataset']
        pf = dataset['positive_fraction']
        policy = augment_policy(dataset)
        run_log = RunLog(self.out_dir, self.config)

        val_pairs = evaluation_pairs(split, store, self.config, 'val')
        train_eval_pairs = evaluation_pairs(split, store, self.config, 'train')

        logger.info(f"Training {epochs} epochs x {self.train_config['pairs_per_epoch']} pairs, "
                    f"batch {self.train_config['batch_size']}, augmentation {'on' if policy else 'off'}")
        best_val = -1.0
        best_path = None
        for epoch in range(1, epochs + 1):
            started = time.perf_counter()
            stream = sample_pairs(split.records('train'), self.train_config['pairs_per_epoch'], pf,
                                  derive_seed(self.seed, 'train', 'epoch', epoch), split.label_index, store, policy)
            sums = dict.fromkeys(LOSS_FIELDS, 0.0)
            seen = 0
            for batch in batched(stream, self.train_config['batch_size']):
                breakdown = self.sgd_step(batch)
                for name in LOSS_FIELDS:
                    sums[name] += getattr(breakdown, name) * len(batch)
                seen += len(batch)
            mean_loss = {name: value / max(seen, 1) for name, value in sums.items()}

            metrics = self.epoch_metrics(split, store, train_eval_pairs, val_pairs)
            run_log.record_epoch(epoch, mean_loss, self.optimizer.learning_rate(self.step_index),
                                 time.perf_counter() - started, **metrics)
            if metrics['val_verification'] > best_val:
                best_val = metrics['val_verification']
                if self.checkpoints:
                    best_path = self.checkpoints.save(self.model, 'best', {'epoch': epoch, 'val_verification': best_val})

        final_path = None
        if self.checkpoints:
            final_path = self.checkpoints.save(self.model, 'final', {'epoch': epochs, 'steps': self.step_index})
        run_log.finish(best_checkpoint=best_path, final_checkpoint=final_path, steps=self.step_index,
                       n_identities=self.model.n_identities)
        return self.model, run_log


def sgd_step(model, batch, config, step_index):
    """Single update of model from batch at step step_index; returns LossBreakdown"""
    return Trainer(model, config).sgd_step(batch, step_index)


def train(model, split, store, config, out_dir=None):
    return Trainer(model, config, out_dir).train(split, store)
