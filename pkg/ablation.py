"""
Ablation matrix, Lambda sweep and baseline runs at desk scale
Every cell rebuilds its data, model and trainer from its own config, so cells can
run in a process pool without sharing state
"""
import copy
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from baselines import run_feature_baselines  # noqa: E402
from config import VALID_FEATURE_MODES, ConfigError, deep_merge  # noqa: E402
from evaluation import REFERENCE_VARIANT_ROWS, REFERENCE_WEIGHT_ROWS, build_report  # noqa: E402
from training import Trainer, build_model, load_dataset  # noqa: E402

logger = logging.getLogger(__name__)

VARIANT_KEYS = ('tied_weights', 'lambda', 'feature_mode', 'weights', 'verification_only')
METRICS = ('verification', 'verification_unseen', 'visual_id', 'cari_id')

INTERPRETATIONS = (
    'multi-seed-reporting',
    'observations-not-assertions',
)


@dataclass(frozen=True)
class AblationVariant:
    name: str
    overrides: dict = field(default_factory=dict)

    def validate(self):
        unknown = set(self.overrides) - set(VARIANT_KEYS)
        if unknown:
            raise ConfigError(f"variant {self.name}: unknown overrides {sorted(unknown)}")
        mode = self.overrides.get('feature_mode')
        if mode is not None and mode not in VALID_FEATURE_MODES:
            raise ConfigError(f"variant {self.name}: feature_mode must be one of {', '.join(VALID_FEATURE_MODES)}")
        if self.overrides.get('lambda', 0.0) < 0:
            raise ConfigError(f"variant {self.name}: lambda must be >= 0")
        weights = self.overrides.get('weights')
        if weights is not None and (len(weights) != 3 or any(w < 0 for w in weights)):
            raise ConfigError(f"variant {self.name}: weights must be three values >= 0")
        return True

    def apply(self, config, seed):
        """Copy of config with the overrides merged into the train section and the seed set"""
        cell = deep_merge(config, {'train': self.overrides})
        cell['seed'] = int(seed)
        return cell


def reference_matrix():
    """Loss-weight ratio rows followed by the architectural ablations"""
    return [
        AblationVariant('cavinet', {'weights': [55, 30, 15]}),
        AblationVariant('weights_50_25_25', {'weights': [50, 25, 25]}),
        AblationVariant('weights_40_35_25', {'weights': [40, 35, 25]}),
        AblationVariant('weights_33_33_33', {'weights': [33, 33, 33]}),
        AblationVariant('tied_weights', {'tied_weights': True}),
        AblationVariant('without_ortho', {'lambda': 0.0}),
        AblationVariant('shared_features', {'feature_mode': 'shared_only'}),
        AblationVariant('visual_features', {'feature_mode': 'visual_features_only'}),
    ]


def reference_row(name):
    """Full-scale (verification, visual-id, cari-id) for a matrix row, if one exists"""
    if name in REFERENCE_VARIANT_ROWS:
        return REFERENCE_VARIANT_ROWS[name]
    if name.startswith('weights_'):
        return REFERENCE_WEIGHT_ROWS.get(name[len('weights_'):].replace('_', ':'))
    return None


def run_cell(config, variant, seed, out_dir=None):
    """Train and evaluate one (variant, seed); failures come back as a row, never raise"""
    row = {'variant': variant.name, 'seed': seed, 'status': 'ok', 'error': None}
    row.update(dict.fromkeys(METRICS))
    try:
        cell_config = variant.apply(config, seed)
        cell_dir = os.path.join(out_dir, 'cells', f"{variant.name}_seed{seed}") if out_dir else None
        _, split, store = load_dataset(cell_config, generate=False)
        model = build_model(cell_config, split.n_seen)
        model, run_log = Trainer(model, cell_config, cell_dir).train(split, store)
        report = build_report(model, split, store, cell_config)
        row.update({
            'verification': report.verification_acc_seen,
            'verification_unseen': report.verification_acc_unseen,
            'visual_id': report.rank1_visual,
            'cari_id': report.rank1_cari,
            'max_l_ortho': max((r['loss']['l_ortho'] for r in run_log.records), default=0.0),
            'identification_input_dim': model.cari_head.in_dim,
            'branches_identical': model.branches_identical(),
        })
    except Exception as e:
        logger.error(f"Ablation cell {variant.name} seed {seed} failed: {str(e)}")
        row.update({'status': 'failed', 'error': f"{type(e).__name__}: {e}"})
    return row


def _run_cells(config, variants, seeds, jobs, out_dir):
    cells = [(variant, seed) for variant in variants for seed in seeds]
    if jobs <= 1:
        return [run_cell(config, variant, seed, out_dir) for variant, seed in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(run_cell, config, variant, seed, out_dir) for variant, seed in cells]
        return [future.result() for future in futures]


def summarize(cells, order):
    """One row per variant: mean and range (max - min) of each metric over successful seeds"""
    rows = []
    for name in order:
        group = cells[(cells['variant'] == name) & (cells['status'] == 'ok')]
        row = {'variant': name, 'seeds_ok': len(group),
               'seeds_failed': int(((cells['variant'] == name) & (cells['status'] != 'ok')).sum())}
        for metric in METRICS:
            values = pd.to_numeric(group[metric], errors='coerce').dropna() if metric in group else pd.Series(dtype=float)
            row[f"{metric}_mean"] = float(values.mean()) if len(values) else None
            row[f"{metric}_range"] = float(values.max() - values.min()) if len(values) else None
        reference = reference_row(name)
        row['reference'] = ' / '.join(f"{100 * v:.2f}" for v in reference) if reference else None
        rows.append(row)
    return pd.DataFrame(rows)


def markdown_table(summary):
    display = pd.DataFrame({'variant': summary['variant']})
    for metric in METRICS:
        display[metric] = [
            'n/a' if mean is None or pd.isna(mean) else f"{mean:.4f} ± {rng:.4f}"
            for mean, rng in zip(summary[f"{metric}_mean"], summary[f"{metric}_range"])
        ]
    display['reference (ver / vis-id / cari-id)'] = summary['reference'].fillna('')
    display['failed'] = summary['seeds_failed']
    return display.to_markdown(index=False)


def observation_flags(summary):
    """Qualitative orderings reported at full scale; logged as observations, never enforced"""
    means = dict(zip(summary['variant'], summary['verification_mean']))

    def at_least(a, b):
        if means.get(a) is None or means.get(b) is None or pd.isna(means[a]) or pd.isna(means[b]):
            return None
        return bool(means[a] >= means[b])

    flags = {
        'untied_ge_tied_verification': at_least('cavinet', 'tied_weights'),
        'ortho_ge_without_ortho_verification': at_least('cavinet', 'without_ortho'),
    }
    for name, value in flags.items():
        logger.info(f"Observation {name}: {'n/a' if value is None else ('holds' if value else 'does not hold')}")
    return flags


def write_tables(cells, summary, out_dir, stem):
    os.makedirs(out_dir, exist_ok=True)
    cells.to_csv(os.path.join(out_dir, f"{stem}_cells.csv"), index=False)
    summary.to_csv(os.path.join(out_dir, f"{stem}.csv"), index=False)
    with open(os.path.join(out_dir, f"{stem}.md"), 'w') as f:
        f.write(markdown_table(summary) + '\n')
    logger.info(f"Ablation tables written to {out_dir}/{stem}.csv and {stem}.md")


def run_matrix(config, variants, seeds, jobs=1, out_dir=None, stem='ablation'):
    """Train + evaluate every (variant, seed); returns (summary DataFrame, cell DataFrame, flags)"""
    if not seeds:
        raise ConfigError("run_matrix needs at least one seed")
    for variant in variants:
        variant.validate()
    # materialize the dataset once before any worker starts
    load_dataset(config, generate=True)

    logger.info(f"Running {len(variants)} variants x {len(seeds)} seeds with {jobs} job(s)")
    cells = pd.DataFrame(_run_cells(config, variants, seeds, jobs, out_dir))
    summary = summarize(cells, [variant.name for variant in variants])
    flags = observation_flags(summary)
    if out_dir:
        write_tables(cells, summary, out_dir, stem)
    return summary, cells, flags


def lambda_sweep(config, values, seeds, jobs=1, out_dir=None):
    """One row per Lambda plus a metric-vs-Lambda plot; returns (summary, plot path)"""
    if any(v < 0 for v in values):
        raise ConfigError(f"Lambda values must be >= 0 (got {values})")
    variants = [AblationVariant(f"lambda_{v:g}", {'lambda': float(v)}) for v in values]
    summary, cells, _ = run_matrix(config, variants, seeds, jobs, out_dir, stem='lambda_sweep')
    summary.insert(1, 'lambda', [float(v) for v in values])
    summary['max_l_ortho'] = [
        pd.to_numeric(cells.loc[cells['variant'] == variant.name, 'max_l_ortho'], errors='coerce').max()
        if 'max_l_ortho' in cells else None
        for variant in variants
    ]
    plot_path = None
    if out_dir:
        summary.to_csv(os.path.join(out_dir, 'lambda_sweep.csv'), index=False)
        plot_path = plot_lambda_sweep(summary, os.path.join(out_dir, 'lambda_sweep.png'))
    return summary, plot_path


def plot_lambda_sweep(summary, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for metric, label in (('verification', 'Verification'), ('visual_id', 'Visual-Id'), ('cari_id', 'Caricature-Id')):
        means = pd.to_numeric(summary[f"{metric}_mean"], errors='coerce')
        ranges = pd.to_numeric(summary[f"{metric}_range"], errors='coerce').fillna(0.0)
        ax.errorbar(summary['lambda'], means, yerr=ranges / 2.0, marker='o', capsize=3, label=label)
    ax.axvline(0.2, color='grey', linestyle=':', linewidth=1)
    ax.set_xlabel('Lambda')
    ax.set_ylabel('Accuracy')
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Lambda sweep plot written to {path}")
    return path


def baseline_variant():
    """Tied-weight, verification-only coupled network"""
    return AblationVariant('tied_verification_only', {'tied_weights': True, 'verification_only': True})


def run_baselines(config, seeds, jobs=1, out_dir=None):
    """Coupled-network baseline plus the frozen-feature and PCA baselines, same metric columns"""
    summary, cells, _ = run_matrix(config, [baseline_variant()], seeds, jobs, out_dir, stem='baselines_coupled')

    rows = []
    for seed in seeds:
        seed_config = copy.deepcopy(config)
        seed_config['seed'] = int(seed)
        try:
            _, split, store = load_dataset(seed_config, generate=False)
            frozen = build_model(seed_config, split.n_seen)
            for row in run_feature_baselines(frozen, split, store, seed_config, seed):
                rows.append(dict(row, seed=seed, status='ok', error=None))
        except Exception as e:
            logger.error(f"Feature baselines failed for seed {seed}: {str(e)}")
            rows.append({'variant': 'feature_baselines', 'seed': seed, 'status': 'failed',
                         'error': f"{type(e).__name__}: {e}"})
    feature_cells = pd.DataFrame(rows)
    for metric in METRICS:
        if metric not in feature_cells:
            feature_cells[metric] = None
    order = list(dict.fromkeys(feature_cells['variant']))
    all_cells = pd.concat([cells, feature_cells], ignore_index=True)
    table = pd.concat([summary, summarize(feature_cells, order)], ignore_index=True)
    if out_dir:
        write_tables(all_cells, table, out_dir, 'baselines')
    return table
