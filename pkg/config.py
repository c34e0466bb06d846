"""
Configuration settings for CaVINet runs
Process-level settings come from environment variables (optionally a .env file);
run settings come from a versioned JSON document merged over DEFAULT_RUN_CONFIG
"""
import copy
import logging
import os

import simplejson as json
from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Raised when a run config fails validation"""


class Config:
    # Logging
    LOG_PATH = os.environ.get('CAVINET_LOG_PATH', '')
    LOG_LEVEL = os.environ.get('CAVINET_LOG_LEVEL', 'INFO')

    # Outputs
    OUTPUT_DIR = os.environ.get('CAVINET_OUTPUT_DIR', 'runs')

    # Execution
    JOBS = int(os.environ.get('CAVINET_JOBS', '1'))
    SEED = int(os.environ.get('CAVINET_SEED', '0'))
    DTYPE = os.environ.get('CAVINET_DTYPE', 'float32')

    # Gradient checks always run in double precision
    GRADCHECK_TOLERANCE = float(os.environ.get('CAVINET_GRADCHECK_TOLERANCE', '1e-5'))
    GRADCHECK_STEP = 1e-6

    # Log clamp for probabilities fed to the losses
    LOSS_EPSILON = 1e-12

    @classmethod
    def validate_required_config(cls):
        """Validate process-level settings"""
        problems = []
        if cls.JOBS < 1:
            problems.append(f"CAVINET_JOBS must be >= 1 (got {cls.JOBS})")
        if cls.DTYPE not in ('float32', 'float64'):
            problems.append(f"CAVINET_DTYPE must be float32 or float64 (got {cls.DTYPE})")
        if cls.GRADCHECK_TOLERANCE <= 0:
            problems.append("CAVINET_GRADCHECK_TOLERANCE must be positive")
        if cls.LOG_LEVEL.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR'):
            problems.append(f"CAVINET_LOG_LEVEL not recognised: {cls.LOG_LEVEL}")

        if problems:
            raise ValueError(f"Invalid configuration: {'; '.join(problems)}")

        return True


# Defaults reproduce the training recipe: eta 1e-3, decay 1e-6, batch 25,
# dropout 0.6, Lambda 0.2, alpha:beta:gamma = 55:30:15
DEFAULT_RUN_CONFIG = {
    'schema_version': SCHEMA_VERSION,
    'seed': Config.SEED,
    'output_dir': Config.OUTPUT_DIR,
    'dataset': {
        'manifest': None,
        'synth': {
            'identities': 10,
            'images_per_identity': 12,
            'image_size': 32,
            'distortion': 0.6,
            'seed': 0,
            'root': 'data/synthetic',
        },
        'unseen_count': 2,
        'split_ratios': [0.7, 0.15, 0.15],
        'positive_fraction': 0.5,
        'augment': {
            'enabled': True,
            'translate': 0.1,
            'rotate': 15.0,
            'noise': 0.05,
            'flip': 0.5,
        },
    },
    'model': {
        'profile': 'toy',
        'input_shape': [3, 32, 32],
        'shared_dim': 256,
        'specific_dim': 256,
        'id_head_widths': [512, 128],
        'ver_head_widths': [512, 128],
        'dtype': Config.DTYPE,
    },
    'train': {
        'eta': 1e-3,
        'decay': 1e-6,
        'batch_size': 25,
        'epochs': 30,
        'pairs_per_epoch': 500,
        'val_pairs': 200,
        'weights': [55, 30, 15],
        'lambda': 0.2,
        'dropout_p': 0.6,
        'freeze_depth': 0,
        'tied_weights': False,
        'feature_mode': 'shared_plus_specific',
        'verification_only': False,
    },
    'eval': {
        'threshold': 0.5,
        'test_pairs': 400,
        'unseen_pairs': 200,
        'confusions_per_cell': 4,
    },
    'ablation': {
        'seeds': [0, 1, 2],
        'lambda_grid': [0.0, 0.05, 0.1, 0.2, 0.4, 0.8],
        'matrix': 'reference',
    },
    'viz': {
        'network': 'cari_id',
        'neuron': 0,
        'steps': 64,
        'step_size': 0.5,
        'jitter': 2,
        'seed': 0,
    },
}

PRESETS = {
    # 8 identities x 10 images per modality, no augmentation, 200 epochs
    'overfit': {
        'dataset': {
            'synth': {'identities': 8, 'images_per_identity': 10, 'root': 'data/overfit'},
            'unseen_count': 0,
            'augment': {'enabled': False},
        },
        'train': {'epochs': 200, 'pairs_per_epoch': 160, 'val_pairs': 160},
    },
    # 30 seen + 5 unseen identities x 20 images per modality, augmentation on
    'generalization': {
        'dataset': {
            'synth': {'identities': 35, 'images_per_identity': 20, 'root': 'data/generalization'},
            'unseen_count': 5,
        },
        'train': {'epochs': 60, 'pairs_per_epoch': 1000},
    },
    # 13 conv layers at 224x224x3, first 4 frozen
    'vgg16': {
        'dataset': {'synth': {'image_size': 224}},
        'model': {'profile': 'vgg16', 'input_shape': [3, 224, 224], 'id_head_widths': [4096, 4096],
                  'ver_head_widths': [4096, 4096]},
        'train': {'freeze_depth': 4},
    },
}

VALID_FEATURE_MODES = ('shared_plus_specific', 'shared_only', 'visual_features_only')


def deep_merge(base, override):
    """Return a copy of base with override merged in, recursing into dicts"""
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def set_dotted(config, dotted_key, value):
    """Set config['a']['b'] for dotted_key 'a.b'"""
    parts = dotted_key.split('.')
    node = config
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def normalize_weights(weights):
    """Scale loss weights to sum to 1; all-zero weights stay zero"""
    total = float(sum(weights))
    if total == 0:
        return (0.0, 0.0, 0.0)
    return tuple(float(w) / total for w in weights)


def load_run_config(path=None, overrides=None, preset=None):
    """Resolve defaults <- preset <- file <- overrides and validate"""
    config = copy.deepcopy(DEFAULT_RUN_CONFIG)

    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset '{preset}' (known: {', '.join(sorted(PRESETS))})")
        config = deep_merge(config, PRESETS[preset])

    if path:
        try:
            with open(path) as f:
                file_config = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}")
        # A manifest in the file replaces the synthetic default
        if (file_config.get('dataset') or {}).get('manifest'):
            config['dataset']['synth'] = None
        config = deep_merge(config, file_config)

    for dotted_key, value in (overrides or {}).items():
        if value is not None:
            set_dotted(config, dotted_key, value)

    validate_run_config(config)
    return config


def validate_run_config(config):
    """Check a resolved run config; raise ConfigError listing every problem"""
    problems = []

    if config.get('schema_version') != SCHEMA_VERSION:
        problems.append(f"schema_version must be {SCHEMA_VERSION} (got {config.get('schema_version')})")

    dataset = config.get('dataset', {})
    has_manifest = bool(dataset.get('manifest'))
    has_synth = bool(dataset.get('synth'))
    if has_manifest == has_synth:
        problems.append("dataset: exactly one of 'manifest' or 'synth' must be set")
    if has_manifest and not os.path.exists(dataset['manifest']):
        problems.append(f"dataset.manifest: path does not exist: {dataset['manifest']}")
    if has_synth:
        synth = dataset['synth']
        if synth.get('identities', 0) < 2:
            problems.append("dataset.synth.identities must be >= 2")
        if synth.get('images_per_identity', 0) < 1:
            problems.append("dataset.synth.images_per_identity must be >= 1")
    ratios = dataset.get('split_ratios', [])
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        problems.append(f"dataset.split_ratios must be three positive values summing to 1 (got {ratios})")
    if not 0.0 <= dataset.get('positive_fraction', -1) <= 1.0:
        problems.append("dataset.positive_fraction must be in [0, 1]")

    train = config.get('train', {})
    if not train.get('eta', 0) > 0:
        problems.append("train.eta must be > 0")
    if train.get('decay', -1) < 0:
        problems.append("train.decay must be >= 0")
    if train.get('batch_size', 0) < 1:
        problems.append("train.batch_size must be >= 1")
    if train.get('epochs', -1) < 0:
        problems.append("train.epochs must be >= 0")
    weights = train.get('weights', [])
    if len(weights) != 3 or any(w < 0 for w in weights):
        problems.append("train.weights must be three values >= 0")
    if train.get('lambda', -1) < 0:
        problems.append("train.lambda must be >= 0")
    if not 0.0 <= train.get('dropout_p', -1) < 1.0:
        problems.append("train.dropout_p must be in [0, 1)")
    if train.get('freeze_depth', -1) < 0:
        problems.append("train.freeze_depth must be >= 0")
    if train.get('feature_mode') not in VALID_FEATURE_MODES:
        problems.append(f"train.feature_mode must be one of {', '.join(VALID_FEATURE_MODES)}")

    model = config.get('model', {})
    if model.get('shared_dim', 0) < 1:
        problems.append("model.shared_dim must be >= 1")
    if model.get('specific_dim', -1) < 0:
        problems.append("model.specific_dim must be >= 0")
    if model.get('dtype') not in ('float32', 'float64'):
        problems.append("model.dtype must be float32 or float64")

    if not 0.0 < config.get('eval', {}).get('threshold', 0.5) < 1.0:
        problems.append("eval.threshold must be in (0, 1)")

    viz = config.get('viz', {})
    if viz.get('steps', 0) < 1:
        problems.append("viz.steps must be >= 1")
    if viz.get('jitter', -1) < 0:
        problems.append("viz.jitter must be >= 0")

    if problems:
        for problem in problems:
            logger.error(f"Config validation: {problem}")
        raise ConfigError(f"Invalid run config: {'; '.join(problems)}")

    return True


def write_effective_config(config, out_dir):
    """Write the fully resolved config next to a command's outputs"""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, 'effective_config.json')
    with open(path, 'w') as f:
        json.dump(config, f, indent=2, sort_keys=True)
    logger.info(f"Effective config written to {path}")
    return path
