"""
Command-line entry point for CaVINet: dataset generation, training, evaluation,
ablations, visualization and the interpretation-ledger lint
"""
import argparse
import logging
import os
import shutil
import sys
from datetime import datetime

import numpy as np
import simplejson as json
from PIL import Image

from ablation import lambda_sweep, reference_matrix, run_baselines, run_matrix
from checkpoint import CheckpointError, load_checkpoint
from config import Config, ConfigError, load_run_config, write_effective_config
from evaluation import build_report
from ledger import lint_ledger
from model import MODALITIES
from synthetic import SynthSpec, generate_synthetic
from training import Trainer, build_model, load_dataset
from visualization import VizConfig, activation_maximize, saliency_map, write_activation, write_saliency

RUN_CONTEXT = {'command': '-', 'run_id': '-'}
MATRIX_NAMES = ('reference', 'paper')


class RunAwareLogHandler(logging.Handler):
    """Stamps every record with the active command and run id before delegating"""

    def __init__(self, handler):
        super().__init__()
        self.handler = handler

    def emit(self, record):
        record.command = RUN_CONTEXT['command']
        record.run_id = RUN_CONTEXT['run_id']
        self.handler.emit(record)


class RunAwareFormatter(logging.Formatter):
    def format(self, record):
        if not hasattr(record, 'run_id'):
            record.run_id = RUN_CONTEXT['run_id']
        return super().format(record)


LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(run_id)s - %(message)s'

logger = logging.getLogger(__name__)


def configure_logging(out_dir, level=None):
    """Root logger with stream and file handlers, both run-aware"""
    formatter = RunAwareFormatter(LOG_FORMAT)
    log_dir = Config.LOG_PATH or out_dir
    os.makedirs(log_dir, exist_ok=True)

    file_handler = logging.FileHandler(os.path.join(log_dir, 'cavinet.log'))
    file_handler.setFormatter(formatter)
    stream_handler = logging.StreamHandler()
    stream_handler.setFormatter(formatter)

    root_logger = logging.getLogger()
    for handler in list(root_logger.handlers):
        root_logger.removeHandler(handler)
    root_logger.setLevel(getattr(logging, (level or Config.LOG_LEVEL).upper(), logging.INFO))
    root_logger.addHandler(RunAwareLogHandler(file_handler))
    root_logger.addHandler(RunAwareLogHandler(stream_handler))


def cmd_gen(args, config, out_dir):
    synth = config['dataset'].get('synth')
    if not synth:
        raise ConfigError("gen needs a dataset.synth section (a manifest dataset cannot be generated)")
    spec = SynthSpec.from_config(synth)
    spec.validate()
    if os.path.exists(spec.root) and os.listdir(spec.root):
        if not args.force:
            raise FileExistsError(f"{spec.root} already exists; rerun with --force to overwrite")
        logger.info(f"Removing existing dataset at {spec.root}")
        shutil.rmtree(spec.root)
    manifest = generate_synthetic(spec)
    logger.info(f"Generated {len(manifest.records)} images for {len(manifest.identities)} identities")


def cmd_train(args, config, out_dir):
    _, split, store = load_dataset(config)
    model = build_model(config, split.n_seen)
    _, run_log = Trainer(model, config, out_dir).train(split, store)
    best = run_log.best()
    logger.info(f"Training finished after {len(run_log.records)} epochs; "
                f"best val verification {best['val_verification']:.4f}" if best else "Training finished (0 epochs)")


def default_checkpoint(config, tag='best'):
    return os.path.join(config['output_dir'], 'train', 'checkpoints', f"{tag}.npz")


def cmd_eval(args, config, out_dir):
    path = args.checkpoint or default_checkpoint(config)
    if not os.path.exists(path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    model, metadata = load_checkpoint(path)
    _, split, store = load_dataset(config, generate=False)
    if model.n_identities != split.n_seen:
        raise ConfigError(f"checkpoint has {model.n_identities} identities but the split has {split.n_seen} seen")
    report = build_report(model, split, store, config, partition=args.partition, unseen_only=args.unseen,
                          out_dir=None if args.unseen else out_dir)
    report.metadata.update({'checkpoint': path, 'checkpoint_metadata': metadata})
    report.save(os.path.join(out_dir, 'eval_report.json'))


def cmd_ablate(args, config, out_dir):
    seeds = args.seeds or config['ablation']['seeds']
    jobs = args.jobs or Config.JOBS
    if args.lambda_sweep:
        lambda_sweep(config, config['ablation']['lambda_grid'], seeds, jobs, out_dir)
    if args.baselines:
        run_baselines(config, seeds, jobs, out_dir)
    if args.matrix or not (args.lambda_sweep or args.baselines):
        _, _, flags = run_matrix(config, reference_matrix(), seeds, jobs, out_dir)
        with open(os.path.join(out_dir, 'observations.json'), 'w') as f:
            json.dump(flags, f, indent=2)


def load_viz_image(path, input_shape):
    """Read an image file as (C, H, W) in [0, 1] at the model's input size"""
    channels, height, width = input_shape
    with Image.open(path) as img:
        img = img.convert('RGB' if channels == 3 else 'L')
        if img.size != (width, height):
            img = img.resize((width, height), Image.BILINEAR)
        array = np.asarray(img, dtype=np.float64) / 255.0
    return array.transpose(2, 0, 1) if array.ndim == 3 else array[None]


def cmd_viz(args, config, out_dir):
    path = args.checkpoint or default_checkpoint(config)
    model, _ = load_checkpoint(path)
    if args.kind == 'saliency':
        image = load_viz_image(args.image, model.branch_c.input_shape)
        result = saliency_map(model, image, args.modality)
        stem = f"saliency_{args.modality}_{os.path.splitext(os.path.basename(args.image))[0]}"
        write_saliency(result, image, out_dir, stem)
    else:
        viz = dict(config['viz'])
        for key in ('network', 'neuron', 'steps', 'step_size', 'jitter'):
            if getattr(args, key, None) is not None:
                viz[key] = getattr(args, key)
        cfg = VizConfig.from_config(viz)
        trace = activation_maximize(model, cfg)
        write_activation(trace, out_dir, f"actmax_{cfg.network}_{cfg.neuron}")
        with open(os.path.join(out_dir, f"actmax_{cfg.network}_{cfg.neuron}_trace.json"), 'w') as f:
            json.dump({'activations': trace.activations,
                       'non_decreasing_fraction': trace.non_decreasing_fraction()}, f, indent=2)


def cmd_lint(args, config, out_dir):
    report = lint_ledger(args.root or os.path.dirname(os.path.abspath(__file__)))
    print(json.dumps(report.to_dict(), indent=2))
    if not report.passed:
        raise ConfigError(f"ledger lint failed with {len(report.failures)} problem(s)")


COMMANDS = {
    'gen': cmd_gen,
    'train': cmd_train,
    'eval': cmd_eval,
    'ablate': cmd_ablate,
    'viz': cmd_viz,
    'lint': cmd_lint,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='Run config JSON (schema_version 1)')
    common.add_argument('--preset', help='Named preset: overfit, generalization, vgg16')
    common.add_argument('--seed', type=int, help='Global seed; also the synthetic dataset seed')
    common.add_argument('--jobs', type=int, help='Worker processes for ablation cells')
    common.add_argument('--force', action='store_true', help='Overwrite existing outputs')
    common.add_argument('--output', help='Output directory root')

    parser = argparse.ArgumentParser(description='Coupled caricature/visual verification and identification')
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('gen', parents=[common], help='Generate the synthetic dataset')

    train = sub.add_parser('train', parents=[common], help='Train a model')
    train.add_argument('--epochs', type=int, help='Override train.epochs')

    evaluate = sub.add_parser('eval', parents=[common], help='Evaluate a checkpoint')
    evaluate.add_argument('--checkpoint', help='Checkpoint .npz (default: <output>/train/checkpoints/best.npz)')
    evaluate.add_argument('--unseen', action='store_true', help='Unseen identities only, verification only')
    evaluate.add_argument('--partition', choices=('train', 'val', 'test'), default='test')

    ablate = sub.add_parser('ablate', parents=[common], help='Ablation matrix, Lambda sweep, baselines')
    ablate.add_argument('--matrix', choices=MATRIX_NAMES,
                        help='Loss-weight and architectural ablation rows (reference, alias paper)')
    ablate.add_argument('--lambda-sweep', action='store_true', help='Sweep ablation.lambda_grid')
    ablate.add_argument('--baselines', action='store_true', help='Coupled and feature baselines')
    ablate.add_argument('--seeds', type=int, nargs='+', help='Override ablation.seeds')

    viz = sub.add_parser('viz', parents=[common], help='Saliency maps and activation maximization')
    viz.add_argument('kind', choices=('saliency', 'actmax'))
    viz.add_argument('--checkpoint', help='Checkpoint .npz (default: <output>/train/checkpoints/best.npz)')
    viz.add_argument('--image', help='Input image for saliency')
    viz.add_argument('--modality', choices=MODALITIES, default='caricature')
    viz.add_argument('--network', choices=('cari_id', 'visual_id'))
    viz.add_argument('--neuron', type=int)
    viz.add_argument('--steps', type=int)
    viz.add_argument('--step-size', dest='step_size', type=float)
    viz.add_argument('--jitter', type=int)

    lint = sub.add_parser('lint', parents=[common], help='Check the interpretation ledger')
    lint.add_argument('--root', help='Repository root (default: this file\'s directory)')
    return parser


def main(argv=None):
    """Main function to process command line arguments and execute the command"""
    args = build_parser().parse_args(argv)
    if args.command == 'viz' and args.kind == 'saliency' and not args.image:
        print("viz saliency requires --image", file=sys.stderr)
        return 1

    try:
        Config.validate_required_config()
        overrides = {'seed': args.seed, 'output_dir': args.output}
        if args.command == 'train':
            overrides['train.epochs'] = args.epochs
        config = load_run_config(args.config, overrides, args.preset)
        if args.seed is not None and config['dataset'].get('synth'):
            config['dataset']['synth']['seed'] = args.seed
    except (ConfigError, ValueError) as e:
        logging.basicConfig(format=LOG_FORMAT.replace(' - %(run_id)s', ''))
        logging.getLogger(__name__).error(f"Configuration error: {str(e)}")
        return 1

    out_dir = os.path.join(config['output_dir'], args.command)
    os.makedirs(out_dir, exist_ok=True)
    RUN_CONTEXT.update({'command': args.command, 'run_id': f"{args.command}-{datetime.now():%Y%m%d-%H%M%S}"})
    configure_logging(out_dir)
    logger.info(f"Starting {args.command} (output: {out_dir})")

    try:
        write_effective_config(config, out_dir)
        COMMANDS[args.command](args, config, out_dir)
    except Exception as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {str(e)}")
        logger.debug("Traceback", exc_info=True)
        return 1

    logger.info(f"{args.command} completed successfully")
    return 0


if __name__ == '__main__':
    sys.exit(main())
