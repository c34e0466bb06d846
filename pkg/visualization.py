"""
Activation maximization with a jitter prior and rectified saliency maps
"""
import logging
import os
from dataclasses import dataclass, field

import matplotlib
matplotlib.use('Agg')
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from model import CARICATURE, VISUAL  # noqa: E402
from seeding import derive_rng  # noqa: E402

logger = logging.getLogger(__name__)

NETWORK_MODALITY = {'cari_id': CARICATURE, 'visual_id': VISUAL}
OVERLAY_ALPHA = 0.5

INTERPRETATIONS = (
    'jitter-translate-untranslate',
    'rectified-saliency-source',
    'constant-map-normalization',
)


class VisualizationError(ArithmeticError):
    """Non-finite gradient during visualization"""


@dataclass
class VizConfig:
    network: str = 'cari_id'
    neuron: int = 0
    steps: int = 64
    step_size: float = 0.5
    jitter: int = 2
    seed: int = 0

    @classmethod
    def from_config(cls, viz):
        return cls(network=viz['network'], neuron=int(viz['neuron']), steps=int(viz['steps']),
                   step_size=float(viz['step_size']), jitter=int(viz['jitter']), seed=int(viz['seed']))

    @property
    def modality(self):
        return NETWORK_MODALITY[self.network]

    def validate(self, head_width=None):
        if self.network not in NETWORK_MODALITY:
            raise ValueError(f"network must be one of {', '.join(NETWORK_MODALITY)} (got {self.network})")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        if head_width is not None and not 0 <= self.neuron < head_width:
            raise ValueError(f"neuron {self.neuron} outside head width {head_width}")


@dataclass
class ActivationTrace:
    image: np.ndarray
    activations: list = field(default_factory=list)

    def non_decreasing_fraction(self):
        steps = np.diff(self.activations)
        return float(np.mean(steps >= 0)) if len(steps) else 1.0


@dataclass
class SaliencyResult:
    raw: np.ndarray
    heatmap: np.ndarray
    paths: list = field(default_factory=list)


def initial_image(model, seed):
    shape = model.branch_c.input_shape
    rng = derive_rng(seed, 'viz', 'init')
    return np.clip(0.5 + 0.01 * rng.standard_normal(shape), 0.0, 1.0)


def activation_maximize(model, cfg, init=None):
    """
    Gradient ascent on the input for one identification logit

    Each step rolls the image by a random offset of at most cfg.jitter pixels, takes
    the step, rolls back, then clamps to [0, 1]
    """
    cfg.validate(model.cari_head.out_dim)
    image = np.array(initial_image(model, cfg.seed) if init is None else init, dtype=np.float64)
    rng = derive_rng(cfg.seed, 'viz', 'jitter')
    trace = ActivationTrace(image=image)
    for step in range(cfg.steps):
        if cfg.jitter > 0:
            dy, dx = (int(v) for v in rng.integers(-cfg.jitter, cfg.jitter + 1, size=2))
        else:
            dy, dx = 0, 0
        shifted = np.roll(image, (dy, dx), axis=(1, 2))
        value, grad = model.logit_input_gradient(shifted[None], cfg.modality, cfg.neuron)
        grad = np.asarray(grad[0], dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            logger.error(f"Non-finite input gradient at activation maximization step {step}")
            raise VisualizationError(f"non-finite gradient at step {step}")
        trace.activations.append(float(value[0]))
        shifted = shifted + cfg.step_size * grad
        image = np.clip(np.roll(shifted, (-dy, -dx), axis=(1, 2)), 0.0, 1.0)

    final_value, _ = model.logit_input_gradient(image[None], cfg.modality, cfg.neuron)
    trace.activations.append(float(final_value[0]))
    trace.image = image
    logger.info(f"Activation maximization {cfg.network}[{cfg.neuron}]: {trace.activations[0]:.4f} -> "
                f"{trace.activations[-1]:.4f} over {cfg.steps} steps")
    return trace


def normalize_map(values):
    """Min-max scale to [0, 1]; a constant map becomes all zeros"""
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi == lo:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def saliency_map(model, image, modality, hook=None):
    """
    Rectified saliency of sum([F || G]) for one (C, H, W) image

    Every intermediate gradient is clamped at zero on the way back; the map is the
    per-pixel max over channels, returned both raw and min-max normalized
    """
    grad = model.rectified_feature_gradient(np.asarray(image)[None], modality, hook=hook)[0]
    raw = np.max(np.asarray(grad, dtype=np.float64), axis=0)
    return SaliencyResult(raw=raw, heatmap=normalize_map(raw))


def overlay(image, heatmap, alpha=OVERLAY_ALPHA):
    """Blend a colormapped heatmap over the (C, H, W) image"""
    base = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0).transpose(1, 2, 0)
    if base.shape[2] == 1:
        base = np.repeat(base, 3, axis=2)
    colored = matplotlib.colormaps['jet'](heatmap)[..., :3]
    blended = (1.0 - alpha) * base + alpha * colored
    return Image.fromarray(np.round(blended * 255.0).astype(np.uint8))


def write_saliency(result, image, out_dir, stem='saliency'):
    """Grayscale map plus overlay PNG; returns both paths"""
    os.makedirs(out_dir, exist_ok=True)
    map_path = os.path.join(out_dir, f"{stem}_map.png")
    overlay_path = os.path.join(out_dir, f"{stem}_overlay.png")
    Image.fromarray(np.round(result.heatmap * 255.0).astype(np.uint8)).save(map_path)
    overlay(image, result.heatmap).save(overlay_path)
    result.paths = [map_path, overlay_path]
    logger.info(f"Saliency written to {map_path} and {overlay_path}")
    return result.paths


def write_activation(trace, out_dir, stem='actmax'):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{stem}.png")
    array = np.round(np.clip(trace.image, 0.0, 1.0).transpose(1, 2, 0) * 255.0).astype(np.uint8)
    Image.fromarray(array[:, :, 0] if array.shape[2] == 1 else array).save(path)
    logger.info(f"Activation maximization image written to {path}")
    return path
