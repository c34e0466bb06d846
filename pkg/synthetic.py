"""
Deterministic synthetic caricature/visual dataset
Each identity is a composition of colored glyphs placed by a seeded hash of its
name. Visual images are the prototype with mild jitter and noise; caricatures add
a smooth control-point warp, one exaggerated glyph and a palette shift.
"""
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np
import simplejson as json
from PIL import Image, ImageDraw
from scipy import ndimage

from config import ConfigError
from dataset import DatasetManifest, ImageRecord, save_image, validate_manifest, write_manifest
from model import CARICATURE, VISUAL
from seeding import derive_rng

logger = logging.getLogger(__name__)

GLYPH_KINDS = ('ellipse', 'square', 'triangle', 'cross')
GLYPHS_PER_IDENTITY = 4
MIN_IMAGE_SIZE = 16
BACKGROUND = (0.85, 0.85, 0.85)
SPEC_FILE = 'synth_spec.json'

INTERPRETATIONS = (
    'synthetic-stand-in',
)


@dataclass(frozen=True)
class SynthSpec:
    identities: int = 10
    images_per_identity: int = 12
    image_size: int = 32
    distortion: float = 0.6
    seed: int = 0
    root: str = 'data/synthetic'

    @classmethod
    def from_config(cls, synth):
        return cls(identities=int(synth['identities']), images_per_identity=int(synth['images_per_identity']),
                   image_size=int(synth['image_size']), distortion=float(synth['distortion']),
                   seed=int(synth['seed']), root=synth['root'])

    def validate(self):
        if self.identities < 2:
            raise ConfigError(f"synthetic dataset needs >= 2 identities (got {self.identities})")
        if self.images_per_identity < 1:
            raise ConfigError("images_per_identity must be >= 1")
        if self.image_size < MIN_IMAGE_SIZE:
            raise ConfigError(f"image_size {self.image_size} too small to place glyphs (minimum {MIN_IMAGE_SIZE})")
        if not 0.0 <= self.distortion <= 1.0:
            raise ConfigError(f"distortion must be in [0, 1] (got {self.distortion})")


@dataclass(frozen=True)
class Glyph:
    kind: str
    center: tuple
    size: float
    color: tuple

    def signature(self):
        return (self.kind, tuple(round(c, 6) for c in self.center), round(self.size, 6),
                tuple(round(c, 6) for c in self.color))


def identity_name(index):
    return f"id{index:03d}"


def prototype_glyphs(spec, identity):
    """Glyph composition identifying one identity; centers and sizes are fractions of the image side"""
    rng = derive_rng(spec.seed, 'synth', 'prototype', identity)
    glyphs = []
    for _ in range(GLYPHS_PER_IDENTITY):
        glyphs.append(Glyph(
            kind=GLYPH_KINDS[rng.integers(len(GLYPH_KINDS))],
            center=tuple(rng.uniform(0.25, 0.75, size=2)),
            size=float(rng.uniform(0.12, 0.24)),
            color=tuple(rng.uniform(0.0, 0.8, size=3)),
        ))
    return glyphs


def render(glyphs, image_size):
    """Draw glyphs onto a light background; returns float (3, H, W) in [0, 1]"""
    canvas = Image.new('RGB', (image_size, image_size), tuple(int(255 * c) for c in BACKGROUND))
    draw = ImageDraw.Draw(canvas)
    for glyph in glyphs:
        cy, cx = glyph.center[0] * image_size, glyph.center[1] * image_size
        r = glyph.size * image_size / 2.0
        fill = tuple(int(round(255 * np.clip(c, 0.0, 1.0))) for c in glyph.color)
        if glyph.kind == 'ellipse':
            draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill)
        elif glyph.kind == 'square':
            draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=fill)
        elif glyph.kind == 'triangle':
            draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=fill)
        else:
            w = max(r / 3.0, 1.0)
            draw.rectangle([cx - r, cy - w, cx + r, cy + w], fill=fill)
            draw.rectangle([cx - w, cy - r, cx + w, cy + r], fill=fill)
    array = np.asarray(canvas, dtype=np.float64) / 255.0
    return array.transpose(2, 0, 1)


def jitter_glyphs(glyphs, rng, position=0.03, scale=0.05):
    return [Glyph(g.kind, tuple(np.asarray(g.center) + rng.uniform(-position, position, size=2)),
                  g.size * (1.0 + rng.uniform(-scale, scale)), g.color) for g in glyphs]


def smooth_warp(image, rng, strength, grid=4):
    """Displace pixels by a bicubically upsampled grid of random control-point offsets"""
    c, h, w = image.shape
    displacement = rng.normal(0.0, strength * h * 0.06, size=(2, grid, grid))
    dy = ndimage.zoom(displacement[0], (h / grid, w / grid), order=3, mode='nearest')[:h, :w]
    dx = ndimage.zoom(displacement[1], (h / grid, w / grid), order=3, mode='nearest')[:h, :w]
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing='ij')
    coords = np.stack([yy + dy, xx + dx])
    return np.stack([ndimage.map_coordinates(image[ch], coords, order=1, mode='nearest') for ch in range(c)])


def visual_image(spec, identity, index):
    rng = derive_rng(spec.seed, 'synth', VISUAL, identity, index)
    image = render(jitter_glyphs(prototype_glyphs(spec, identity), rng), spec.image_size)
    return np.clip(image + rng.normal(0.0, 0.02, size=image.shape), 0.0, 1.0)


def caricature_image(spec, identity, index):
    rng = derive_rng(spec.seed, 'synth', CARICATURE, identity, index)
    glyphs = jitter_glyphs(prototype_glyphs(spec, identity), rng)
    exaggerated = rng.integers(len(glyphs))
    palette_shift = rng.uniform(-0.25, 0.25, size=3) * spec.distortion
    styled = []
    for i, g in enumerate(glyphs):
        size = g.size * (1.0 + spec.distortion * rng.uniform(0.5, 1.0)) if i == exaggerated else g.size
        styled.append(Glyph(g.kind, g.center, size, tuple(np.clip(np.asarray(g.color) + palette_shift, 0.0, 1.0))))
    image = render(styled, spec.image_size)
    image = smooth_warp(image, rng, spec.distortion)
    return np.clip(image + rng.normal(0.0, 0.02, size=image.shape), 0.0, 1.0)


def generate_synthetic(spec):
    """Write every image plus manifest.csv under spec.root and return the manifest"""
    spec.validate()
    os.makedirs(spec.root, exist_ok=True)
    identities = [identity_name(i) for i in range(spec.identities)]
    records = []
    for identity in identities:
        os.makedirs(os.path.join(spec.root, identity), exist_ok=True)
        for index in range(spec.images_per_identity):
            for modality, make in ((CARICATURE, caricature_image), (VISUAL, visual_image)):
                rel_path = f"{identity}/{modality}_{index:03d}.png"
                save_image(make(spec, identity, index), os.path.join(spec.root, rel_path))
                records.append(ImageRecord(identity, modality, rel_path))

    manifest = DatasetManifest(identities=[(i, i) for i in identities], records=records,
                               root=os.path.abspath(spec.root))
    validate_manifest(manifest)
    write_manifest(manifest, os.path.join(spec.root, 'manifest.csv'))
    with open(os.path.join(spec.root, SPEC_FILE), 'w') as f:
        json.dump(spec_record(spec), f, indent=2, sort_keys=True)
    logger.info(f"Synthetic dataset at {spec.root}: {spec.identities} identities, "
                f"N_c={manifest.n_caricature}, N_v={manifest.n_visual}")
    return manifest


def spec_record(spec):
    """The generation parameters that determine a dataset's contents (root excluded)"""
    record = asdict(spec)
    record.pop('root')
    return record


def check_synthetic(spec):
    """Raise ConfigError when the dataset under spec.root was generated from other parameters"""
    path = os.path.join(spec.root, SPEC_FILE)
    if not os.path.exists(path):
        logger.warning(f"{spec.root} has no {SPEC_FILE}; cannot confirm it matches the configured dataset")
        return
    with open(path) as f:
        recorded = json.load(f)
    expected = spec_record(spec)
    changed = {key: (recorded.get(key), value) for key, value in expected.items() if recorded.get(key) != value}
    if changed:
        details = ', '.join(f"{key}: on disk {old}, configured {new}" for key, (old, new) in sorted(changed.items()))
        raise ConfigError(f"synthetic dataset at {spec.root} does not match the config ({details}); "
                          f"rerun 'gen --force'")


def nearest_prototype_accuracy(split, store, partition='test'):
    """
    Rank-1 caricature identification of a raw-pixel nearest-class-mean classifier

    Class means come from each seen identity's training visual images
    """
    train = [r for r in split.records('train') if r.modality == VISUAL]
    means = {}
    for identity in split.seen:
        images = [store.get(r) for r in train if r.identity == identity]
        means[identity] = np.mean(images, axis=0).ravel()
    names = list(means)
    centers = np.stack([means[name] for name in names])
    queries = [r for r in split.records(partition) if r.modality == CARICATURE]
    if not queries:
        return float('nan')
    correct = 0
    for record in queries:
        distances = np.sum((centers - store.get(record).ravel()) ** 2, axis=1)
        correct += int(names[int(np.argmin(distances))] == record.identity)
    return correct / len(queries)
