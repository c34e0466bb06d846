"""
Dataset manifests, identity splits, cross-modal pair sampling and augmentation
"""
import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from config import ConfigError
from model import CARICATURE, MODALITIES, VISUAL, PairLabels
from seeding import derive_rng

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ['identity', 'modality', 'relative_path']
PARTITIONS = ('train', 'val', 'test')

# Upper bounds for augmentation draws
AUGMENT_CAPS = {'translate': 0.1, 'rotate': 15.0, 'noise': 0.05, 'flip': 1.0}
IDENTITY_POLICY = {'translate': 0.0, 'rotate': 0.0, 'noise': 0.0, 'flip': 0.0}

INTERPRETATIONS = (
    'manifest-format',
    'uniform-negative-sampling',
    'balanced-pairs',
    'augmentation-magnitudes',
    'toy-image-size',
)


class ManifestError(ValueError):
    """Manifest could not be parsed or failed validation"""

    def __init__(self, message, line=None, identity=None):
        self.line = line
        self.identity = identity
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SplitError(ValueError):
    """Identity cannot populate every partition"""


@dataclass(frozen=True)
class ImageRecord:
    identity: str
    modality: str
    path: str


@dataclass
class DatasetManifest:
    identities: list
    records: list
    root: str = ''

    @property
    def n_caricature(self):
        return sum(1 for r in self.records if r.modality == CARICATURE)

    @property
    def n_visual(self):
        return sum(1 for r in self.records if r.modality == VISUAL)

    def identity_ids(self):
        return [identity for identity, _ in self.identities]

    def records_for(self, identity, modality):
        return [r for r in self.records if r.identity == identity and r.modality == modality]

    def absolute_path(self, record):
        return os.path.join(self.root, record.path)


@dataclass
class SplitSpec:
    seen: list
    unseen: list
    partitions: dict
    unseen_records: list
    label_index: dict = field(default_factory=dict)

    @property
    def n_seen(self):
        return len(self.seen)

    def records(self, partition):
        if partition == 'unseen':
            return self.unseen_records
        return self.partitions[partition]


@dataclass
class CrossModalPair:
    caricature: np.ndarray
    visual: np.ndarray
    labels: PairLabels
    caricature_path: str = ''
    visual_path: str = ''


def load_manifest(path):
    """Parse and validate a manifest CSV (header, then identity,modality,relative_path rows)"""
    if not os.path.exists(path):
        raise ManifestError(f"Manifest not found: {path}")

    records = []
    seen_paths = set()
    identity_order = []
    with open(path, newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(f"expected header {','.join(MANIFEST_HEADER)}, got {header}", line=1)
        for line_number, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 3:
                raise ManifestError(f"expected 3 fields, got {len(row)}", line=line_number)
            identity, modality, rel_path = (cell.strip() for cell in row)
            if not identity:
                raise ManifestError("empty identity", line=line_number)
            if modality not in MODALITIES:
                raise ManifestError(f"invalid modality '{modality}'", line=line_number, identity=identity)
            if rel_path in seen_paths:
                raise ManifestError(f"duplicate path '{rel_path}'", line=line_number, identity=identity)
            seen_paths.add(rel_path)
            if identity not in identity_order:
                identity_order.append(identity)
            records.append(ImageRecord(identity, modality, rel_path))

    manifest = DatasetManifest(identities=[(i, i) for i in identity_order], records=records,
                               root=os.path.dirname(os.path.abspath(path)))
    validate_manifest(manifest)
    logger.info(f"Manifest {path}: {len(manifest.identities)} identities, "
                f"N_c={manifest.n_caricature}, N_v={manifest.n_visual}")
    return manifest


def validate_manifest(manifest):
    if not manifest.identities:
        raise ManifestError("manifest lists no identities")
    counts = {identity: {CARICATURE: 0, VISUAL: 0} for identity, _ in manifest.identities}
    for record in manifest.records:
        counts.setdefault(record.identity, {CARICATURE: 0, VISUAL: 0})[record.modality] += 1
    for identity, per_modality in counts.items():
        for modality, count in per_modality.items():
            if count == 0:
                raise ManifestError(f"identity '{identity}' has no {modality} images", identity=identity)
    return True


def write_manifest(manifest, path):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for record in manifest.records:
            writer.writerow([record.identity, record.modality, record.path])
    return path


def partition_sizes(n, ratios):
    """(train, val, test) counts with val/test at least 1 each"""
    n_val = max(1, int(round(ratios[1] * n)))
    n_test = max(1, int(round(ratios[2] * n)))
    return n - n_val - n_test, n_val, n_test


def make_splits(manifest, unseen_count, ratios=(0.7, 0.15, 0.15), seed=0):
    """Hold out unseen identities, then split each seen identity's images per modality"""
    identities = manifest.identity_ids()
    if not 0 <= unseen_count < len(identities):
        raise SplitError(f"unseen_count {unseen_count} must be in [0, {len(identities)})")
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must be three positive values summing to 1, got {ratios}")

    rng = derive_rng(seed, 'data', 'split', 'identities')
    order = rng.permutation(len(identities))
    unseen = sorted(identities[i] for i in order[:unseen_count])
    seen = sorted(identities[i] for i in order[unseen_count:])

    partitions = {name: [] for name in PARTITIONS}
    for identity in seen:
        for modality in MODALITIES:
            records = sorted(manifest.records_for(identity, modality), key=lambda r: r.path)
            n_train, n_val, n_test = partition_sizes(len(records), ratios)
            if n_train < 1:
                raise SplitError(f"identity '{identity}' has only {len(records)} {modality} images; "
                                 f"needs at least 3 to populate train/val/test")
            shuffled = [records[i] for i in derive_rng(seed, 'data', 'split', identity, modality).permutation(len(records))]
            partitions['train'] += shuffled[:n_train]
            partitions['val'] += shuffled[n_train:n_train + n_val]
            partitions['test'] += shuffled[n_train + n_val:]

    unseen_records = [r for r in manifest.records if r.identity in set(unseen)]
    label_index = {identity: i for i, identity in enumerate(seen)}
    for j, identity in enumerate(unseen):
        label_index[identity] = len(seen) + j

    split = SplitSpec(seen=seen, unseen=unseen, partitions=partitions, unseen_records=unseen_records,
                      label_index=label_index)
    logger.info(f"Split: {len(seen)} seen / {len(unseen)} unseen identities; "
                + ", ".join(f"{name}={len(partitions[name])}" for name in PARTITIONS))
    return split


class ImageStore:
    """Loads manifest images once as float (C, H, W) arrays in [0, 1]"""

    def __init__(self, manifest, dtype=np.float64):
        self.manifest = manifest
        self.dtype = dtype
        self._cache = {}

    def get(self, record):
        if record.path not in self._cache:
            self._cache[record.path] = load_image(self.manifest.absolute_path(record), self.dtype)
        return self._cache[record.path]


def load_image(path, dtype=np.float64):
    with Image.open(path) as img:
        array = np.asarray(img.convert('RGB'), dtype=np.float64) / 255.0
    return np.ascontiguousarray(array.transpose(2, 0, 1)).astype(dtype)


def save_image(array, path):
    """Write a (C, H, W) or (H, W) array in [0, 1] as PNG"""
    array = np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0)
    if array.ndim == 3:
        array = array.transpose(1, 2, 0)
        if array.shape[2] == 1:
            array = array[:, :, 0]
    Image.fromarray(np.round(array * 255.0).astype(np.uint8)).save(path)
    return path


def sample_pair_records(records, count, positive_fraction, seed, label_index):
    """
    Deterministic list of (cari_record, visual_record, PairLabels)

    Exactly round(count * positive_fraction) positives; negatives pair an ordered
    couple of distinct identities drawn uniformly
    """
    if not 0.0 <= positive_fraction <= 1.0:
        raise ConfigError(f"positive_fraction must be in [0, 1], got {positive_fraction}")
    by_identity = {}
    for record in records:
        by_identity.setdefault(record.identity, {CARICATURE: [], VISUAL: []})[record.modality].append(record)
    usable = sorted(i for i, m in by_identity.items() if m[CARICATURE] and m[VISUAL])
    if not usable:
        raise SplitError("partition has no identity with images in both modalities")
    n_pos = int(round(count * positive_fraction))
    if count - n_pos > 0 and len(usable) < 2:
        raise SplitError("negative pairs need at least two identities in the partition")

    rng = derive_rng(seed, 'data', 'pairs')
    is_positive = np.zeros(count, dtype=bool)
    is_positive[rng.permutation(count)[:n_pos]] = True

    pairs = []
    for positive in is_positive:
        if positive:
            identity_c = identity_v = usable[rng.integers(len(usable))]
        else:
            i = rng.integers(len(usable))
            j = rng.integers(len(usable) - 1)
            j = j + 1 if j >= i else j
            identity_c, identity_v = usable[i], usable[j]
        cari_pool = by_identity[identity_c][CARICATURE]
        vis_pool = by_identity[identity_v][VISUAL]
        cari = cari_pool[rng.integers(len(cari_pool))]
        vis = vis_pool[rng.integers(len(vis_pool))]
        y_ci, y_vi = label_index[identity_c], label_index[identity_v]
        pairs.append((cari, vis, PairLabels(int(y_ci == y_vi), y_ci, y_vi)))
    return pairs


def sample_pairs(records, count, positive_fraction, seed, label_index, store, augment_policy=None):
    """Stream of CrossModalPair; augmentation draws derive from (seed, pair index, modality)"""
    for index, (cari_rec, vis_rec, labels) in enumerate(
            sample_pair_records(records, count, positive_fraction, seed, label_index)):
        cari = store.get(cari_rec)
        vis = store.get(vis_rec)
        if augment_policy:
            cari = augment(cari, augment_policy, seed=(seed, index, CARICATURE))
            vis = augment(vis, augment_policy, seed=(seed, index, VISUAL))
        yield CrossModalPair(cari, vis, labels, cari_rec.path, vis_rec.path)


def validate_policy(policy):
    for key, cap in AUGMENT_CAPS.items():
        value = float(policy.get(key, 0.0))
        if not 0.0 <= value <= cap:
            raise ConfigError(f"augmentation {key}={value} outside [0, {cap}]")


def hflip(image):
    return image[..., ::-1].copy()


def augment(image, policy, seed):
    """
    Random translation, rotation, additive Gaussian noise and horizontal flip

    seed is an int or a tuple of names/ints naming the sub-stream; borders are
    filled by edge replication; an all-zero policy returns the input unchanged
    """
    validate_policy(policy)
    translate = float(policy.get('translate', 0.0))
    rotate = float(policy.get('rotate', 0.0))
    noise = float(policy.get('noise', 0.0))
    flip = float(policy.get('flip', 0.0))
    if translate == rotate == noise == flip == 0.0:
        return image

    names = seed if isinstance(seed, tuple) else (seed,)
    rng = derive_rng(names[0], 'data', 'augment', *names[1:])
    c, h, w = image.shape
    shift = rng.uniform(-translate, translate, size=2) * np.array([h, w])
    angle = np.deg2rad(rng.uniform(-rotate, rotate))
    sigma = rng.uniform(0.0, noise)
    do_flip = rng.random() < flip

    out = image
    if translate > 0 or rotate > 0:
        cos, sin = np.cos(angle), np.sin(angle)
        matrix = np.array([[cos, -sin], [sin, cos]])
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        offset = center - matrix @ center - matrix @ shift
        out = np.stack([ndimage.affine_transform(out[ch].astype(np.float64), matrix, offset=offset, order=1,
                                                 mode='nearest') for ch in range(c)])
    if sigma > 0:
        out = out + rng.normal(0.0, sigma, size=out.shape)
    if do_flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0)).astype(image.dtype)


def augmented_pair_count(base_pairs, copies_per_pair):
    """Effective pair count when every base pair is drawn with copies_per_pair augmentations"""
    return int(base_pairs) * int(copies_per_pair)


def identity_images(split, partition, modality, store):
    """(images, labels) for one modality of a seen partition"""
    records = [r for r in split.records(partition) if r.modality == modality]
    if not records:
        return None, None
    images = np.stack([store.get(r) for r in records])
    labels = np.array([split.label_index[r.identity] for r in records], dtype=np.int64)
    return images, labels
