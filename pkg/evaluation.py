"""
Evaluation: cross-modal verification, rank-1 identification and confusion export
"""
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import simplejson as json
from PIL import Image, ImageDraw

from dataset import identity_images, sample_pairs
from model import CARICATURE, MODALITIES, VISUAL
from numerics import LabelError
from seeding import derive_seed

logger = logging.getLogger(__name__)

MONTAGE_SEPARATOR = 4
CAPTION_HEIGHT = 12
CELLS = ('tp', 'tn', 'fp', 'fn')

# Full-scale reference results, shown beside desk runs and never asserted
REFERENCE_VERIFICATION = {'seen': 0.9106, 'unseen': 0.75}
REFERENCE_RANK1 = {VISUAL: 0.9450, CARICATURE: 0.8509}
REFERENCE_WEIGHT_ROWS = {
    '55:30:15': (0.9106, 0.9450, 0.8509),
    '50:25:25': (0.8631, 0.9334, 0.8102),
    '40:35:25': (0.8346, 0.8096, 0.8402),
    '33:33:33': (0.7943, 0.9274, 0.8264),
}
REFERENCE_VARIANT_ROWS = {
    'cavinet': (0.9106, 0.9450, 0.8509),
    'tied_weights': (0.8432, 0.8516, 0.8602),
    'without_ortho': (0.8601, 0.9346, 0.8043),
    'shared_features': (0.8859, 0.9056, 0.8123),
    'visual_features': (0.8858, 0.9216, 0.8336),
}

INTERPRETATIONS = (
    'threshold-ties-positive',
    'argmax-lowest-index',
    'unseen-protocol-balance',
)


class EmptyStreamError(ValueError):
    """Evaluation was asked to score an empty stream"""


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self):
        if self.total == 0:
            raise EmptyStreamError("no pairs were evaluated")
        return (self.tp + self.tn) / self.total

    def to_dict(self):
        return asdict(self)


@dataclass
class VerificationResult:
    accuracy: float
    counts: ConfusionCounts
    scores: np.ndarray
    labels: np.ndarray
    threshold: float
    positive_fraction: float


@dataclass
class EvalReport:
    verification_acc_seen: float = None
    verification_acc_unseen: float = None
    rank1_cari: float = None
    rank1_visual: float = None
    confusion_seen: dict = field(default_factory=dict)
    confusion_unseen: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    protocol: str = 'seen_and_unseen'

    def to_dict(self):
        """Report fields for the protocol that ran; unseen_only carries no seen or identification fields"""
        if self.protocol == 'unseen_only':
            return {
                'protocol': self.protocol,
                'verification_acc_unseen': self.verification_acc_unseen,
                'confusion_unseen': self.confusion_unseen,
                'metadata': self.metadata,
                'reference': {'verification': {'unseen': REFERENCE_VERIFICATION['unseen']}},
            }
        return {
            'protocol': self.protocol,
            'verification_acc_seen': self.verification_acc_seen,
            'verification_acc_unseen': self.verification_acc_unseen,
            'rank1_cari': self.rank1_cari,
            'rank1_visual': self.rank1_visual,
            'confusion_seen': self.confusion_seen,
            'confusion_unseen': self.confusion_unseen,
            'metadata': self.metadata,
            'reference': {'verification': REFERENCE_VERIFICATION, 'rank1': REFERENCE_RANK1},
        }

    def save(self, path):
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, ignore_nan=True, sort_keys=True)
        logger.info(f"Eval report written to {path}")
        return path


def batched(items, batch_size):
    batch = []
    for item in items:
        batch.append(item)
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch


def verification_scores(model, pairs, batch_size=64):
    """(scores, labels, pairs) in stream order; only the verification path is evaluated"""
    scores, labels, kept = [], [], []
    for batch in batched(pairs, batch_size):
        cari = np.stack([p.caricature for p in batch])
        vis = np.stack([p.visual for p in batch])
        scores.append(np.asarray(model.verify(cari, vis), dtype=np.float64))
        labels += [p.labels.y_ve for p in batch]
        kept += batch
    if not kept:
        raise EmptyStreamError("verification stream is empty")
    return np.concatenate(scores), np.array(labels, dtype=np.int64), kept


def confusion_from_scores(scores, labels, threshold=0.5):
    predicted = scores >= threshold
    actual = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(predicted & actual)),
        tn=int(np.sum(~predicted & ~actual)),
        fp=int(np.sum(predicted & ~actual)),
        fn=int(np.sum(~predicted & actual)),
    )


def evaluate_verification(model, pairs, threshold=0.5, batch_size=64):
    """Accuracy and confusion counts; a score equal to the threshold counts as positive"""
    scores, labels, _ = verification_scores(model, pairs, batch_size)
    counts = confusion_from_scores(scores, labels, threshold)
    return VerificationResult(accuracy=counts.accuracy, counts=counts, scores=scores, labels=labels,
                              threshold=threshold, positive_fraction=float(np.mean(labels)))


def evaluate_identification(model, images, labels, modality, batch_size=64):
    """Rank-1 accuracy; argmax ties resolve to the lowest identity index"""
    if modality not in MODALITIES:
        raise ValueError(f"Unknown modality '{modality}'")
    if images is None or len(images) == 0:
        raise EmptyStreamError(f"{modality} identification stream is empty")
    labels = np.asarray(labels)
    unseen = labels[(labels < 0) | (labels >= model.n_identities)]
    if unseen.size:
        raise LabelError(f"identification is defined over seen identities only; got labels {sorted(set(unseen.tolist()))}")
    predictions = []
    for start in range(0, len(images), batch_size):
        logits = model.identify(images[start:start + batch_size], modality, logits=True)
        predictions.append(np.argmax(logits, axis=1))
    predictions = np.concatenate(predictions)
    return float(np.mean(predictions == labels))


def export_confusions(model, pairs, k, out_dir, threshold=0.5, batch_size=64):
    """
    Write up to k side-by-side montages per confusion cell under out_dir/{tp,tn,fp,fn}/

    Returns {'counts': ConfusionCounts, 'files': {cell: [paths]}}
    """
    if k < 1:
        raise ValueError(f"k must be >= 1 (got {k})")
    scores, labels, kept = verification_scores(model, pairs, batch_size)
    counts = confusion_from_scores(scores, labels, threshold)
    files = {cell: [] for cell in CELLS}
    for cell in CELLS:
        os.makedirs(os.path.join(out_dir, cell), exist_ok=True)

    for score, label, pair in zip(scores, labels, kept):
        positive = score >= threshold
        cell = ('t' if positive == bool(label) else 'f') + ('p' if positive else 'n')
        if len(files[cell]) >= k:
            continue
        path = os.path.join(out_dir, cell, f"{cell}_{len(files[cell]):03d}.png")
        montage(pair.caricature, pair.visual, f"{score:.3f}").save(path)
        files[cell].append(path)

    for cell in CELLS:
        if not files[cell]:
            with open(os.path.join(out_dir, cell, 'EMPTY.txt'), 'w') as f:
                f.write(f"No {cell.upper()} pairs among {counts.total} evaluated at threshold {threshold}\n")
            logger.info(f"Confusion cell {cell} is empty")
    logger.info(f"Confusion examples written to {out_dir}: " + ", ".join(f"{c}={len(files[c])}" for c in CELLS))
    return {'counts': counts, 'files': files}


def to_pil(image):
    array = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    array = np.round(array.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    if array.shape[2] == 1:
        return Image.fromarray(array[:, :, 0]).convert('RGB')
    return Image.fromarray(array)


def montage(cari, vis, caption):
    """Caricature | 4 px separator | visual, with the caption in a strip underneath"""
    h, w = cari.shape[1], cari.shape[2]
    canvas = Image.new('RGB', (2 * w + MONTAGE_SEPARATOR, h + CAPTION_HEIGHT), (255, 255, 255))
    canvas.paste(to_pil(cari), (0, 0))
    canvas.paste(to_pil(vis), (w + MONTAGE_SEPARATOR, 0))
    ImageDraw.Draw(canvas).text((1, h), caption, fill=(0, 0, 0))
    return canvas


# (count key, stream names) per partition; 'val' and 'train' match the streams the trainer scores
PAIR_STREAMS = {
    'train': (('train', 'val_pairs'), ('train', 'train_eval_pairs')),
    'val': (('train', 'val_pairs'), ('train', 'val_pairs')),
    'test': (('eval', 'test_pairs'), ('eval', 'test_pairs')),
    'unseen': (('eval', 'unseen_pairs'), ('eval', 'unseen_pairs')),
}


def evaluation_pairs(split, store, config, partition):
    """Deterministic, un-augmented pair list used to score one partition"""
    (section, key), names = PAIR_STREAMS[partition]
    return list(sample_pairs(split.records(partition), config[section][key], config['dataset']['positive_fraction'],
                             derive_seed(config['seed'], *names), split.label_index, store))


def build_report(model, split, store, config, partition='test', unseen_only=False, out_dir=None):
    """
    EvalReport for one seen partition plus, when present, the unseen identities

    Unseen pairs go through the verification path only. unseen_only skips the seen
    partition and identification entirely. With out_dir, confusion montages of the
    seen pairs are exported under out_dir/confusions.
    """
    threshold = config['eval']['threshold']
    report = EvalReport(protocol='unseen_only' if unseen_only else 'seen_and_unseen',
                        metadata={'threshold': threshold, 'positive_fraction': config['dataset']['positive_fraction'],
                                  'seed': config['seed'], 'partition': 'unseen' if unseen_only else partition,
                                  'n_seen': split.n_seen, 'n_unseen': len(split.unseen)})

    if not unseen_only:
        seen_pairs = evaluation_pairs(split, store, config, partition)
        seen = evaluate_verification(model, seen_pairs, threshold)
        report.verification_acc_seen = seen.accuracy
        report.confusion_seen = seen.counts.to_dict()
        report.metadata['seen_pairs'] = seen.counts.total
        if not model.verification_only:
            report.rank1_cari = evaluate_identification(
                model, *identity_images(split, partition, CARICATURE, store), CARICATURE)
            report.rank1_visual = evaluate_identification(
                model, *identity_images(split, partition, VISUAL, store), VISUAL)
        if out_dir:
            export_confusions(model, seen_pairs, config['eval']['confusions_per_cell'],
                              os.path.join(out_dir, 'confusions'), threshold)

    if split.unseen:
        unseen = evaluate_verification(model, evaluation_pairs(split, store, config, 'unseen'), threshold)
        report.verification_acc_unseen = unseen.accuracy
        report.confusion_unseen = unseen.counts.to_dict()
        report.metadata['unseen_pairs'] = unseen.counts.total
        report.metadata['unseen_positive_fraction'] = unseen.positive_fraction
    elif unseen_only:
        raise EmptyStreamError("split has no unseen identities")

    logger.info(f"Evaluation: verification seen={_fmt(report.verification_acc_seen)} "
                f"unseen={_fmt(report.verification_acc_unseen)} rank1 cari={_fmt(report.rank1_cari)} "
                f"visual={_fmt(report.rank1_visual)}")
    return report


def _fmt(value):
    return 'n/a' if value is None else f"{value:.4f}"
