"""
Run logging for training progress tracking
Epoch records stream to a JSON-lines file; the summary is written once at the end
"""
import logging
import os
from datetime import datetime

import simplejson as json

logger = logging.getLogger(__name__)

EPOCH_FIELDS = (
    'epoch', 'loss', 'train_verification', 'val_verification',
    'train_rank1_caricature', 'train_rank1_visual', 'val_rank1_caricature', 'val_rank1_visual',
    'learning_rate', 'wall_time',
)
ACCURACY_FIELDS = EPOCH_FIELDS[2:8]


class RunLog:
    def __init__(self, out_dir=None, config=None):
        self.out_dir = out_dir
        self.config = config or {}
        self.records = []
        self.started_at = datetime.now()
        self.summary = {}
        self.lines_path = os.path.join(out_dir, 'run_log.jsonl') if out_dir else None
        self.summary_path = os.path.join(out_dir, 'run_summary.json') if out_dir else None
        if self.lines_path:
            os.makedirs(out_dir, exist_ok=True)
            # truncate any previous run in this directory
            open(self.lines_path, 'w').close()

    def record_epoch(self, epoch, loss, learning_rate, wall_time, **metrics):
        """Append one epoch; epochs must increase and accuracies stay in [0, 1]"""
        if self.records and epoch <= self.records[-1]['epoch']:
            raise ValueError(f"epoch {epoch} does not follow {self.records[-1]['epoch']}")
        record = {name: None for name in EPOCH_FIELDS}
        record.update({'epoch': int(epoch), 'loss': loss, 'learning_rate': float(learning_rate),
                       'wall_time': float(wall_time)})
        for name, value in metrics.items():
            if name not in EPOCH_FIELDS:
                raise ValueError(f"unknown run log field '{name}'")
            if value is not None and name in ACCURACY_FIELDS and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
            record[name] = None if value is None else float(value)
        self.records.append(record)

        if self.lines_path:
            with open(self.lines_path, 'a') as f:
                f.write(json.dumps(record, ignore_nan=True, sort_keys=True) + '\n')
        logger.info(f"Epoch {epoch}: loss={loss.get('total', float('nan')):.4f} "
                    f"val_ver={_fmt(record['val_verification'])} lr={learning_rate:.3e}")
        return record

    def losses(self):
        return [record['loss']['total'] for record in self.records]

    def best(self, metric='val_verification'):
        scored = [r for r in self.records if r.get(metric) is not None]
        return max(scored, key=lambda r: r[metric]) if scored else None

    def finish(self, **summary):
        elapsed = (datetime.now() - self.started_at).total_seconds()
        self.summary = {
            'epochs': len(self.records),
            'started_at': self.started_at.isoformat(),
            'elapsed_seconds': elapsed,
            'final': self.records[-1] if self.records else None,
            'best': self.best(),
        }
        self.summary.update(summary)
        if self.summary_path:
            with open(self.summary_path, 'w') as f:
                json.dump(self.summary, f, indent=2, ignore_nan=True, sort_keys=True)
            logger.info(f"Run summary written to {self.summary_path}")
        return self.summary

    @staticmethod
    def load(path):
        """Epoch records from a run_log.jsonl file"""
        with open(path) as f:
            return [json.loads(line) for line in f if line.strip()]


def _fmt(value):
    return 'n/a' if value is None else f"{value:.4f}"
