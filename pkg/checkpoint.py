"""
Checkpoint storage for CaVINet models
A checkpoint is an uncompressed .npz container: a format marker, the JSON config
the model was built from, and one array per named parameter (dtype and shape
travel with the array, so loading is bit-exact)
"""
import errno
import logging
import os

import numpy as np
import simplejson as json

from model import CaVINet

logger = logging.getLogger(__name__)

FORMAT_VERSION = 'cavinet-checkpoint/1'
FORMAT_KEY = '__format__'
CONFIG_KEY = '__config__'
PARAM_PREFIX = 'param:'


class CheckpointError(IOError):
    """Checkpoint could not be written or read"""


class CheckpointStore:
    def __init__(self, directory):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)
        logger.debug(f"Checkpoint store at {directory}")

    def path_for(self, tag):
        return os.path.join(self.directory, f"{tag}.npz")

    def save(self, model, tag, metadata=None):
        """Write model parameters and config under tag; returns the file path"""
        path = self.path_for(tag)
        return save_checkpoint(model, path, metadata)


def save_checkpoint(model, path, metadata=None):
    config = model.describe()
    config['metadata'] = metadata or {}
    arrays = {FORMAT_KEY: np.array(FORMAT_VERSION), CONFIG_KEY: np.array(json.dumps(config, sort_keys=True))}
    for name, array in model.named_parameters():
        arrays[PARAM_PREFIX + name] = array

    tmp_path = f"{path}.tmp"
    try:
        with open(tmp_path, 'wb') as f:
            np.savez(f, **arrays)
        os.replace(tmp_path, path)
    except OSError as e:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        if e.errno == errno.ENOSPC:
            logger.error(f"Disk full while writing checkpoint {path}")
        else:
            logger.error(f"Failed to write checkpoint {path}: {str(e)}")
        raise CheckpointError(f"Failed to write checkpoint {path}: {e}") from e

    logger.info(f"Checkpoint written: {path}")
    return path


def read_checkpoint(path):
    """(config dict, {name: array}) from a checkpoint file"""
    if not os.path.exists(path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            version = str(data[FORMAT_KEY])
            if version != FORMAT_VERSION:
                raise CheckpointError(f"Unsupported checkpoint format '{version}' in {path}")
            config = json.loads(str(data[CONFIG_KEY]))
            state = {key[len(PARAM_PREFIX):]: data[key] for key in data.files if key.startswith(PARAM_PREFIX)}
    except (OSError, ValueError, KeyError) as e:
        logger.error(f"Failed to read checkpoint {path}: {str(e)}")
        raise CheckpointError(f"Failed to read checkpoint {path}: {e}") from e
    return config, state


def load_checkpoint(path):
    """Rebuild the model described in the checkpoint and load its parameters"""
    config, state = read_checkpoint(path)
    model = CaVINet(config['model'], config['train'], config['n_identities'], seed=config.get('seed', 0))
    model.load_state(state)
    logger.info(f"Checkpoint loaded: {path} ({len(state)} tensors)")
    return model, config.get('metadata', {})
