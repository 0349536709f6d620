"""Parameter checkpoints.

A checkpoint is a single ``numpy.savez`` archive. Each parameter is stored under its dotted name as a little-endian
float64 array; the archive also holds a format-version header and a JSON record of the model configuration.
"""
import json
from logging import getLogger
from typing import Dict, Tuple

import numpy as np

from pcefusion.errors import DataError

logger = getLogger(__name__)

FORMAT_VERSION = 1
_VERSION_KEY = "__format_version__"
_META_KEY = "__meta__"


def save_checkpoint(path: str, state: Dict[str, np.ndarray], meta: dict) -> None:
    """Write parameters and a metadata record to ``path``.

    Args:
        path: An output file path. numpy appends ".npz" when the suffix is missing.
        state: A mapping from parameter names to arrays.
        meta: A JSON-serializable record, typically the model configuration and target statistics.
    """
    arrays = {name: np.asarray(array, dtype="<f8") for name, array in state.items()}
    arrays[_VERSION_KEY] = np.array([FORMAT_VERSION], dtype="<i8")
    arrays[_META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.debug(f"Saved {len(state)} parameters to {path}.")


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns:
        A tuple of the parameter mapping and the metadata record.
    """
    try:
        with np.load(path, allow_pickle=False) as archive:
            if _VERSION_KEY not in archive.files or _META_KEY not in archive.files:
                raise DataError(f"{path} is not a pcefusion checkpoint")
            version = int(archive[_VERSION_KEY][0])
            if version != FORMAT_VERSION:
                raise DataError(f"{path}: unsupported checkpoint format version {version}")
            meta = json.loads(str(archive[_META_KEY]))
            skip = {_VERSION_KEY, _META_KEY}
            state = {name: archive[name].astype(np.float64) for name in archive.files if name not in skip}
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}")
    logger.debug(f"Loaded {len(state)} parameters from {path}.")
    return state, meta
