"""Bit-stable binary checkpoints.

Checkpoints are pickled dictionaries of numpy arrays and plain metadata;
identical state always serializes to identical bytes, so saved models
round-trip exactly and repeated runs can be compared by file digest.
"""

from __future__ import annotations

import hashlib
import pickle
from pathlib import Path


def save_checkpoint(state: dict, path: str | Path) -> None:
    Path(path).write_bytes(pickle.dumps(state, protocol=4))


def load_checkpoint(path: str | Path) -> dict:
    return pickle.loads(Path(path).read_bytes())


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
