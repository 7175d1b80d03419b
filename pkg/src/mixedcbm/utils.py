from __future__ import annotations

import hashlib
import json
import zlib
from pathlib import Path

import numpy as np


def rng_for(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for a named random substream of ``seed``."""
    return np.random.default_rng([int(seed), zlib.crc32(stream.encode())])


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)
