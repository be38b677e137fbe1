"""Byte-level corpus handling.

The tokenizer is the identity over bytes (ids 0..255) with id 256 reserved
as a BOS marker, so vocab_size 257 covers any input file with no external
tokenizer dependency. A small bundled text ships with the package for
self-contained runs; any byte file is accepted.
"""

from __future__ import annotations

import hashlib
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import InputError

BOS_ID = 256
VOCAB_SIZE = 257


def encode_bytes(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def load_corpus(path, flag: str = "corpus") -> np.ndarray:
    """Read a file as token ids; `flag` names the CLI option in errors."""
    p = Path(path)
    if not p.is_file():
        raise InputError(f"--{flag}: no such file: {p}")
    data = p.read_bytes()
    if not data:
        raise InputError(f"--{flag}: file is empty: {p}")
    return encode_bytes(data)


def corpus_sha256(tokens: np.ndarray) -> str:
    return hashlib.sha256(tokens.astype(np.uint8).tobytes()).hexdigest()


def default_corpus_path() -> Path:
    return Path(str(resources.files("layerprune").joinpath("data/corpus.txt")))
