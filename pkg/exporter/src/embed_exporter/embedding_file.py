"""Binary embedding file format shared with the fusion toolkit.

Layout: 4-byte magic ``MFE1``, little-endian uint32 dimension, then the
float32 payload. This module is self-contained so the exporter has no import
dependency on the toolkit; the toolkit's own reader validates the files in
the round-trip tests.
"""

from __future__ import annotations

import struct

import numpy as np

EMBEDDING_MAGIC = b"MFE1"
EMBEDDING_DIM = 512  # ResNet-18 penultimate layer


class EmbeddingFileError(ValueError):
    pass


def write_embedding(path, vector: np.ndarray) -> None:
    v = np.ascontiguousarray(vector, dtype="<f4").reshape(-1)
    if not np.isfinite(v).all():
        raise EmbeddingFileError("embedding contains non-finite values")
    with open(str(path), "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<I", v.size))
        fh.write(v.tobytes())


def read_embedding(path) -> np.ndarray:
    with open(str(path), "rb") as fh:
        raw = fh.read()
    if raw[:4] != EMBEDDING_MAGIC:
        raise EmbeddingFileError(f"{path}: bad magic {raw[:4]!r}")
    (dim,) = struct.unpack("<I", raw[4:8])
    payload = raw[8:]
    if len(payload) != 4 * dim:
        raise EmbeddingFileError(f"{path}: truncated payload")
    v = np.frombuffer(payload, dtype="<f4")
    if not np.isfinite(v).all():
        raise EmbeddingFileError(f"{path}: non-finite embedding value")
    return np.array(v, dtype=np.float32)
