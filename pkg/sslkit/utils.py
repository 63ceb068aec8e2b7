"""Utility functions: seed streams, hashing and batching."""

import hashlib
import json
from typing import Any, Iterator, List, Sequence

import numpy as np

# Stream identifiers for counter-based seeding. Each random decision in a run
# draws from rng_stream(seed, STREAM, epoch, batch, item, ...) so the result
# does not depend on which worker evaluates it or in what order.
STREAM_INIT = 1
STREAM_EPOCH_ORDER = 2
STREAM_AUGMENT = 3
STREAM_MIXUP = 4
STREAM_PROTOTYPES = 5
STREAM_PROBE = 6
STREAM_SYNTHETIC = 8


def rng_stream(seed: int, *counters: int) -> np.random.Generator:
    """Independent generator for the given root seed and counters."""
    entropy = [int(seed) & 0xFFFFFFFF, *(int(c) for c in counters)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def as_generator(seed: "int | Sequence[int] | np.random.Generator") -> np.random.Generator:
    """Accept an int seed, a counter tuple or a ready generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (int, np.integer)):
        return rng_stream(int(seed))
    head, *rest = seed
    return rng_stream(int(head), *rest)


def array_digest(*arrays: np.ndarray) -> str:
    """SHA-256 over dtype, shape and raw little-endian bytes of arrays."""
    digest = hashlib.sha256()
    for array in arrays:
        array = np.ascontiguousarray(array)
        digest.update(str(array.dtype.str).encode())
        digest.update(str(array.shape).encode())
        digest.update(array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes())
    return digest.hexdigest()


def file_sha256(path: Any) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def json_digest(payload: Any) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode()
    ).hexdigest()


def chunked(indices: Sequence[int], size: int) -> Iterator[List[int]]:
    """Consecutive batches of ``size`` (the last one may be shorter)."""
    for start in range(0, len(indices), size):
        yield list(indices[start:start + size])


def one_hot(labels: Sequence[int], n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def format_float(value: float) -> str:
    """Shortest repr that round-trips a float64 exactly."""
    return repr(float(value))
