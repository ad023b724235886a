"""Counter-based random streams.

Every random quantity in the package is a pure function of a 64-bit key and
a counter, so results never depend on evaluation order or worker count.

The primitive is the splitmix64 finalizer::

    mix64(z) = splitmix64 output for state z
    uniform(key, j) = (mix64(key + (j + 1) * GOLDEN) >> 11) * 2**-53

Keys for named purposes are derived with BLAKE2b over a canonical text
encoding of ``(master_seed, *labels)``; per-sample keys are
``mix64(base + i * GOLDEN)``.  Both recipes are small enough to reproduce
in any language.
"""
from __future__ import annotations

import hashlib

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_S12 = np.uint64(12)
UNIT = 2.0 ** -53


def mix64(z) -> np.ndarray:
    """splitmix64 output function applied elementwise (wrapping uint64)."""
    with np.errstate(over="ignore"):
        z = np.atleast_1d(np.asarray(z, dtype=np.uint64)) + GOLDEN
        z = (z ^ (z >> _S30)) * MIX1
        z = (z ^ (z >> _S27)) * MIX2
    return z ^ (z >> _S31)


def to_unit(z: np.ndarray) -> np.ndarray:
    """Map uint64 words to doubles in [0, 1) using the top 53 bits."""
    return (z >> _S11).astype(np.float64) * UNIT


def to_open_unit(z: np.ndarray) -> np.ndarray:
    """Map uint64 words to doubles strictly inside (0, 1) using the top 52 bits."""
    return ((z >> _S12).astype(np.float64) + 0.5) * 2.0 ** -52


def uniforms(keys, counters) -> np.ndarray:
    """``uniform(key, j)`` with broadcasting between ``keys`` and ``counters``."""
    keys = np.asarray(keys, dtype=np.uint64)
    j = np.atleast_1d(np.asarray(counters, dtype=np.uint64)) + np.uint64(1)
    with np.errstate(over="ignore"):
        z = keys + j * GOLDEN
    return to_unit(mix64(z))


def derive_key(master_seed: int, *labels) -> int:
    """Stable 64-bit key for ``(master_seed, *labels)``."""
    text = repr((int(master_seed),) + tuple(str(x) for x in labels))
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream_keys(master_seed: int, label: str, count: int, offset: int = 0) -> np.ndarray:
    """Independent per-sample keys ``offset .. offset + count - 1`` for ``label``."""
    base = np.uint64(derive_key(master_seed, label))
    idx = np.arange(offset, offset + count, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = base + idx * GOLDEN
    return mix64(z)


def site_keys(env_key: int, sites: np.ndarray) -> np.ndarray:
    """Per-site keys obtained by folding the coordinates into ``env_key``.

    ``sites`` has shape ``(n, d)``; negative coordinates are folded through
    their two's complement bit pattern.  ``env_key`` may also be an array
    with one key per site (batches of environments).
    """
    sites = np.asarray(sites, dtype=np.int64)
    h = np.broadcast_to(np.asarray(env_key, dtype=np.uint64), (sites.shape[0],)).copy()
    for i in range(sites.shape[1]):
        h = mix64(h ^ sites[:, i].view(np.uint64))
    return h


def site_uniforms(env_key: int, sites: np.ndarray, k: int) -> np.ndarray:
    """``k`` uniforms per site, shape ``(n, k)``, strictly inside (0, 1)."""
    keys = site_keys(env_key, sites)
    if k == 0:
        return np.empty((keys.shape[0], 0))
    j = np.arange(1, k + 1, dtype=np.uint64)[None, :]
    with np.errstate(over="ignore"):
        z = keys[:, None] + j * GOLDEN
    return to_open_unit(mix64(z))
