"""Named, seedable random streams.

All randomness in the package flows through :func:`stream`, which builds a
numpy ``Generator`` on the counter-based Philox4x64 bit generator.  A stream
is keyed by an integer seed plus any number of string/integer tags, so that
each consumer (a domain, a data block, a parameter array, an epoch shuffle)
draws from its own independent sequence no matter in which order the
consumers run.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_words(tag) -> list[int]:
    if isinstance(tag, (int, np.integer)):
        value = int(tag) & _MASK64
        return [value & 0xFFFFFFFF, value >> 32]
    data = str(tag).encode("utf-8")
    return [zlib.crc32(data), len(data)]


def derive_key(seed: int, *tags) -> list[int]:
    words = _tag_words(int(seed))
    for tag in tags:
        words.extend(_tag_words(tag))
    return words


def stream(seed: int, *tags) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, *tags)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(derive_key(seed, *tags))))
