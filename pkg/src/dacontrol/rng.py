"""Named, counter-based random substreams.

Every random draw in the package flows through a Philox generator derived
from a root seed plus a tuple of names, so learners, comparators and
replicas can share common random numbers while remaining independent of
call order.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _name_words(name: str) -> list[int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def substream(seed: int, *names: object) -> np.random.Generator:
    """Return the generator for the substream identified by ``names``.

    The same ``(seed, names)`` pair always yields an identical stream and
    distinct name tuples yield statistically independent streams.
    """
    key: list[int] = []
    for name in names:
        key.extend(_name_words(str(name)))
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(key))
    return np.random.Generator(np.random.Philox(seq))
