"""Seeded random streams derived by labeled splitting."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


@dataclass(frozen=True)
class RandomState:
    """A reproducible random stream: identical (seed, stream_id) give identical draws."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=(self.stream_id,))
        return np.random.default_rng(ss)

    def child(self, *labels) -> "RandomState":
        """Derive an independent stream from this one and a list of labels."""
        key = [self.stream_id] + [_label_key(lab) for lab in labels]
        ss = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=tuple(key))
        stream = int(ss.generate_state(1, dtype=np.uint32)[0])
        return RandomState(self.seed, stream)


def derive_seed(seed: int, *labels) -> int:
    """A 32-bit integer seed deterministically derived from ``seed`` and labels."""
    ss = np.random.SeedSequence(entropy=seed & (2**64 - 1),
                                spawn_key=tuple(_label_key(lab) for lab in labels))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
