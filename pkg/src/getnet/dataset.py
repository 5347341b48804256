"""In-memory labeled window sets shared by training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio_io import load_clip, read_manifest
from .dsp import CANONICAL, FrontendParams, Spectrogram, extract_clip


@dataclass
class LabeledSet:
    """Spectrograms ``x`` (n, M, N) with binary labels and provenance."""

    x: np.ndarray
    y: np.ndarray
    ids: list[str]
    site: list[str]
    year: list[int]
    clip_id: list[str]
    index: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.index = np.asarray(self.index, dtype=np.int64)
        n = len(self.ids)
        if not (self.x.shape[0] == self.y.shape[0] == n == len(self.site) == len(self.year)
                == len(self.clip_id) == self.index.shape[0]):
            raise ValueError("LabeledSet fields have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_pos(self) -> int:
        return int(self.y.sum())

    def subset(self, idx: Sequence[int]) -> "LabeledSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(self.x[idx], self.y[idx], [self.ids[i] for i in idx],
                          [self.site[i] for i in idx], [self.year[i] for i in idx],
                          [self.clip_id[i] for i in idx], self.index[idx])

    def select_ids(self, ids: Sequence[str]) -> "LabeledSet":
        pos = {k: i for i, k in enumerate(self.ids)}
        return self.subset([pos[k] for k in ids])

    @classmethod
    def from_spectrograms(cls, specs: Sequence[Spectrogram], site: str = "", year: int = 0):
        return cls(np.stack([s.values for s in specs]), [s.label for s in specs],
                   [f"{s.clip_id}#{s.index}" for s in specs], [site] * len(specs),
                   [year] * len(specs), [s.clip_id for s in specs], [s.index for s in specs])

    @classmethod
    def concat(cls, parts: Sequence["LabeledSet"]) -> "LabeledSet":
        return cls(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
                   [i for p in parts for i in p.ids], [s for p in parts for s in p.site],
                   [y for p in parts for y in p.year], [c for p in parts for c in p.clip_id],
                   np.concatenate([p.index for p in parts]))


def load_corpus(manifest_path, params: FrontendParams = CANONICAL) -> LabeledSet:
    """Read every clip in a manifest and turn it into labeled spectrograms."""
    manifest_path = Path(manifest_path)
    parts = []
    for rec in read_manifest(manifest_path):
        clip = load_clip(rec, root=manifest_path.parent, expected_rate=params.sample_rate)
        parts.append(LabeledSet.from_spectrograms(extract_clip(clip, params), clip.site, clip.year))
    return LabeledSet.concat(parts)
