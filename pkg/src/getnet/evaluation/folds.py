"""Site-year outer blocks and stratified inner folds."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..dataset import LabeledSet
from ..errors import DataError, LeakageError, StratificationError
from ..rng import RandomState


@dataclass(frozen=True)
class SiteYearBlock:
    site: str
    year: int
    ids: tuple[str, ...]
    annotation_count: int

    @property
    def key(self) -> tuple[str, int]:
        return self.site, self.year


def _check_meta(site, year, ident) -> None:
    if site is None or site == "" or year is None:
        raise DataError(f"instance {ident!r} is missing site/year metadata")


def split_site_years(corpus) -> list[SiteYearBlock]:
    """One block per distinct (site, year), ordered by key.

    ``corpus`` is either a :class:`LabeledSet` (instances are windows and the
    annotation count is the number of positive windows) or a sequence of
    manifest records (instances are clips and the count is their annotations).
    """
    groups: dict[tuple[str, int], list] = {}
    if isinstance(corpus, LabeledSet):
        for ident, site, year, y in zip(corpus.ids, corpus.site, corpus.year, corpus.y):
            _check_meta(site, year, ident)
            groups.setdefault((site, int(year)), []).append((ident, int(y)))
    else:
        for rec in corpus:
            _check_meta(rec.get("site"), rec.get("year"), rec.get("id"))
            groups.setdefault((rec["site"], int(rec["year"])), []).append(
                (rec["id"], len(rec.get("annotations", []))))
    blocks = []
    for (site, year) in sorted(groups):
        members = groups[(site, year)]
        blocks.append(SiteYearBlock(site, year, tuple(m[0] for m in members),
                                    sum(m[1] for m in members)))
    seen: set[str] = set()
    for b in blocks:
        if seen & set(b.ids):
            raise DataError(f"instance ids repeated across blocks in {b.key}")
        seen.update(b.ids)
    return blocks


def stratified_k_fold(labels: Sequence[int], k: int, seed: int = 0,
                      groups: Sequence[str] | None = None) -> list[np.ndarray]:
    """Partition indices into ``k`` folds with per-class counts differing by at most one.

    Each class is shuffled with a seeded stream and dealt round-robin, the
    dealing position carrying over between classes so fold sizes also stay
    balanced.  With ``groups`` the unit dealt is a whole group (e.g. a clip),
    labeled positive if any member is; balance then holds at the group level.
    """
    y = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise StratificationError("k must be >= 2")
    if groups is not None:
        names = list(dict.fromkeys(groups))
        pos = {g: i for i, g in enumerate(names)}
        gidx = np.array([pos[g] for g in groups])
        unit_y = np.zeros(len(names), dtype=np.int64)
        np.maximum.at(unit_y, gidx, y)
    else:
        unit_y = y
    gen = RandomState(seed).child("stratified_k_fold").generator()
    assign = np.empty(unit_y.size, dtype=np.int64)
    cursor = 0
    for cls in (1, 0):
        members = np.flatnonzero(unit_y == cls)
        if members.size < k:
            raise StratificationError(
                f"class {cls} has {members.size} members, fewer than k={k}")
        members = gen.permutation(members)
        assign[members] = (cursor + np.arange(members.size)) % k
        cursor = (cursor + members.size) % k
    if groups is not None:
        assign = assign[gidx]
    return [np.flatnonzero(assign == f) for f in range(k)]


@dataclass
class FoldPlan:
    outer_index: int
    inner_index: int
    block: tuple[str, int]
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    seeds: dict[str, int] = field(default_factory=dict)

    def check(self) -> None:
        """Raise :class:`LeakageError` if any two id sets overlap."""
        train, val, test = set(self.train_ids), set(self.val_ids), set(self.test_ids)
        if train & val:
            raise LeakageError(f"fold {self.outer_index}/{self.inner_index}: train and val overlap")
        if (train | val) & test:
            raise LeakageError(f"fold {self.outer_index}/{self.inner_index}: test block leaks "
                               "into train/val")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block"] = list(self.block)
        return d


def plan_folds(ds: LabeledSet, k: int, seed: int = 0,
               group_by_clip: bool = False) -> list[FoldPlan]:
    """All K*k fold plans in (outer, inner) order, leakage-checked."""
    blocks = split_site_years(ds)
    if len(blocks) < 2:
        raise DataError("nested cross-validation needs at least two site-years")
    plans = []
    for i, block in enumerate(blocks):
        test = set(block.ids)
        pool_idx = np.array([n for n, ident in enumerate(ds.ids) if ident not in test])
        pool_ids = [ds.ids[n] for n in pool_idx]
        groups = [ds.clip_id[n] for n in pool_idx] if group_by_clip else None
        folds = stratified_k_fold(ds.y[pool_idx], k, seed=int(RandomState(seed).child(
            "folds", i).stream_id), groups=groups)
        _check_partition(folds, len(pool_ids), i)
        for j, val in enumerate(folds):
            val_set = set(val.tolist())
            train = [pool_ids[n] for n in range(len(pool_ids)) if n not in val_set]
            plan = FoldPlan(i, j, block.key, train, [pool_ids[n] for n in val],
                            list(block.ids))
            plan.check()
            plans.append(plan)
    return plans


def _check_partition(folds: list[np.ndarray], n: int, outer: int) -> None:
    allidx = np.concatenate(folds)
    if allidx.size != n or np.unique(allidx).size != n:
        raise LeakageError(f"inner folds of outer block {outer} do not partition the pool")
