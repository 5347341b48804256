"""Hierarchical nested cross-validation over site-year blocks.

Every site-year block is held out in turn; the remaining pool is split into
k stratified folds and one model is trained per inner fold (fold j validates,
the rest train).  All k models are tested on the held-out block, so the
spread of their metrics measures stability on that block.
"""

from __future__ import annotations

import json
import logging
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from ..dataset import LabeledSet
from ..dsp import merge_adjacent_positives
from ..errors import DataError, FoldFailure, InvariantViolation
from ..model import ArpanConfig, analytic_parameter_count, build, forward
from ..rng import RandomState, derive_seed
from ..training import TrainConfig, check_disjoint, prepare_training_set, train
from .folds import FoldPlan, plan_folds, split_site_years
from .metrics import METRICS, MetricSet, aggregate, compute_metrics

log = logging.getLogger(__name__)

# fit(train, val, test, plan) -> test scores; must be picklable when workers > 1
Predictor = Callable[[LabeledSet, LabeledSet, LabeledSet, FoldPlan], np.ndarray]


@dataclass(frozen=True)
class NestedCvConfig:
    k: int = 5
    seed: int = 0
    group_by_clip: bool = False
    merge_events: bool = False
    ties: str = "group"
    workers: int = 1

    def __post_init__(self):
        if self.k < 2:
            raise DataError("k must be >= 2")
        if self.workers < 1:
            raise DataError("workers must be >= 1")


@dataclass
class FoldResult:
    outer: int
    inner: int
    scores: np.ndarray
    metrics: MetricSet | None
    history: dict | None
    n_train: int
    inference_seconds: float


@dataclass
class BlockSummary:
    site: str
    year: int
    n_instances: int
    n_positive: int
    mean: dict[str, float | None]
    std: dict[str, float | None]
    per_model: list[dict | None]


@dataclass
class NestedCvReport:
    blocks: list[BlockSummary]
    micro: dict[str, dict[str, float]]
    macro: dict[str, dict[str, float]]
    across_blocks_std: dict[str, float]
    k: int
    n_models: int
    parameter_count: int
    config: dict
    efficiency: dict = field(default_factory=dict)

    def to_dict(self, timing: bool = False) -> dict:
        """JSON-ready dict; wall-clock timings only when ``timing`` is set."""
        d = asdict(self)
        if not timing:
            d.pop("efficiency")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NestedCvReport":
        d = dict(d)
        d["blocks"] = [BlockSummary(**b) for b in d["blocks"]]
        d.setdefault("efficiency", {})
        return cls(**d)


@dataclass
class _Job:
    plan: FoldPlan
    train: LabeledSet
    val: LabeledSet
    test: LabeledSet
    model_cfg: ArpanConfig | None
    train_cfg: TrainConfig | None
    neg_fraction: float
    cv: NestedCvConfig
    predictor: Predictor | None
    log_path: str | None


def _event_view(test: LabeledSet, scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    recs = [{"clip_id": c, "index": int(i), "label": int(y), "score": float(s)}
            for c, i, y, s in zip(test.clip_id, test.index, test.y, scores)]
    events = merge_adjacent_positives(recs)
    return (np.array([e["score"] for e in events]), np.array([e["label"] for e in events]))


def _run_fold(job: _Job) -> FoldResult:
    plan = job.plan
    i, j = plan.outer_index, plan.inner_index
    try:
        plan.check()
        check_disjoint(job.train, job.val)
        check_disjoint(job.train, job.test, "train/test")
        check_disjoint(job.val, job.test, "validation/test")
        train_set = prepare_training_set(
            job.train, job.neg_fraction,
            RandomState(job.cv.seed).child("downsample", i, j))
        history = None
        if job.predictor is not None:
            t0 = time.perf_counter()
            scores = np.asarray(job.predictor(train_set, job.val, job.test, plan), dtype=np.float64)
            elapsed = time.perf_counter() - t0
        else:
            mcfg = replace(job.model_cfg, seed=plan.seeds["model"])
            tcfg = replace(job.train_cfg, seed=plan.seeds["train"])
            model, hist = train(build(mcfg), train_set, job.val, tcfg, log_path=job.log_path)
            history = hist.to_dict()
            t0 = time.perf_counter()
            scores = forward(model, job.test.x).astype(np.float64)
            elapsed = time.perf_counter() - t0
        if scores.shape != (len(job.test),):
            raise DataError(f"predictor returned {scores.shape}, expected ({len(job.test)},)")
        s, y = (_event_view(job.test, scores) if job.cv.merge_events else (scores, job.test.y))
        threshold = job.train_cfg.threshold if job.train_cfg else 0.5
        metrics = (compute_metrics(s, y, threshold, ties=job.cv.ties,
                                   seed=derive_seed(job.cv.seed, "ties", i, j))
                   if y.sum() > 0 else None)
        return FoldResult(i, j, scores, metrics, history, len(train_set), elapsed)
    except InvariantViolation:
        raise
    except Exception as exc:  # noqa: BLE001 - rewrapped with fold coordinates
        raise FoldFailure(i, j, exc) from exc


def _summarize(blocks_meta, results: dict[tuple[int, int], FoldResult], k: int):
    blocks = []
    for i, (block, n_inst, n_pos) in enumerate(blocks_meta):
        per = [results[(i, j)].metrics for j in range(k)]
        if any(m is None for m in per):
            mean = {m: None for m in METRICS}
            std = {m: None for m in METRICS}
        else:
            mean, std = {}, {}
            for m in METRICS:
                vals = [getattr(ms, m) for ms in per]
                _, mu, sd = aggregate(vals, [1.0] * k)
                mean[m], std[m] = mu, sd
        blocks.append(BlockSummary(block.site, block.year, n_inst, n_pos, mean, std,
                                   [ms.to_dict() if ms else None for ms in per]))
    scored = [b for b in blocks if b.mean["ap"] is not None]
    micro, macro, across = {}, {}, {}
    if scored:
        w = [b.n_positive for b in scored]
        for m in METRICS:
            mi, ma, sd = aggregate([b.mean[m] for b in scored], w)
            smi, sma, _ = aggregate([b.std[m] for b in scored], w)
            micro[m] = {"mean": mi, "std": smi}
            macro[m] = {"mean": ma, "std": sma}
            across[m] = sd
    return blocks, micro, macro, across


def nested_cv(ds: LabeledSet, model_cfg: ArpanConfig | None = None,
              train_cfg: TrainConfig | None = None, cv: NestedCvConfig = NestedCvConfig(),
              out_dir=None, predictor: Predictor | None = None) -> NestedCvReport:
    """Run K*k fold jobs and reduce them in (outer, inner) order.

    With ``predictor`` set, it replaces model training (useful for baselines
    and harness checks).  Writes ``folds.jsonl`` and per-fold training logs
    under ``out_dir`` when given.
    """
    if predictor is None and (model_cfg is None or train_cfg is None):
        raise DataError("need model and training configs unless a predictor is given")
    train_cfg = train_cfg or TrainConfig()
    blocks = split_site_years(ds)
    plans = plan_folds(ds, cv.k, cv.seed, cv.group_by_clip)
    out = Path(out_dir) if out_dir else None
    if out:
        (out / "logs").mkdir(parents=True, exist_ok=True)
    jobs = []
    for plan in plans:
        i, j = plan.outer_index, plan.inner_index
        plan.seeds = {"model": derive_seed(cv.seed, "model", i, j),
                      "train": derive_seed(cv.seed, "train", i, j),
                      "downsample": int(RandomState(cv.seed).child("downsample", i, j).stream_id)}
        jobs.append(_Job(plan, ds.select_ids(plan.train_ids), ds.select_ids(plan.val_ids),
                         ds.select_ids(plan.test_ids), model_cfg, train_cfg,
                         train_cfg.neg_downsample, cv, predictor,
                         str(out / "logs" / f"fold_{i}_{j}.jsonl") if out else None))
    results: dict[tuple[int, int], FoldResult] = {}
    if cv.workers == 1:
        for job in jobs:
            r = _run_fold(job)
            results[(r.outer, r.inner)] = r
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=cv.workers, mp_context=ctx) as pool:
            futures = [pool.submit(_run_fold, job) for job in jobs]
            try:
                for fut in futures:
                    r = fut.result()
                    results[(r.outer, r.inner)] = r
            except BaseException:
                for fut in futures:
                    fut.cancel()
                raise
    if len(results) != len(plans):
        raise InvariantViolation(f"expected {len(plans)} fold results, got {len(results)}")
    if out:
        with open(out / "folds.jsonl", "w", encoding="utf-8") as fh:
            for plan in plans:
                r = results[(plan.outer_index, plan.inner_index)]
                rec = plan.to_dict()
                rec["n_train_after_downsampling"] = r.n_train
                rec["best_epoch"] = r.history["best_epoch"] if r.history else None
                fh.write(json.dumps(rec) + "\n")
    meta = [(b, len(b.ids), int(ds.select_ids(list(b.ids)).y.sum())) for b in blocks]
    summary, micro, macro, across = _summarize(meta, results, cv.k)
    # total time for the full corpus: per block the median over inner models
    total = float(sum(np.median([results[(i, j)].inference_seconds for j in range(cv.k)])
                      for i in range(len(blocks))))
    config = {"cv": asdict(cv) | {"workers": None},
              "model": model_cfg.to_dict() if model_cfg else None,
              "train": asdict(train_cfg),
              "predictor": None if predictor is None else getattr(predictor, "__name__",
                                                                   type(predictor).__name__)}
    return NestedCvReport(summary, micro, macro, across, cv.k, len(results),
                          analytic_parameter_count(model_cfg) if model_cfg else 0, config,
                          {"total_inference_seconds": total,
                           "per_sample_seconds": total / len(ds),
                           "parameter_count": analytic_parameter_count(model_cfg)
                           if model_cfg else 0})
