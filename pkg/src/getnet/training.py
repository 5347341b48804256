"""Training protocol: negative downsampling, BCE, Adam with step halving,
and validation-accuracy model selection."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import LabeledSet
from .errors import DataError, LeakageError
from .model import Model, forward, state_arrays
from .nn import ops
from .nn.tensor import Tensor
from .rng import RandomState

log = logging.getLogger(__name__)

CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    halve_every: int = 5
    epochs: int = 15
    batch_size: int = 32
    threshold: float = 0.5
    seed: int = 0
    neg_downsample: float = 0.5

    def __post_init__(self):
        if self.lr0 < 0:
            raise DataError("lr0 must be nonnegative")
        if self.halve_every < 1:
            raise DataError("halve_every must be >= 1")
        if not 0 < self.neg_downsample <= 1:
            raise DataError("neg_downsample must be in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise DataError("epochs and batch_size must be >= 1")


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    flags: list[str] = field(default_factory=list)

    @property
    def best_accuracy(self) -> float:
        return self.val_accuracy[self.best_epoch]

    def to_dict(self) -> dict:
        return asdict(self)


def prepare_training_set(ds: LabeledSet, fraction: float, rs: RandomState) -> LabeledSet:
    """Keep every positive and a seeded random ``fraction`` of the negatives."""
    if not 0 < fraction <= 1:
        raise DataError("negative fraction must be in (0, 1]")
    pos = np.flatnonzero(ds.y == 1)
    neg = np.flatnonzero(ds.y == 0)
    if pos.size == 0:
        raise DataError("training set has no positives")
    keep = int(round(fraction * neg.size))
    if keep < neg.size:
        neg = rs.generator().choice(neg, size=keep, replace=False)
    return ds.subset(np.sort(np.concatenate([pos, neg])))


def bce_loss(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. ``p``.

    Predictions are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pc = np.clip(p, CLAMP, 1 - CLAMP)
    n = p.size
    loss = -np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    grad = (pc - y) / (pc * (1 - pc)) / n
    return float(loss), grad


def learning_rate(epoch: int, lr0: float, halve_every: int) -> float:
    return lr0 / 2 ** (epoch // halve_every)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, applied in place to ``params``."""
    state.t += 1
    c1, c2 = 1 - beta1 ** state.t, 1 - beta2 ** state.t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        m, v = state.m[k], state.v[k]
        if m.shape != p.shape or g.shape != p.shape:
            raise DataError(f"Adam state/gradient shape mismatch for {k}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params


class Adam:
    """Adam over a model's parameter tensors."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = params
        self.state = AdamState.zeros_like({k: t.data for k, t in params.items()})

    def step(self, lr: float) -> None:
        adam_step({k: t.data for k, t in self.params.items()},
                  {k: t.grad for k, t in self.params.items() if t.grad is not None},
                  self.state, lr)


def binary_accuracy(p: np.ndarray, y: np.ndarray, threshold: float = 0.5) -> float:
    return float(np.mean((np.asarray(p) >= threshold).astype(int) == np.asarray(y)))


def check_disjoint(a: LabeledSet, b: LabeledSet, what: str = "train/validation") -> None:
    shared = set(a.ids) & set(b.ids)
    if shared:
        raise LeakageError(f"{what} sets share {len(shared)} instances, e.g. {sorted(shared)[:3]}")


def train(model: Model, train_set: LabeledSet, val_set: LabeledSet, cfg: TrainConfig,
          log_path=None) -> tuple[Model, TrainHistory]:
    """Train in place and return the model restored to its best validation epoch."""
    check_disjoint(train_set, val_set)
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("empty training or validation set")
    params = model.named_params()
    opt = Adam(params)
    base = RandomState(cfg.seed).child("train")
    flip = model.config.has("R")
    hist = TrainHistory()
    best_state = None
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    n = len(train_set)
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr = learning_rate(epoch, cfg.lr0, cfg.halve_every)
            gen = base.child("epoch", epoch).generator()
            order = gen.permutation(n)
            total = 0.0
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                xb = train_set.x[idx][..., None]
                x = Tensor(xb)
                if flip:
                    x = ops.flip_time(x, gen.random(idx.size) < 0.5)
                for t in params.values():
                    t.grad = None
                out = model.forward_tensor(x, ops.TRAIN, base.child("step", epoch, b))
                loss, g = bce_loss(out.data[:, 0], train_set.y[idx])
                out.backward(g[:, None].astype(out.dtype))
                opt.step(lr)
                total += loss * idx.size
            acc = binary_accuracy(forward(model, val_set.x), val_set.y, cfg.threshold)
            hist.loss.append(total / n)
            hist.val_accuracy.append(acc)
            hist.lr.append(lr)
            if best_state is None or acc > hist.val_accuracy[hist.best_epoch]:
                hist.best_epoch = epoch
                best_state = copy.deepcopy(state_arrays(model))
            record = {"epoch": epoch, "loss": total / n, "val_accuracy": acc, "lr": lr,
                      "wall_seconds": time.perf_counter() - t0}
            log.debug("epoch %d loss %.4f val_acc %.4f lr %.5f", epoch, total / n, acc, lr)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    if len(hist.loss) >= 3 and not (hist.loss[2] < hist.loss[0]):
        hist.flags.append("loss_not_decreasing")
    for name, arr in state_arrays(model).items():
        arr[...] = best_state[name]
    return model, hist
