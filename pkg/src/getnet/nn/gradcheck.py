"""Central finite-difference verification of backward rules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckResult:
    checked: int
    skipped: int
    max_rel_error: float
    failures: list[tuple[str, tuple[int, ...], float, float]]

    @property
    def ok(self) -> bool:
        return not self.failures


def _rel_close(a: float, b: float, rtol: float, atol: float) -> bool:
    return abs(a - b) <= max(rtol * max(abs(a), abs(b)), atol)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], *, step: float = 1e-4,
                    rtol: float = 1e-4, atol: float = 1e-6, max_per_tensor: int | None = None,
                    seed: int = 0, names: Sequence[str] | None = None) -> GradCheckResult:
    """Compare ``backward`` of ``fn()`` against central differences.

    ``fn`` must rebuild the graph from ``tensors`` on every call.  Non-scalar
    outputs are reduced with a fixed random projection.  Coordinates where
    the one-sided differences disagree with each other (a kink of relu/max)
    are skipped and counted, not silently passed.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    out = fn()
    proj = np.ones(out.shape) if out.data.size == 1 else rng.normal(size=out.shape)
    out.backward(proj.astype(out.dtype))
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def value() -> float:
        return float((fn().data * proj).sum())

    names = names or [t.name or f"t{i}" for i, t in enumerate(tensors)]
    failures, checked, skipped, worst = [], 0, 0, 0.0
    for t, ga, name in zip(tensors, analytic, names):
        flat = np.arange(t.data.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            flat = rng.choice(flat, size=max_per_tensor, replace=False)
        for k in flat:
            idx = np.unravel_index(int(k), t.data.shape)
            orig = t.data[idx]
            f0 = value()
            t.data[idx] = orig + step
            fp = value()
            t.data[idx] = orig - step
            fm = value()
            t.data[idx] = orig
            num = (fp - fm) / (2 * step)
            fwd, bwd = (fp - f0) / step, (f0 - fm) / step
            if not _rel_close(fwd, bwd, 1e-2, 1e-4):
                skipped += 1
                continue
            a = float(ga[idx])
            checked += 1
            err = abs(a - num) / max(abs(a), abs(num), atol)
            worst = max(worst, err)
            if not _rel_close(a, num, rtol, atol):
                failures.append((name, tuple(int(i) for i in idx), a, num))
    return GradCheckResult(checked, skipped, worst, failures)
