"""Inference timing and parameter counting."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import DataError
from ..model import Model, count_parameters, forward


@dataclass(frozen=True)
class BenchResult:
    total_seconds: float
    per_sample_seconds: float
    parameter_count: int
    n_samples: int
    repetitions: int

    def to_dict(self) -> dict:
        return asdict(self)


def time_inference(model: Model, x: np.ndarray, batch_size: int = 64) -> float:
    t0 = time.perf_counter()
    forward(model, x, batch_size=batch_size)
    return time.perf_counter() - t0


def efficiency_bench(model: Model, x: np.ndarray, repetitions: int = 5,
                     batch_size: int = 64) -> BenchResult:
    """Median wall-clock inference time over ``repetitions`` after one warm-up pass.

    Feature extraction is not timed; ``x`` holds ready spectrograms.
    """
    x = np.asarray(x)
    if x.shape[0] == 0:
        raise DataError("cannot benchmark an empty set")
    if repetitions < 1:
        raise DataError("repetitions must be >= 1")
    time_inference(model, x, batch_size)
    total = statistics.median(time_inference(model, x, batch_size) for _ in range(repetitions))
    return BenchResult(total, total / x.shape[0], count_parameters(model), int(x.shape[0]),
                       repetitions)
