"""Inference latency measurement across survivor counts."""

from __future__ import annotations

import contextlib
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .capsnet import CapsNetModel, forward
from .errors import ArgumentError


@dataclass
class BenchResult:
    n_pcs: int
    median_s: float
    times_s: list
    samples: int

    @property
    def samples_per_s(self) -> float:
        return self.samples / self.median_s if self.median_s > 0 else float("inf")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["samples_per_s"] = self.samples_per_s
        return d


def inference_pass(model: CapsNetModel, images: np.ndarray, batch_size: int) -> None:
    for i in range(0, len(images), batch_size):
        forward(model, images[i:i + batch_size])


def bench_forward(
    model: CapsNetModel,
    images: np.ndarray,
    repeats: int = 5,
    batch_size: int = 100,
    single_thread: bool = True,
) -> BenchResult:
    """Median wall time of a full classification pass over ``images``.

    One untimed warm-up pass runs first.
    """
    if repeats < 3:
        raise ArgumentError(f"repeats must be >= 3, got {repeats}")
    if len(images) == 0:
        raise ArgumentError("benchmark needs a non-empty test set")
    limits = threadpool_limits(1) if single_thread else contextlib.nullcontext()
    with limits:
        inference_pass(model, images, batch_size)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            inference_pass(model, images, batch_size)
            times.append(time.perf_counter() - t0)
    return BenchResult(model.n_surviving, statistics.median(times), times, len(images))


def bench_models(models: Sequence[CapsNetModel], images, repeats: int = 5, batch_size: int = 100,
                 single_thread: bool = True) -> list:
    results = [bench_forward(m, images, repeats, batch_size, single_thread) for m in models]
    return sorted(results, key=lambda r: -r.n_pcs)


def speedups(results: Sequence[BenchResult], baseline: Optional[BenchResult] = None) -> list:
    """Time of ``baseline`` (default: largest capsule count) over each result's time."""
    if not results:
        return []
    base = baseline or max(results, key=lambda r: r.n_pcs)
    return [base.median_s / r.median_s for r in results]
