"""Wall-clock scaling of quadratic vs. streamed attention.

Timing is single-threaded and sequential: BLAS pools are pinned to one
thread for the duration of each measurement.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import attention as attn
from .attention import Mechanism
from .kernels import DEFAULT_KERNEL

DEFAULT_MEMORY_CAP = 3 * 1024**3  # bytes
MIN_REPEATS = 3


class MemoryCapError(RuntimeError):
    pass


@dataclass
class BenchRecord:
    mechanism: str
    form: str
    n: int
    d: int
    wall_time: float
    repeats: int


def _runner(mechanism: Mechanism, form: str, kernel):
    if form not in ("quadratic", "streamed"):
        raise ValueError(f"unknown form {form!r}")
    if mechanism is Mechanism.SOFTMAX:
        if form == "streamed":
            raise ValueError("softmax attention has no streamed form here")
        return lambda q, k, v: attn.softmax_attention(q, k, v, want_scores=False)
    if mechanism is Mechanism.LINEAR:
        if form == "streamed":
            return lambda q, k, v: attn.linear_attention_streamed(q, k, v, kernel)
        return lambda q, k, v: attn.linear_attention_quadratic(q, k, v, kernel)
    if form == "streamed":
        return lambda q, k, v: attn.mala_streamed(q, k, v, kernel)
    return lambda q, k, v: attn.mala_quadratic(q, k, v, kernel, want_scores=False)


def time_forward(mechanism, form: str, n: int, d: int = 64, d_v: int | None = None,
                 repeats: int = 5, seed: int = 0, kernel=DEFAULT_KERNEL,
                 memory_cap: int = DEFAULT_MEMORY_CAP) -> BenchRecord:
    """Median wall time of one forward pass after a discarded warm-up run."""
    mechanism = Mechanism.parse(mechanism)
    d_v = d if d_v is None else d_v
    if n < 1 or d < 1 or d_v < 1:
        raise ValueError("n, d and d_v must be positive")
    if repeats < MIN_REPEATS:
        raise ValueError(f"repeats must be >= {MIN_REPEATS}, got {repeats}")
    if form == "quadratic" and n * n * 8 > memory_cap:
        raise MemoryCapError(
            f"{n}x{n} score matrix needs {n * n * 8 / 2**20:.0f} MiB, cap is {memory_cap / 2**20:.0f} MiB"
        )
    run = _runner(mechanism, form, kernel)
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n, d))
    k = rng.standard_normal((n, d))
    v = rng.standard_normal((n, d_v))
    times = []
    with threadpool_limits(limits=1):
        run(q, k, v)
        for _ in range(repeats):
            t0 = time.perf_counter()
            run(q, k, v)
            times.append(time.perf_counter() - t0)
    return BenchRecord(mechanism.value, form, n, d, statistics.median(times), repeats)


def slope_fit(records) -> float:
    """Least-squares slope of log(wall_time) against log(n)."""
    records = list(records)
    if len(records) < 4:
        raise ValueError(f"need at least 4 records, got {len(records)}")
    ns = [r.n for r in records]
    if max(ns) < 8 * min(ns):
        raise ValueError(f"n range {min(ns)}..{max(ns)} spans less than 8x")
    x = np.log([float(n) for n in ns])
    y = np.log([r.wall_time for r in records])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def scaling_sweep(ns, d: int = 64, repeats: int = 5, seed: int = 0, kernel=DEFAULT_KERNEL,
                  series=(("softmax", "quadratic"), ("mala", "streamed")),
                  memory_cap: int = DEFAULT_MEMORY_CAP):
    """Time every (mechanism, form) series over ``ns``; returns records and per-series slopes."""
    records, slopes = [], {}
    for mech, form in series:
        rows = [time_forward(mech, form, n, d, repeats=repeats, seed=seed, kernel=kernel,
                             memory_cap=memory_cap) for n in ns]
        records.extend(rows)
        slopes[(mech, form)] = slope_fit(rows)
    return records, slopes


def separation(slopes) -> float:
    return slopes[("softmax", "quadratic")] - slopes[("mala", "streamed")]

