"""Complexity measurement: closed-form counts, counter readouts, scaling fits."""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import asdict, dataclass
from typing import Literal, Sequence

import numpy as np

from .attention import ProjectionSet, lt_attention, multi_head_sa, sa_exact
from .counter import OpCounter

CSV_HEADER = ("kind", "C", "H", "W", "N", "macs", "aux_peak", "wall_ns")

Kind = Literal["sa", "lt"]


@dataclass(frozen=True)
class BenchRecord:
    kind: str
    C: int
    H: int
    W: int
    N: int
    macs: int
    aux_peak: int
    wall_ns: int


@dataclass(frozen=True)
class SlopeFit:
    exponent: float
    r2: float


def flops_formula_sa(c: int, h: int, w: int) -> tuple[int, int]:
    """Closed-form softmax-attention cost: ``4HWC^2 + 2H^2W^2C`` MACs, ``H^2W^2`` storage."""
    if min(c, h, w) < 1:
        raise ValueError("extents must be positive")
    n = h * w
    return 4 * n * c * c + 2 * n * n * c, n * n


def instrumented_sa_block(c: int, h: int, w: int, seed: int = 0) -> OpCounter:
    """Count a single-head softmax self-attention block with all four projections."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((c, h * w))
    proj = ProjectionSet.seeded(rng, c, c, heads=1)
    counter = OpCounter()
    multi_head_sa(x, x, [proj], proj.w_out, counter)
    return counter


def factor_hw(n: int) -> tuple[int, int]:
    """Most square ``H x W`` factorization of ``n`` with ``H <= W``."""
    h = math.isqrt(n)
    while n % h:
        h -= 1
    return h, n // h


def measure(kind: Kind, c: int, n: int, trials: int = 5, seed: int = 0,
            dtype=np.float64) -> BenchRecord:
    """Counter readout plus median wall time (one warm-up) of the attention core."""
    if trials < 1:
        raise ValueError("need at least one trial")
    if kind not in ("sa", "lt"):
        raise ValueError(f"unknown kind {kind!r}")
    fn = sa_exact if kind == "sa" else lt_attention
    rng = np.random.default_rng(seed)
    q, k, v = (rng.standard_normal((c, n)).astype(dtype) for _ in range(3))
    counter = OpCounter()
    fn(q, k, v, counter=counter)
    times = []
    for _ in range(trials):
        t0 = time.perf_counter_ns()
        fn(q, k, v)
        times.append(time.perf_counter_ns() - t0)
    h, w = factor_hw(n)
    return BenchRecord(kind, c, h, w, n, counter.macs, counter.aux_peak, int(np.median(times)))


def fit_slope(ns: Sequence[int], macs: Sequence[int]) -> SlopeFit:
    """Least-squares slope of log(macs) against log(N)."""
    x = np.log(np.asarray(ns, dtype=np.float64))
    y = np.log(np.asarray(macs, dtype=np.float64))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return SlopeFit(float(slope), min(max(r2, 0.0), 1.0))


def write_csv(path: str | os.PathLike, records: Sequence[BenchRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            row = asdict(r)
            writer.writerow([row[key] for key in CSV_HEADER])


def scaling_experiment(kind: Kind, c: int, sizes: Sequence[int], out: str | os.PathLike | None = None,
                       trials: int = 5, seed: int = 0, dtype=np.float64) -> tuple[list[BenchRecord], SlopeFit]:
    """Sweep sequence lengths, optionally write CSV, fit the MAC growth exponent.

    Softmax sweeps only fit sizes with ``N >= 16 C`` where the quadratic
    term dominates.
    """
    sizes = sorted(set(int(n) for n in sizes))
    if len(sizes) < 4 or sizes[-1] < 16 * sizes[0]:
        raise ValueError("need at least 4 sizes spanning a 16x range")
    if kind == "sa" and sizes[0] < 16 * c:
        raise ValueError(f"softmax sweep needs N >= 16*C = {16 * c}")
    if trials < 5:
        raise ValueError("wall time is a median of at least 5 trials")
    if out is not None:
        parent = os.path.dirname(os.path.abspath(out))
        if not os.path.isdir(parent) or not os.access(parent, os.W_OK):
            raise OSError(f"cannot write {out}")
    records = [measure(kind, c, n, trials, seed, dtype) for n in sizes]
    if out is not None:
        write_csv(out, records)
    fit = fit_slope([r.N for r in records], [r.macs for r in records])
    return records, fit


def lt_core_macs(c: int, nq: int, nk: int, cv: int | None = None) -> int:
    cv = c if cv is None else cv
    return nk * c * cv + nq * c * cv + nq * c


def crossover(c: int, limit: int = 1 << 20) -> int | None:
    """Smallest N at which the linearized core counts fewer MACs than softmax."""
    for n in range(1, limit + 1):
        if lt_core_macs(c, n, n) < 2 * n * n * c:
            return n
    return None
