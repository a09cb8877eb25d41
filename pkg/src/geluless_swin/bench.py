"""Latency harness: repeated timing, fused-op ablation, speedup tables.

Timing uses ``time.perf_counter_ns`` with BLAS pinned to one thread and a
process-wide lock so two benchmarks never overlap.  Absolute milliseconds are
CPU numbers; what carries over is the comparison between variants.
"""

from __future__ import annotations

import json
import statistics
import threading
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ParameterError
from .quant import AblationCache, FusedOpId, Mode, QuantSwinModel, quant_model_forward
from .swin import SwinModel, model_forward

BENCH_LOCK = threading.Lock()

# Published RTX 4090 measurements (mean of 1000 runs), in ms, used as arithmetic fixtures.
REFERENCE_FUSED_OP_LATENCY_MS = {
    "SWIN_TINY": (0.32, 1.51, 2.55, 0.88, 2.03, 1.16),
    "SWIN_SMALL": (0.3, 2.01, 4.1, 1.17, 2.48, 1.36),
    "SWIN_BASE": (0.57, 2.53, 5.44, 1.57, 3.89, 2.69),
    "SWIN_LARGE": (1.22, 3.93, 8.18, 2.92, 8.13, 3.66),
}
REFERENCE_MODEL_LATENCY_MS = {
    # (FP32 baseline, FP16, FasterTransformer int8, GELU-less int8)
    "SWIN_TINY": (60.27, 24.96, 17.04, 15.01),
    "SWIN_SMALL": (103.21, 40.26, 25.05, 22.57),
    "SWIN_BASE": (157.31, 58.39, 35.55, 31.66),
    "SWIN_LARGE": (284.41, 104.76, 61.35, 53.22),
}
REFERENCE_SPEEDUPS = {
    "SWIN_TINY": (1.0, 2.41, 3.54, 4.02),
    "SWIN_SMALL": (1.0, 2.56, 4.12, 4.57),
    "SWIN_BASE": (1.0, 2.69, 4.43, 4.97),
    "SWIN_LARGE": (1.0, 2.71, 4.64, 5.34),
}
REFERENCE_VARIANTS = ("Baseline", "Half-precision", "FasterTransformer", "Ours")


@dataclass
class LatencyStats:
    mean_ms: float
    std_ms: float
    min_ms: float
    median_ms: float
    iterations: int
    warmup_iterations: int

    @classmethod
    def from_samples(cls, samples_ns, warmup: int) -> "LatencyStats":
        ms = [s / 1e6 for s in samples_ns]
        return cls(
            mean_ms=statistics.fmean(ms),
            std_ms=statistics.pstdev(ms) if len(ms) > 1 else 0.0,
            min_ms=min(ms),
            median_ms=statistics.median(ms),
            iterations=len(ms),
            warmup_iterations=warmup,
        )

    @classmethod
    def fixed(cls, mean_ms: float) -> "LatencyStats":
        """A single known latency (e.g. a number quoted from a table)."""
        return cls(mean_ms, 0.0, mean_ms, mean_ms, 1, 0)


@contextmanager
def exclusive_timing():
    with BENCH_LOCK, threadpool_limits(limits=1):
        yield


def measure_latency(runnable: Callable[[], object], warmup: int = 50, iters: int = 1000) -> LatencyStats:
    if iters < 1:
        raise ParameterError(f"iters must be >= 1, got {iters}")
    with exclusive_timing():
        for _ in range(warmup):
            runnable()
        samples = []
        clock = time.perf_counter_ns
        for _ in range(iters):
            t0 = clock()
            runnable()
            samples.append(clock() - t0)
    return LatencyStats.from_samples(samples, warmup)


def measure_interleaved(runnables: dict, warmup: int = 50, iters: int = 1000) -> dict:
    """Time several runnables round-robin so slow drift hits all of them equally."""
    if iters < 1:
        raise ParameterError(f"iters must be >= 1, got {iters}")
    samples = {name: [] for name in runnables}
    clock = time.perf_counter_ns
    with exclusive_timing():
        for _ in range(warmup):
            for fn in runnables.values():
                fn()
        for _ in range(iters):
            for name, fn in runnables.items():
                t0 = clock()
                fn()
                samples[name].append(clock() - t0)
    return {name: LatencyStats.from_samples(s, warmup) for name, s in samples.items()}


# --------------------------------------------------------------------------
# Ablation
# --------------------------------------------------------------------------


@dataclass
class AblationRow:
    fused_op: str
    baseline_ms: float
    ablated_ms: float
    delta_ms: float


@dataclass
class AblationReport:
    rows: list
    baseline: LatencyStats
    bare_gemm_ms: float
    outputs_valid: bool = False  # outputs computed with ops removed are meaningless

    def delta(self, op: FusedOpId) -> float:
        return next(r.delta_ms for r in self.rows if r.fused_op == op.name)

    def ranked(self) -> list:
        return sorted(self.rows, key=lambda r: r.delta_ms, reverse=True)

    def to_csv(self) -> str:
        lines = ["fused_op,baseline_ms,ablated_ms,delta_ms"]
        lines += [f"{r.fused_op},{r.baseline_ms:.4f},{r.ablated_ms:.4f},{r.delta_ms:.4f}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_json(self, meta: Optional[dict] = None) -> str:
        return json.dumps(
            {
                "meta": meta or {},
                "baseline": asdict(self.baseline),
                "bare_gemm_ms": self.bare_gemm_ms,
                "rows": [asdict(r) for r in self.rows],
            },
            indent=2,
        )


def ablate_fused_ops(qmodel: QuantSwinModel, batch, warmup: int = 50, iters: int = 1000) -> AblationReport:
    """Latency attributed to each fused op = baseline minus latency with that op removed."""
    if qmodel.mode is not Mode.STANDARD:
        raise ParameterError("ablation needs a standard-mode model with all six fused ops")
    batch = np.asarray(batch, dtype=np.float32)
    cache = AblationCache().prime(qmodel, batch)
    runnables = {"baseline": lambda: quant_model_forward(qmodel, batch)}
    for op in FusedOpId:
        runnables[op.name] = lambda op=op: quant_model_forward(qmodel, batch, disabled=frozenset({op}), cache=cache)
    runnables["bare"] = lambda: quant_model_forward(qmodel, batch, disabled=frozenset(FusedOpId), cache=cache)
    stats = measure_interleaved(runnables, warmup, iters)
    base = stats["baseline"]
    rows = [
        AblationRow(op.name, base.mean_ms, stats[op.name].mean_ms, base.mean_ms - stats[op.name].mean_ms)
        for op in FusedOpId
    ]
    return AblationReport(rows, base, stats["bare"].mean_ms)


# --------------------------------------------------------------------------
# Speedup tables
# --------------------------------------------------------------------------


@dataclass
class SpeedupRow:
    variant: str
    latency: LatencyStats
    speedup: float
    accuracy: Optional[float] = None


@dataclass
class SpeedupTable:
    rows: list = field(default_factory=list)
    baseline: str = ""

    def row(self, name: str) -> SpeedupRow:
        return next(r for r in self.rows if r.variant == name)

    def to_csv(self) -> str:
        lines = ["variant,mean_ms,std_ms,min_ms,speedup,accuracy"]
        for r in self.rows:
            acc = "" if r.accuracy is None else f"{r.accuracy:.6f}"
            lat = r.latency
            lines.append(f"{r.variant},{lat.mean_ms:.4f},{lat.std_ms:.4f},{lat.min_ms:.4f},{r.speedup:.2f},{acc}")
        return "\n".join(lines) + "\n"

    def to_json(self, meta: Optional[dict] = None) -> str:
        return json.dumps(
            {
                "meta": meta or {},
                "baseline": self.baseline,
                "rows": [
                    {"variant": r.variant, **asdict(r.latency), "speedup": r.speedup, "accuracy": r.accuracy}
                    for r in self.rows
                ],
            },
            indent=2,
        )


def speedup_table(entries, baseline_name: str) -> SpeedupTable:
    """``speedup = baseline.mean / row.mean`` rounded to 2 decimals."""
    entries = list(entries)
    base = next((stats for name, stats in entries if name == baseline_name), None)
    if base is None:
        raise ParameterError(f"baseline '{baseline_name}' is not among the entries")
    rows = [SpeedupRow(name, stats, round(base.mean_ms / stats.mean_ms, 2)) for name, stats in entries]
    return SpeedupTable(rows, baseline_name)


def reference_speedup_table(model_name: str) -> SpeedupTable:
    entries = [(v, LatencyStats.fixed(ms)) for v, ms in zip(REFERENCE_VARIANTS, REFERENCE_MODEL_LATENCY_MS[model_name])]
    return speedup_table(entries, "Baseline")


def compare_modes(
    float_model: SwinModel,
    q_standard: QuantSwinModel,
    q_geluless: QuantSwinModel,
    batch,
    eval_set=None,
    warmup: int = 50,
    iters: int = 1000,
) -> SpeedupTable:
    """Float baseline vs standard int8 vs GELU-less int8: latency, speedup and toy accuracy."""
    from .distill import eval_accuracy

    batch = np.asarray(batch, dtype=np.float32)
    variants = {
        "float32": (float_model, lambda: model_forward(float_model, batch)),
        "int8-standard": (q_standard, lambda: quant_model_forward(q_standard, batch)),
        "int8-gelu-less": (q_geluless, lambda: quant_model_forward(q_geluless, batch)),
    }
    stats = measure_interleaved({k: fn for k, (_, fn) in variants.items()}, warmup, iters)
    table = speedup_table([(k, stats[k]) for k in variants], "float32")
    if eval_set is not None:
        for row in table.rows:
            row.accuracy = eval_accuracy(variants[row.variant][0], eval_set)
    return table


@dataclass
class PairedTrials:
    wins: int
    trials: int
    standard_ms: list
    geluless_ms: list


def paired_trials(
    q_standard: QuantSwinModel, q_geluless: QuantSwinModel, batch, trials: int = 100, iters: int = 5, warmup: int = 5
) -> PairedTrials:
    """Per trial, time both modes back to back (order alternating); count GELU-less wins on the mean."""
    batch = np.asarray(batch, dtype=np.float32)
    run_std = lambda: quant_model_forward(q_standard, batch)  # noqa: E731
    run_gl = lambda: quant_model_forward(q_geluless, batch)  # noqa: E731
    std_ms, gl_ms = [], []
    clock = time.perf_counter_ns
    with exclusive_timing():
        for _ in range(warmup):
            run_std()
            run_gl()
        for t in range(trials):
            order = (("std", run_std), ("gl", run_gl)) if t % 2 == 0 else (("gl", run_gl), ("std", run_std))
            means = {}
            for name, fn in order:
                t0 = clock()
                for _ in range(iters):
                    fn()
                means[name] = (clock() - t0) / iters / 1e6
            std_ms.append(means["std"])
            gl_ms.append(means["gl"])
    wins = sum(g < s for g, s in zip(gl_ms, std_ms))
    return PairedTrials(wins, trials, std_ms, gl_ms)
