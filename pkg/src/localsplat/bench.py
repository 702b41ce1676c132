"""Attention scaling benchmark: local windowed stack vs dense global oracle.

Pair counts come from the exact closed-form counters in the attention
module (local N*w_eff*T^2, global (N*T)^2 per layer); wall times are
medians of repeated forward passes with the tape disabled. Fitting a
line to log(time) vs log(N) gives the measured scaling exponents.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import (StackConfig, AttentionCounters, init_stack_params,
                        local_attention, global_self_attention)

__all__ = ["BenchEntry", "BenchReport", "bench_attention", "format_report"]

_ITEM = 8  # float64 bytes


@dataclass
class BenchEntry:
    n_views: int
    local_pairs: int
    global_pairs: int
    local_seconds: float
    global_seconds: float
    local_mem_bytes: int
    global_mem_bytes: int


@dataclass
class BenchReport:
    window: int
    tokens: int
    dim: int
    heads: int
    layers: int
    repeats: int
    entries: list = field(default_factory=list)
    local_slope: float = float("nan")
    global_slope: float = float("nan")


def _clamped_window(n, window):
    return min(n, window)


def _ring_rows(n, w_eff):
    """Neighbor rows for a synthetic ring of views: self plus nearest ids.

    The benchmark measures cost, not geometry, so any fixed w_eff-wide
    neighborhood works; offsets 0, 1, -1, 2, -2, ... keep j first.
    """
    offs = [0]
    k = 1
    while len(offs) < w_eff:
        offs.append(k)
        if len(offs) < w_eff:
            offs.append(-k)
        k += 1
    rows = (np.arange(n)[:, None] + np.array(offs)[None, :]) % n
    return rows.astype(np.int64)


def _time_once(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def _mem_estimate(n, w_eff, t, d, heads, is_global):
    # dominant live buffers: scores + softmax output, plus q/k/v projections
    keys = n * t if is_global else w_eff * t
    rows = n * t if is_global else t
    groups = 1 if is_global else n
    scores = 2 * groups * heads * rows * keys * _ITEM
    qkv = 3 * n * t * d * _ITEM
    return scores + qkv


def bench_attention(n_list, window, tokens=16, dim=64, heads=4, layers=1,
                    repeats=5, seed=0) -> BenchReport:
    """Time the local stack and the dense global oracle at each view count.

    n_list must be ascending. Counters record exact key-query pair counts;
    times are forward-only medians over `repeats` runs.
    """
    n_list = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be strictly ascending")
    if not n_list:
        raise ValueError("n_list is empty")

    cfg = StackConfig(layers=layers, dim=dim, mlp_dim=4 * dim,
                      heads=heads, window=window)
    rng = np.random.default_rng(seed)
    p = init_stack_params(cfg, rng)
    report = BenchReport(window=window, tokens=tokens, dim=dim, heads=heads,
                         layers=layers, repeats=repeats)

    cases = []
    for n in n_list:
        w_eff = _clamped_window(n, window)
        rows = _ring_rows(n, w_eff)
        x = ad.constant(rng.standard_normal((n, tokens, dim)))

        def run_local(x=x, rows=rows):
            with ad.no_grad():
                h = x
                for l in range(layers):
                    h = local_attention(h, rows, None, cfg, p, l)
            return h

        def run_global(x=x):
            with ad.no_grad():
                h = x
                for l in range(layers):
                    h = global_self_attention(h, cfg, p, l)
            return h

        counters = AttentionCounters()
        with ad.no_grad():
            h = x
            for l in range(layers):
                h = local_attention(h, rows, None, cfg, p, l, counters)
        local_pairs = counters.pairs

        counters.reset()
        with ad.no_grad():
            h = x
            for l in range(layers):
                h = global_self_attention(h, cfg, p, l, counters)
        global_pairs = counters.pairs

        cases.append((n, w_eff, run_local, run_global,
                      local_pairs, global_pairs))

    # Interleave timing rounds across all N so slow clock drift (thermal
    # or scheduler throttling) biases every size equally instead of
    # inflating whichever N happens to run last.
    for _, _, run_local, run_global, _, _ in cases:
        run_local(), run_global()  # warm caches before timing
    local_times = {n: [] for n in n_list}
    global_times = {n: [] for n in n_list}
    for _ in range(repeats):
        for n, _, run_local, run_global, _, _ in cases:
            local_times[n].append(_time_once(run_local))
            global_times[n].append(_time_once(run_global))

    for n, w_eff, _, _, local_pairs, global_pairs in cases:
        report.entries.append(BenchEntry(
            n_views=n,
            local_pairs=local_pairs,
            global_pairs=global_pairs,
            local_seconds=float(np.median(local_times[n])),
            global_seconds=float(np.median(global_times[n])),
            local_mem_bytes=_mem_estimate(n, w_eff, tokens, dim, heads, False),
            global_mem_bytes=_mem_estimate(n, w_eff, tokens, dim, heads, True),
        ))

    if len(n_list) >= 2:
        ln = np.log(np.array(n_list, dtype=np.float64))
        report.local_slope = float(np.polyfit(
            ln, np.log([e.local_seconds for e in report.entries]), 1)[0])
        report.global_slope = float(np.polyfit(
            ln, np.log([e.global_seconds for e in report.entries]), 1)[0])
    return report


def format_report(report: BenchReport) -> str:
    lines = [
        "attention scaling benchmark",
        f"config: window={report.window} tokens={report.tokens} "
        f"dim={report.dim} heads={report.heads} layers={report.layers} "
        f"repeats={report.repeats}",
        f"{'N':>6} {'local_pairs':>12} {'local_s':>10} {'local_MB':>9} "
        f"{'global_pairs':>13} {'global_s':>10} {'global_MB':>10}",
    ]
    for e in report.entries:
        lines.append(
            f"{e.n_views:>6} {e.local_pairs:>12} {e.local_seconds:>10.6f} "
            f"{e.local_mem_bytes / 2**20:>9.2f} {e.global_pairs:>13} "
            f"{e.global_seconds:>10.6f} {e.global_mem_bytes / 2**20:>10.2f}")
    lines.append(f"fitted log-log slope: local {report.local_slope:.3f} "
                 f"global {report.global_slope:.3f}")
    return "\n".join(lines) + "\n"
