"""Analytic FLOP counts and measured wall-clock for one mixing sublayer.

FLOPs count one multiply-add as 2. Counts are derived from the shapes
alone and are reported separately from the timings, which are medians
over ``iters`` runs after one warm-up call.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .mixing import (
    AttentionParams,
    apply_fnet_fft,
    apply_mixing,
    attention_forward,
    build_causal_mask,
    build_fnetar_matrix,
)
from .numerics import Tensor


def attention_flops(l_seq: int, l_mem: int, d: int, n_heads: int) -> int:
    width = l_mem + l_seq
    projections = 2 * l_seq * d * d * 2 + 2 * width * d * d * 2  # Q and O on the segment, K and V on [mem; x]
    scores = 2 * l_seq * width * d
    softmax = 3 * n_heads * l_seq * width  # exp, sum, divide
    values = 2 * l_seq * width * d
    return projections + scores + softmax + values


def mixing_flops(l_seq: int, l_mem: int, d: int) -> int:
    """Dense ``l_seq x (l_mem + l_seq)`` contraction per feature column."""
    return 2 * l_seq * (l_mem + l_seq) * d


def fft_flops(n: int, d: int) -> int:
    """Conventional ``5 n log2 n`` estimate per complex radix-2 transform, one per feature."""
    return int(5 * n * math.log2(n) * d) if n > 1 else 0


@dataclass
class BenchRow:
    name: str
    flops: int
    wall_ms: float | None


def _median_ms(fn, iters: int) -> float:
    fn()
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def run_bench(l_seq: int, l_mem: int, d_model: int, iters: int = 5, n_heads: int = 4,
              seed: int = 0, timing: bool = True) -> list[BenchRow]:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((l_seq, d_model)))
    mem = Tensor(rng.standard_normal((l_mem, d_model)))
    params = AttentionParams(*(Tensor(rng.normal(0, 0.02, (d_model, d_model))) for _ in range(4)),
                             n_heads=n_heads)
    mask = build_causal_mask(l_seq, l_mem)
    op = build_fnetar_matrix(l_seq, l_mem)

    rows = [
        BenchRow("attention", attention_flops(l_seq, l_mem, d_model, n_heads), None),
        BenchRow("fnetar_mixing", mixing_flops(l_seq, l_mem, d_model), None),
    ]
    fft_ok = l_seq & (l_seq - 1) == 0
    if fft_ok:
        rows.append(BenchRow("fnet_fft", fft_flops(l_seq, d_model), None))
    if timing:
        with nx.no_grad():
            rows[0].wall_ms = _median_ms(lambda: attention_forward(x, mem, params, mask), iters)
            rows[1].wall_ms = _median_ms(lambda: apply_mixing(x, mem, op), iters)
            if fft_ok:
                rows[2].wall_ms = _median_ms(lambda: apply_fnet_fft(x.data), iters)
    return rows


def format_table(rows: list[BenchRow], timing: bool = True) -> str:
    header = ["op", "flops"] + (["wall_ms"] if timing else [])
    lines = ["\t".join(header)]
    for r in rows:
        cells = [r.name, str(r.flops)]
        if timing:
            cells.append("nan" if r.wall_ms is None else f"{r.wall_ms:.3f}")
        lines.append("\t".join(cells))
    return "\n".join(lines)
