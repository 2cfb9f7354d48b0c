"""Single-block forward timing: selective-scan (Vim) vs attention (ViT)."""
from __future__ import annotations

import csv
import statistics
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .vim import MambaBlock, VimConfig
from .vit import VitBlock, VitConfig

BLOCKS = ("vim", "vit")
CSV_HEADER = ["block", "seq_len", "median_ms", "alloc_bytes"]


@dataclass
class BenchRow:
    block: str
    seq_len: int
    median_ms: float
    alloc_bytes: int

    def as_row(self) -> list:
        return [self.block, self.seq_len, f"{self.median_ms:.3f}", self.alloc_bytes]


def make_block(kind: str, dim: int, rng: np.random.Generator):
    if kind == "vim":
        return MambaBlock(VimConfig(depth=1, dim=dim), rng)
    if kind == "vit":
        return VitBlock(VitConfig(depth=1, dim=dim, heads=2), rng)
    raise ValueError(f"unknown block {kind!r}; expected one of {BLOCKS}")


def time_block(block, x: T.Tensor, repeats: int, warmup: int = 1) -> tuple[float, int]:
    """Median wall time in ms over ``repeats`` forwards, and peak bytes of one extra forward."""
    with T.no_grad():
        for _ in range(warmup):
            block(x)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            block(x)
            times.append((time.perf_counter() - t0) * 1e3)
        # allocation probe runs separately so tracing overhead never hits the timings
        tracemalloc.start()
        try:
            block(x)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
    return statistics.median(times), peak


def bench(seq_lens, blocks=BLOCKS, repeats: int = 20, dim: int = 64, seed: int = 0,
          dtype=np.float32) -> list[BenchRow]:
    rows = []
    with T.default_dtype(dtype):
        for kind in blocks:
            block = make_block(kind, dim, np.random.default_rng(seed))
            for L in seq_lens:
                x = T.Tensor(np.random.default_rng(seed + L).normal(size=(1, L, dim)))
                ms, peak = time_block(block, x, repeats)
                rows.append(BenchRow(kind, int(L), ms, int(peak)))
    return rows


def write_csv(rows: list[BenchRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(r.as_row())


def time_ratio(rows: list[BenchRow], block: str, hi: int, lo: int) -> float:
    t = {r.seq_len: r.median_ms for r in rows if r.block == block}
    return t[hi] / t[lo]
