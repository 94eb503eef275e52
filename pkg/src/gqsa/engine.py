"""Multithreaded sparse GEMV over GQS layers with dequantize-on-the-fly.

Every strategy runs the same group walk: for a contiguous range of kept
groups, unpack their codes, dequantize them with the per-group scale/zero,
gather the matching ``G``-wide slices of ``x`` through ``group_cols`` and
reduce each group to a dot product, then sum groups into their rows. Work is
processed in tiles of ``chunk_groups`` groups, so no dense copy of the
weight matrix is ever built.

Slice-K hands each worker a contiguous block of output rows. Stream-K hands
each worker an equal share of the global group range ``0..nnzg``; a row whose
groups straddle two workers gets a private partial sum from each, and those
partials are added in ascending worker order after the parallel phase.
"""

from __future__ import annotations

import enum
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .core import ShapeError, as_vector
from .gqs import GQSLayer, footprint

DEFAULT_CHUNK_GROUPS = 16384


class Strategy(str, enum.Enum):
    REFERENCE = "reference"
    SLICE_K = "slicek"
    STREAM_K = "streamk"


@dataclass(frozen=True)
class EngineConfig:
    workers: int = 1
    strategy: Strategy = Strategy.STREAM_K
    tile_rows: int = 1
    chunk_groups: int = DEFAULT_CHUNK_GROUPS

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.workers < 1 or self.tile_rows < 1 or self.chunk_groups < 1:
            raise ValueError("workers, tile_rows and chunk_groups must all be >= 1")


@dataclass
class WorkPartition:
    strategy: Strategy
    group_ranges: List[Tuple[int, int]]
    row_ranges: List[Tuple[int, int]]
    work: np.ndarray  # groups per worker

    @property
    def workers(self) -> int:
        return len(self.group_ranges)


@dataclass
class BalanceStats:
    counts: np.ndarray

    @property
    def imbalance(self) -> float:
        mean = float(np.mean(self.counts)) if self.counts.size else 0.0
        return float(self.counts.max()) / mean if mean > 0 else 1.0

    @property
    def straggler_ratio(self) -> float:
        top = int(self.counts.max()) if self.counts.size else 0
        if top == 0:
            return 1.0
        return top / max(int(self.counts.min()), 1)


def rows_of(layer: GQSLayer, groups: np.ndarray) -> np.ndarray:
    """Owning row of each global group index (binary search over row_index)."""
    return np.searchsorted(layer.row_index, groups, side="right") - 1


_LUT4 = np.stack([np.arange(256) & 0x0F, np.arange(256) >> 4], axis=1).astype(np.float32)
_LUT8 = np.arange(256, dtype=np.float32)


def _code_floats(layer: GQSLayer, a: int, b: int) -> np.ndarray:
    """Codes of groups ``a..b`` as float32, decoded straight from the packed bytes."""
    g, bits = layer.group_size, layer.bits
    start, stop = a * g * bits, b * g * bits
    if bits == 8:
        return np.take(_LUT8, layer.packed_codes[a * g:b * g]).reshape(b - a, g)
    if bits == 4 and start % 8 == 0 and stop % 8 == 0:
        return np.take(_LUT4, layer.packed_codes[start // 8:stop // 8], axis=0).reshape(b - a, g)
    return layer.codes(a, b).astype(np.float32)


def _walk_groups(layer: GQSLayer, xg: np.ndarray, lo: int, hi: int, chunk: int):
    """Row sums of groups ``lo..hi``; returns ``(first_row, partial)``.

    ``partial[i]`` belongs to row ``first_row + i``; rows in between that own
    no groups get 0.
    """
    if hi <= lo:
        return 0, np.zeros(0, dtype=np.float32)
    ri = layer.row_index
    first = int(rows_of(layer, np.array([lo]))[0])
    last = int(rows_of(layer, np.array([hi - 1]))[0])
    partial = np.zeros(last - first + 1, dtype=np.float32)
    for a in range(lo, hi, chunk):
        b = min(a + chunk, hi)
        w = _code_floats(layer, a, b)
        w -= layer.zeros[a:b, None]
        w *= layer.scales[a:b, None]
        dots = np.einsum("ij,ij->i", w, xg[layer.group_cols[a:b]])
        r0 = int(rows_of(layer, np.array([a]))[0])
        r1 = int(rows_of(layer, np.array([b - 1]))[0])
        bounds = np.clip(ri[r0:r1 + 2], a, b) - a
        nonempty = np.flatnonzero(bounds[1:] > bounds[:-1])
        partial[r0 - first + nonempty] += np.add.reduceat(dots, bounds[nonempty])
    return first, partial


def _check_x(layer: GQSLayer, x) -> np.ndarray:
    x = as_vector(x, "x")
    if x.shape[0] != layer.cols:
        raise ShapeError(f"x has length {x.shape[0]}, layer has {layer.cols} columns")
    return x.reshape(layer.n_group_cols, layer.group_size)


def gemv_reference(layer: GQSLayer, x, chunk_groups: int = DEFAULT_CHUNK_GROUPS) -> np.ndarray:
    """Single-threaded walk of all kept groups in storage order."""
    xg = _check_x(layer, x)
    y = np.zeros(layer.rows, dtype=np.float32)
    first, partial = _walk_groups(layer, xg, 0, layer.nnzg, chunk_groups)
    y[first:first + partial.size] += partial
    return y + layer.bias_or_zeros()


def partition_slice_k(layer: GQSLayer, workers: int, tile_rows: int = 1) -> WorkPartition:
    """Contiguous row chunks of ``ceil(rows / P)`` rows (rounded up to ``tile_rows``)."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    per = -(-layer.rows // workers)
    per = -(-per // tile_rows) * tile_rows
    row_ranges = [(min(w * per, layer.rows), min((w + 1) * per, layer.rows)) for w in range(workers)]
    ri = layer.row_index
    group_ranges = [(int(ri[a]), int(ri[b])) for a, b in row_ranges]
    work = np.array([b - a for a, b in group_ranges], dtype=np.int64)
    return WorkPartition(Strategy.SLICE_K, group_ranges, row_ranges, work)


def partition_stream_k(layer: GQSLayer, workers: int) -> WorkPartition:
    """Split the global group range into ``P`` pieces whose sizes differ by at most 1."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    n = layer.nnzg
    base, extra = divmod(n, workers)
    sizes = np.array([base + (w < extra) for w in range(workers)], dtype=np.int64)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    group_ranges = [(int(bounds[w]), int(bounds[w + 1])) for w in range(workers)]
    row_ranges = []
    for lo, hi in group_ranges:
        if hi > lo:
            r = rows_of(layer, np.array([lo, hi - 1]))
            row_ranges.append((int(r[0]), int(r[1]) + 1))
        else:
            row_ranges.append((0, 0))
    return WorkPartition(Strategy.STREAM_K, group_ranges, row_ranges, sizes)


_pools: Dict[int, ThreadPoolExecutor] = {}
_pools_lock = threading.Lock()


def _pool(workers: int) -> ThreadPoolExecutor:
    with _pools_lock:
        pool = _pools.get(workers)
        if pool is None:
            pool = _pools[workers] = ThreadPoolExecutor(workers, thread_name_prefix="gemv")
        return pool


def partition(layer: GQSLayer, cfg: EngineConfig) -> WorkPartition:
    if cfg.strategy is Strategy.SLICE_K:
        return partition_slice_k(layer, cfg.workers, cfg.tile_rows)
    if cfg.strategy is Strategy.STREAM_K:
        return partition_stream_k(layer, cfg.workers)
    return partition_stream_k(layer, 1)


def gemv_parallel(layer: GQSLayer, x, cfg: EngineConfig) -> Tuple[np.ndarray, BalanceStats]:
    xg = _check_x(layer, x)
    part = partition(layer, cfg)
    stats = BalanceStats(part.work)
    if cfg.strategy is Strategy.REFERENCE:
        return gemv_reference(layer, x, cfg.chunk_groups), stats

    def run(lo_hi):
        return _walk_groups(layer, xg, lo_hi[0], lo_hi[1], cfg.chunk_groups)

    if part.workers == 1:
        results = [run(part.group_ranges[0])]
    else:
        results = list(_pool(part.workers).map(run, part.group_ranges))

    y = np.zeros(layer.rows, dtype=np.float32)
    if cfg.strategy is Strategy.SLICE_K:
        # row blocks are disjoint: plain stores
        for first, partial in results:
            y[first:first + partial.size] = partial
    else:
        # fix-up: ordered reduction of private partials
        for first, partial in results:
            y[first:first + partial.size] += partial
    return y + layer.bias_or_zeros(), stats


def relative_error(y, ref) -> float:
    """``max|y - ref| / max|ref|`` (0 when both are zero)."""
    y = np.asarray(y, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    err = float(np.max(np.abs(y - ref))) if y.size else 0.0
    scale = float(np.max(np.abs(ref))) if ref.size else 0.0
    if scale == 0.0:
        return 0.0 if err == 0.0 else float("inf")
    return err / scale


BENCH_COLUMNS = (
    "strategy", "workers", "sparsity", "bits", "G",
    "median_ns", "p10_ns", "p90_ns", "imbalance", "straggler_ratio",
)


@dataclass
class BenchReport:
    strategy: Strategy
    workers: int
    samples_ns: np.ndarray
    bytes_touched: int
    stats: BalanceStats
    layer_info: dict = field(default_factory=dict)

    @property
    def median_ns(self) -> float:
        return float(np.median(self.samples_ns))

    @property
    def p10_ns(self) -> float:
        return float(np.percentile(self.samples_ns, 10))

    @property
    def p90_ns(self) -> float:
        return float(np.percentile(self.samples_ns, 90))

    @property
    def gbps(self) -> float:
        return self.bytes_touched / self.median_ns if self.median_ns > 0 else 0.0

    def row(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "workers": self.workers,
            "sparsity": round(self.layer_info.get("sparsity", 0.0), 6),
            "bits": self.layer_info.get("bits"),
            "G": self.layer_info.get("G"),
            "median_ns": int(self.median_ns),
            "p10_ns": int(self.p10_ns),
            "p90_ns": int(self.p90_ns),
            "imbalance": round(self.stats.imbalance, 6),
            "straggler_ratio": round(self.stats.straggler_ratio, 6),
        }


def bench_gemv(layer: GQSLayer, x, cfg: EngineConfig, reps: int = 5, warmup: int = 1) -> BenchReport:
    """Time ``reps`` GEMVs after ``warmup`` discarded runs (monotonic clock)."""
    if reps < 3:
        raise ValueError("reps must be >= 3")
    x = as_vector(x, "x")
    stats = None
    for _ in range(max(warmup, 1)):
        _, stats = gemv_parallel(layer, x, cfg)
    samples = np.empty(reps, dtype=np.int64)
    for i in range(reps):
        t0 = time.perf_counter_ns()
        gemv_parallel(layer, x, cfg)
        samples[i] = time.perf_counter_ns() - t0
    info = {"sparsity": layer.sparsity, "bits": layer.bits, "G": layer.group_size}
    return BenchReport(cfg.strategy, cfg.workers, samples, footprint(layer).payload_bits // 8, stats, info)
