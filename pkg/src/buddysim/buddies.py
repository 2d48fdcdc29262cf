"""Coverage-threshold buddy lists.

For each pivot expert, candidates are ordered by descending conditional
co-activation (ties toward the lower index) and the list is cut at the
shortest prefix whose cumulative mass reaches the coverage threshold alpha,
then capped at k_max entries. Lists are always a prefix of that fixed
ordering, so raising alpha only ever extends them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePivotError, FormatError, InputError
from .profiler import CoActivationStats, ConditionalRow, conditional_row

_TABLE_MAGIC = b"BSBT"
_TABLE_VERSION = 1

# absolute slack for cumulative-mass comparisons; rows sum to 1 only to
# floating precision, so alpha = 1.0 must still terminate
_COVER_TOL = 1e-9


@dataclass(frozen=True)
class BuddyEntry:
    buddy: int
    weight: float
    rank: int  # 1-based position in the pivot's ordering


class BuddyTable:
    """Per-pivot ranked stand-in lists for one layer."""

    def __init__(self, layer: int, num_experts: int, alpha: float, k_max: int,
                 ids: list[np.ndarray], weights: list[np.ndarray]):
        if len(ids) != num_experts or len(weights) != num_experts:
            raise InputError("per-pivot list count != num_experts")
        self.layer = layer
        self.num_experts = num_experts
        self.alpha = alpha
        self.k_max = k_max
        self._ids = ids
        self._weights = weights

    def ids(self, pivot: int) -> np.ndarray:
        self._check(pivot)
        return self._ids[pivot]

    def weights(self, pivot: int) -> np.ndarray:
        self._check(pivot)
        return self._weights[pivot]

    def entries(self, pivot: int) -> list[BuddyEntry]:
        self._check(pivot)
        return [
            BuddyEntry(buddy=int(j), weight=float(w), rank=r + 1)
            for r, (j, w) in enumerate(zip(self._ids[pivot], self._weights[pivot]))
        ]

    def weight_of(self, pivot: int, buddy: int) -> float:
        self._check(pivot)
        hit = np.nonzero(self._ids[pivot] == buddy)[0]
        if hit.size == 0:
            raise InputError(f"expert {buddy} not in buddy list of pivot {pivot}")
        return float(self._weights[pivot][hit[0]])

    def total_entries(self) -> int:
        return sum(len(v) for v in self._ids)

    def _check(self, pivot: int) -> None:
        if not (0 <= pivot < self.num_experts):
            raise InputError(f"pivot {pivot} out of range")


def cft_prefix(row: ConditionalRow, alpha: float) -> int:
    """Smallest t such that the t highest-mass candidates cover alpha.

    Candidates with zero mass never count; an all-zero row is degenerate.
    """
    if not (0.0 < alpha <= 1.0):
        raise InputError("alpha must be in (0, 1]")
    q = np.asarray(row.q, dtype=np.float64)
    total = q.sum()
    if total <= 0.0:
        raise DegeneratePivotError(f"pivot {row.pivot} row has no mass")
    order = np.argsort(-q, kind="stable")
    sorted_q = q[order]
    nnz = int(np.count_nonzero(sorted_q))
    cum = np.cumsum(sorted_q[:nnz])
    t = int(np.searchsorted(cum, alpha - _COVER_TOL, side="left")) + 1
    return min(t, nnz)


def _pivot_order(q: np.ndarray) -> np.ndarray:
    return np.argsort(-q, kind="stable")


def build_table(stats: CoActivationStats, alpha: float, k_max: int, mode: str = "binary") -> BuddyTable:
    """Build the per-pivot buddy lists for one layer.

    Every pivot whose smoothed row has mass gets at least one entry; a pivot
    with a fully zero row (possible only when laplace_eps == 0) gets an empty
    list and downstream substitution falls back for it.
    """
    if not (0.0 < alpha <= 1.0):
        raise InputError("alpha must be in (0, 1]")
    if k_max < 1:
        raise InputError("k_max must be >= 1")
    if stats.tokens_seen == 0 and stats.laplace_eps == 0.0:
        raise InputError("cannot build a buddy table from empty stats without smoothing")
    ids: list[np.ndarray] = []
    weights: list[np.ndarray] = []
    for pivot in range(stats.num_experts):
        try:
            row = conditional_row(stats, pivot, mode=mode)
        except DegeneratePivotError:
            ids.append(np.empty(0, dtype=np.int64))
            weights.append(np.empty(0))
            continue
        t = cft_prefix(row, alpha)
        n = min(t, k_max)
        order = _pivot_order(row.q)[:n]
        ids.append(order.astype(np.int64))
        weights.append(row.q[order].copy())
    return BuddyTable(stats.layer, stats.num_experts, alpha, k_max, ids, weights)


@dataclass(frozen=True)
class SizeReport:
    histogram: dict  # list length -> pivot count
    mean_len: float
    max_len: int
    total_entries: int
    entry_bound: int  # k_max * num_experts

    def format(self) -> str:
        lines = [
            f"buddy entries: {self.total_entries} (bound {self.entry_bound}), "
            f"mean list {self.mean_len:.2f}, max {self.max_len}"
        ]
        for n in sorted(self.histogram):
            lines.append(f"  len {n:>3}: {self.histogram[n]} pivots")
        return "\n".join(lines)


def table_size_report(table: BuddyTable) -> SizeReport:
    lens = [len(table.ids(p)) for p in range(table.num_experts)]
    hist: dict[int, int] = {}
    for n in lens:
        hist[n] = hist.get(n, 0) + 1
    return SizeReport(
        histogram=hist,
        mean_len=float(np.mean(lens)) if lens else 0.0,
        max_len=max(lens) if lens else 0,
        total_entries=sum(lens),
        entry_bound=table.k_max * table.num_experts,
    )


_TBL_HEADER = struct.Struct("<4sIIIdI")  # magic, version, layer, E, alpha, k_max


def save_table(table: BuddyTable, path) -> None:
    with open(path, "wb") as f:
        f.write(
            _TBL_HEADER.pack(
                _TABLE_MAGIC, _TABLE_VERSION, table.layer, table.num_experts,
                table.alpha, table.k_max,
            )
        )
        for pivot in range(table.num_experts):
            ids = table.ids(pivot)
            ws = table.weights(pivot)
            f.write(struct.pack("<I", len(ids)))
            for j, w in zip(ids, ws):
                f.write(struct.pack("<Id", int(j), float(w)))


def load_table(path) -> BuddyTable:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _TBL_HEADER.size:
        raise FormatError(f"{path}: truncated buddy table")
    magic, version, layer, E, alpha, k_max = _TBL_HEADER.unpack_from(raw)
    if magic != _TABLE_MAGIC:
        raise FormatError(f"{path}: not a buddy table file")
    if version != _TABLE_VERSION:
        raise FormatError(f"{path}: unsupported table version {version}")
    off = _TBL_HEADER.size
    ids: list[np.ndarray] = []
    weights: list[np.ndarray] = []
    entry = struct.Struct("<Id")
    for _ in range(E):
        if off + 4 > len(raw):
            raise FormatError(f"{path}: truncated pivot header")
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + n * entry.size > len(raw):
            raise FormatError(f"{path}: truncated pivot entries")
        pid = np.empty(n, dtype=np.int64)
        pw = np.empty(n)
        for r in range(n):
            pid[r], pw[r] = entry.unpack_from(raw, off)
            off += entry.size
        ids.append(pid)
        weights.append(pw)
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes")
    return BuddyTable(layer, E, alpha, k_max, ids, weights)


def export_table_csv(table: BuddyTable, path) -> None:
    """One row per (pivot, rank): pivot,rank,buddy,weight."""
    with open(path, "w") as f:
        f.write("pivot,rank,buddy,weight\n")
        for pivot in range(table.num_experts):
            for r, (j, w) in enumerate(zip(table.ids(pivot), table.weights(pivot)), start=1):
                f.write(f"{pivot},{r},{int(j)},{float(w)!r}\n")
