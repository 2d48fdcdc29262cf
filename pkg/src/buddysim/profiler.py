"""Streaming co-activation statistics.

One CoActivationStats per layer. observe() folds in a routing decision;
conditional_row() turns the accumulated pair matrix into the normalized
conditional distribution used to rank candidate stand-ins. Binary counts
(did i and j co-fire) and weighted mass (min of the two renormalized
probabilities) are maintained side by side; which one feeds ranking is the
builder's choice.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneratePivotError, FormatError, InputError
from .model import RouterDecision

_STATS_MAGIC = b"BSST"
_STATS_VERSION = 1


@dataclass
class CoActivationStats:
    layer: int
    num_experts: int
    warmup_steps: int = 256
    warmup_weight: float = 0.0
    laplace_eps: float = 1e-3
    tokens_seen: int = 0
    # float64 counts: warm-up down-weighting makes them fractional
    counts: np.ndarray = field(default=None)        # (E,) activations per expert
    pair_counts: np.ndarray = field(default=None)   # (E,E) symmetric co-fire counts
    pair_weights: np.ndarray = field(default=None)  # (E,E) symmetric weighted mass

    def __post_init__(self):
        E = self.num_experts
        if E < 1:
            raise InputError("num_experts must be >= 1")
        if self.laplace_eps < 0:
            raise InputError("laplace_eps must be nonnegative")
        if not (0.0 <= self.warmup_weight <= 1.0):
            raise InputError("warmup_weight must be in [0, 1]")
        if self.warmup_steps < 0:
            raise InputError("warmup_steps must be nonnegative")
        if self.counts is None:
            self.counts = np.zeros(E)
        if self.pair_counts is None:
            self.pair_counts = np.zeros((E, E))
        if self.pair_weights is None:
            self.pair_weights = np.zeros((E, E))

    def config_tuple(self) -> tuple:
        return (self.layer, self.num_experts, self.warmup_steps, self.warmup_weight, self.laplace_eps)


@dataclass(frozen=True)
class ConditionalRow:
    """Normalized co-activation row for one pivot; q[pivot] == 0, sum == 1."""

    pivot: int
    q: np.ndarray


def observe(stats: CoActivationStats, decision: RouterDecision, step: int) -> None:
    """Fold one routing decision into the statistics.

    step is the token's position in the stream; positions before
    warmup_steps are down-weighted by warmup_weight.
    """
    s = decision.topk
    if decision.layer != stats.layer:
        raise InputError(f"decision layer {decision.layer} != stats layer {stats.layer}")
    ids = [int(e) for e in s]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate experts in selected set")
    if min(ids) < 0 or max(ids) >= stats.num_experts:
        raise InputError("expert id out of range")
    w = stats.warmup_weight if step < stats.warmup_steps else 1.0
    stats.tokens_seen += 1
    if w == 0.0:
        return
    p = decision.probs_renorm
    stats.counts[ids] += w
    for a in range(len(ids)):
        i = ids[a]
        for b in range(a + 1, len(ids)):
            j = ids[b]
            stats.pair_counts[i, j] += w
            stats.pair_counts[j, i] += w
            m = w * min(p[a], p[b])
            stats.pair_weights[i, j] += m
            stats.pair_weights[j, i] += m


def conditional_row(stats: CoActivationStats, pivot: int, mode: str = "binary") -> ConditionalRow:
    """Smoothed, normalized conditional co-activation distribution for a pivot.

    The diagonal is forced to zero before normalization; laplace_eps is added
    to off-diagonal entries only. A pivot with no mass and eps == 0 is
    degenerate (raises); with eps > 0 it yields the uniform-over-others row.
    """
    if not (0 <= pivot < stats.num_experts):
        raise InputError(f"pivot {pivot} out of range")
    if mode == "binary":
        m = stats.pair_counts
    elif mode == "weighted":
        m = stats.pair_weights
    else:
        raise InputError(f"unknown mode {mode!r}")
    row = m[pivot].astype(np.float64).copy()
    row += stats.laplace_eps
    row[pivot] = 0.0
    total = row.sum()
    if total <= 0.0:
        raise DegeneratePivotError(f"pivot {pivot} has no co-activation mass and eps == 0")
    return ConditionalRow(pivot=pivot, q=row / total)


def merge(a: CoActivationStats, b: CoActivationStats) -> CoActivationStats:
    """Combine shard statistics; commutative and associative."""
    if a.config_tuple() != b.config_tuple():
        raise InputError("cannot merge stats with different layer/shape/config")
    out = CoActivationStats(
        layer=a.layer,
        num_experts=a.num_experts,
        warmup_steps=a.warmup_steps,
        warmup_weight=a.warmup_weight,
        laplace_eps=a.laplace_eps,
        tokens_seen=a.tokens_seen + b.tokens_seen,
    )
    out.counts = a.counts + b.counts
    out.pair_counts = a.pair_counts + b.pair_counts
    out.pair_weights = a.pair_weights + b.pair_weights
    return out


_HEADER = struct.Struct("<4sIIIIddQ")  # magic, version, layer, E, warmup_steps, warmup_weight, eps, tokens_seen


def save_stats(stats: CoActivationStats, path) -> None:
    E = stats.num_experts
    with open(path, "wb") as f:
        f.write(
            _HEADER.pack(
                _STATS_MAGIC,
                _STATS_VERSION,
                stats.layer,
                E,
                stats.warmup_steps,
                stats.warmup_weight,
                stats.laplace_eps,
                stats.tokens_seen,
            )
        )
        f.write(stats.counts.astype("<f8").tobytes())
        f.write(stats.pair_counts.astype("<f8").tobytes())
        f.write(stats.pair_weights.astype("<f8").tobytes())


def load_stats(path) -> CoActivationStats:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated stats file")
    magic, version, layer, E, wsteps, wweight, eps, seen = _HEADER.unpack_from(raw)
    if magic != _STATS_MAGIC:
        raise FormatError(f"{path}: not a co-activation stats file")
    if version != _STATS_VERSION:
        raise FormatError(f"{path}: unsupported stats version {version}")
    need = _HEADER.size + 8 * (E + 2 * E * E)
    if len(raw) != need:
        raise FormatError(f"{path}: wrong payload size")
    off = _HEADER.size
    counts = np.frombuffer(raw, dtype="<f8", count=E, offset=off).copy()
    off += 8 * E
    pc = np.frombuffer(raw, dtype="<f8", count=E * E, offset=off).reshape(E, E).copy()
    off += 8 * E * E
    pw = np.frombuffer(raw, dtype="<f8", count=E * E, offset=off).reshape(E, E).copy()
    return CoActivationStats(
        layer=layer,
        num_experts=E,
        warmup_steps=wsteps,
        warmup_weight=wweight,
        laplace_eps=eps,
        tokens_seen=seen,
        counts=counts,
        pair_counts=pc,
        pair_weights=pw,
    )


def export_coactivation_csv(stats: CoActivationStats, path, mode: str = "binary") -> None:
    """Heatmap-ready matrix dump, one row per pivot."""
    m = stats.pair_counts if mode == "binary" else stats.pair_weights
    if mode not in ("binary", "weighted"):
        raise InputError(f"unknown mode {mode!r}")
    with open(path, "w") as f:
        for row in m:
            f.write(",".join(repr(float(v)) for v in row))
            f.write("\n")


def gini(counts: np.ndarray) -> float:
    """Gini coefficient of a nonnegative count vector (0 = even, ->1 = skewed)."""
    x = np.sort(np.asarray(counts, dtype=np.float64))
    n = x.size
    total = x.sum()
    if n == 0 or total <= 0:
        return 0.0
    cum = np.cumsum(x)
    return float((n + 1 - 2 * (cum / total).sum()) / n)
