"""Substitution gates.

Two independent checks decide whether replacement may run at all:

* token gate: normalized routing entropy of the selected set. Peaked
  routing (low entropy, or a large top-2 margin when that check is
  enabled) marks a token as sensitive and forbids replacement for it.
* distribution gate: fraction of a batch's requested experts that are
  not GPU-resident. When too much of the batch would be rewritten at
  once, replacement is bypassed for the whole batch.

Both default to permissive behavior; substitution consults the combined
outcome per token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import CalibrationError, ConfigurationError, InputError
from .model import RouterDecision


@dataclass(frozen=True)
class GateConfig:
    tau: float | None = None              # fixed entropy threshold
    tau_percentile: float | None = 15.0   # or calibrate from a sample distribution
    margin_gamma: float | None = None     # optional top-2 margin check, None = disabled
    temperature: float = 1.0
    beta: float = 1.0                     # batch bypass threshold on delta
    pcie_budget_bytes: float | None = None  # per-step transfer budget, None = disabled
    expert_bytes: float = 0.0

    def validate(self) -> "GateConfig":
        if (self.tau is None) == (self.tau_percentile is None):
            raise ConfigurationError("exactly one of tau / tau_percentile must be set")
        if self.tau is not None and not (0.0 <= self.tau <= 1.0):
            raise ConfigurationError("tau must be in [0, 1]")
        if self.tau_percentile is not None and not (0.0 <= self.tau_percentile <= 100.0):
            raise ConfigurationError("tau_percentile must be in [0, 100]")
        if self.margin_gamma is not None and not (0.0 <= self.margin_gamma <= 1.0):
            raise ConfigurationError("margin_gamma must be in [0, 1]")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be > 0")
        if not (0.0 <= self.beta <= 1.0):
            raise ConfigurationError("beta must be in [0, 1]")
        if self.pcie_budget_bytes is not None and self.pcie_budget_bytes < 0:
            raise ConfigurationError("pcie_budget_bytes must be nonnegative")
        return self

    def with_tau(self, tau: float) -> "GateConfig":
        return replace(self, tau=float(tau), tau_percentile=None)


@dataclass(frozen=True)
class GateOutcome:
    token_allowed: bool
    batch_allowed: bool
    tae: float
    margin: float
    delta: float

    @property
    def allowed(self) -> bool:
        return self.token_allowed and self.batch_allowed


def tae(decision: RouterDecision) -> float:
    """Normalized entropy of the renormalized selected-set probabilities.

    0 * log 0 counts as 0; a single-slot selection has entropy 0 by
    convention. Always in [0, 1]: 0 = fully peaked, 1 = uniform.
    """
    p = np.asarray(decision.probs_renorm, dtype=np.float64)
    k = p.size
    if k == 1:
        return 0.0
    nz = p[p > 0.0]
    h = -float(np.sum(nz * np.log(nz))) / math.log(k)
    return min(1.0, max(0.0, h))


def margin(decision: RouterDecision) -> float:
    """Top-2 gap of the renormalized probabilities; 1.0 for single-slot."""
    p = np.asarray(decision.probs_renorm, dtype=np.float64)
    if p.size == 1:
        return 1.0
    top2 = np.sort(p)[-2:]
    return float(top2[1] - top2[0])


def token_gate(decision: RouterDecision, cfg: GateConfig) -> bool:
    """True when replacement is allowed for this token.

    Forbidden iff the entropy is at or below tau, or (when the margin check
    is enabled) the top-2 margin is at or above margin_gamma.
    """
    if cfg.tau is None:
        raise ConfigurationError("token_gate needs a resolved tau (calibrate first)")
    h = tae(decision)
    if h <= cfg.tau:
        return False
    if cfg.margin_gamma is not None and margin(decision) >= cfg.margin_gamma:
        return False
    return True


def calibrate_tau(samples, percentile: float) -> float:
    """Nearest-rank percentile of an entropy sample distribution.

    Needs at least 100 samples to be meaningful; fewer raises.
    """
    x = np.sort(np.asarray(list(samples), dtype=np.float64))
    n = x.size
    if n < 100:
        raise CalibrationError(f"need >= 100 entropy samples, got {n}")
    if not (0.0 <= percentile <= 100.0):
        raise InputError("percentile must be in [0, 100]")
    idx = max(1, math.ceil(percentile * n / 100.0)) - 1
    return float(x[min(idx, n - 1)])


def distribution_gate(requested, residency_mask: np.ndarray, beta: float) -> tuple[float, bool]:
    """CPU-demand fraction of a batch's requested experts vs the bypass threshold.

    Args:
        requested: expert ids requested by the batch at this layer (with or
            without duplicates; duplicates are counted as given).
        residency_mask: boolean GPU-residency snapshot, indexed by expert id.

    Returns:
        (delta, allowed): delta is the fraction of requests that are not
        resident; allowed is False (bypass replacement) iff delta >= beta.
    """
    req = np.asarray(list(requested), dtype=np.int64)
    if req.size == 0:
        raise InputError("requested expert set is empty")
    mask = np.asarray(residency_mask, dtype=bool)
    if req.min() < 0 or req.max() >= mask.size:
        raise InputError("requested expert id out of range")
    delta = float(np.mean(~mask[req]))
    return delta, not (delta >= beta)


def evaluate_gates(decisions, residency_mask: np.ndarray, cfg: GateConfig) -> list[GateOutcome]:
    """Per-token gate outcomes for one batch-layer under one residency snapshot."""
    if not decisions:
        return []
    requested = np.concatenate([d.topk for d in decisions])
    delta, batch_ok = distribution_gate(requested, residency_mask, cfg.beta)
    out = []
    for d in decisions:
        out.append(
            GateOutcome(
                token_allowed=token_gate(d, cfg),
                batch_allowed=batch_ok,
                tae=tae(d),
                margin=margin(d),
                delta=delta,
            )
        )
    return out


# default candidate grid for the adaptive bypass threshold; includes 0.0 so a
# zero budget always has a feasible (never-admit) candidate
DEFAULT_BETA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


def derive_beta(budget_bytes: float, expert_bytes: float, nhat_by_beta, current_beta: float) -> float:
    """Largest candidate threshold whose estimated admitted transfer volume fits the budget.

    nhat_by_beta maps each candidate beta to the running average of per-step
    would-be miss counts admitted past the gate at that threshold. Admitted
    volume grows with beta, so the result is the most permissive affordable
    setting; if nothing fits, the current beta is kept.
    """
    if expert_bytes < 0 or budget_bytes < 0:
        raise InputError("budget and expert bytes must be nonnegative")
    feasible = [b for b, nhat in nhat_by_beta.items() if nhat * expert_bytes <= budget_bytes]
    if not feasible:
        return float(current_beta)
    return float(max(feasible))


class BetaController:
    """EMA-driven refresh of the distribution-gate threshold.

    Records (delta, miss_count) once per gate evaluation; every `period`
    records, re-derives beta from per-candidate running averages of the
    admitted miss volume.
    """

    def __init__(self, budget_bytes: float, expert_bytes: float, initial_beta: float,
                 grid=DEFAULT_BETA_GRID, decay: float = 0.9, period: int = 64):
        if not grid:
            raise ConfigurationError("beta candidate grid is empty")
        if not (0.0 <= decay < 1.0):
            raise ConfigurationError("decay must be in [0, 1)")
        if period < 1:
            raise ConfigurationError("period must be >= 1")
        self.budget_bytes = float(budget_bytes)
        self.expert_bytes = float(expert_bytes)
        self.beta = float(initial_beta)
        self.grid = np.asarray(sorted(grid), dtype=np.float64)
        self.decay = decay
        self.period = period
        self._ema = np.zeros(self.grid.size)
        self._steps = 0

    def record(self, delta: float, miss_count: int) -> float:
        admitted = np.where(delta < self.grid, float(miss_count), 0.0)
        self._ema = self.decay * self._ema + (1.0 - self.decay) * admitted
        self._steps += 1
        if self._steps % self.period == 0:
            nhat = {float(b): float(v) for b, v in zip(self.grid, self._ema)}
            self.beta = derive_beta(self.budget_bytes, self.expert_bytes, nhat, self.beta)
        return self.beta
