"""Replacement planning for missing experts.

Slots are processed in selection order. A GPU-resident original is always
kept. A missing original may be rewritten to the best viable buddy: stored
candidates up to search rank H, ordered by score, first one that is both
resident and not already assigned to this token wins. Gate refusals, an
exhausted per-token budget, or no viable candidate all fall back to the
configured policy (fetch the original on demand, or drop the slot).

At default scoring parameters the score equals the stored conditional
weight, so candidate order degenerates to the stored rank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .buddies import BuddyTable
from .errors import ConfigurationError, InputError
from .gating import GateConfig, GateOutcome, evaluate_gates
from .model import RouterDecision

KIND_KEPT = "kept"
KIND_SUBSTITUTED = "substituted"
KIND_ONDEMAND = "ondemand_fallback"
KIND_DROPPED = "dropped"

FALLBACK_PREFETCH = "prefetch_original"
FALLBACK_DROP = "drop_expert"

_ZCLAMP = 3.0


@dataclass(frozen=True)
class PsiParams:
    """Candidate scoring: stored weight, optionally shaped by the local
    logit z-score (eta) and a partition hop penalty (kappa)."""

    eta: float = 0.0
    kappa: float = 0.0
    diversity_factor: float = 0.5
    use_local_logit: bool = True

    def validate(self) -> "PsiParams":
        if self.eta < 0 or self.kappa < 0:
            raise ConfigurationError("eta and kappa must be nonnegative")
        if not (0.0 < self.diversity_factor <= 1.0):
            raise ConfigurationError("diversity_factor must be in (0, 1]")
        return self


@dataclass(frozen=True)
class Topology:
    """Simulated placement: partition per expert and the cost of one hop."""

    partition_of: np.ndarray | None = None
    hop: float = 1.0

    def hops(self, a: int, b: int) -> float:
        if self.partition_of is None:
            return 0.0
        return 0.0 if self.partition_of[a] == self.partition_of[b] else self.hop


@dataclass(frozen=True)
class SubstitutionConfig:
    search_rank_h: int = 16
    rho: int | None = None  # max replacements per token; None = unlimited
    fallback: str = FALLBACK_PREFETCH

    def validate(self) -> "SubstitutionConfig":
        if self.search_rank_h < 1:
            raise ConfigurationError("search_rank_h must be >= 1")
        if self.rho is not None and self.rho < 0:
            raise ConfigurationError("rho must be nonnegative or unlimited")
        if self.fallback not in (FALLBACK_PREFETCH, FALLBACK_DROP):
            raise ConfigurationError(f"unknown fallback {self.fallback!r}")
        return self


@dataclass(frozen=True)
class PlanSlot:
    original: int
    executed: int
    kind: str


@dataclass(frozen=True)
class ReplacementPlan:
    token: int
    layer: int
    slots: tuple
    replacements_used: int


def _zscore(logits: np.ndarray, j: int) -> float:
    z = np.asarray(logits, dtype=np.float64)
    sd = float(z.std())
    if sd <= 0.0:
        return 0.0
    v = (float(z[j]) - float(z.mean())) / sd
    return min(_ZCLAMP, max(-_ZCLAMP, v))


def psi_score(
    pivot: int,
    candidate: int,
    decision: RouterDecision,
    table: BuddyTable,
    topology: Topology | None = None,
    params: PsiParams = PsiParams(),
    already_chosen=(),
) -> float:
    """Score one stored candidate as a stand-in for a missing pivot.

    weight * (1 + eta * zhat) * (1 - kappa * hops), then multiplied by
    diversity_factor once per prior selection of the candidate for this
    token. zhat is the candidate's z-score over the token's full logit
    vector, clamped to [-3, 3], or 0 when use_local_logit is off.
    """
    q = table.weight_of(pivot, candidate)
    zhat = _zscore(decision.logits, candidate) if params.use_local_logit else 0.0
    hops = topology.hops(pivot, candidate) if topology is not None else 0.0
    score = q * (1.0 + params.eta * zhat) * (1.0 - params.kappa * hops)
    prior = sum(1 for c in already_chosen if c == candidate)
    if prior:
        score *= params.diversity_factor ** prior
    return float(score)


def _ordered_candidates(pivot, decision, table, topology, params, chosen, h):
    """Stored candidates up to rank h, ordered by descending score with the
    stored rank as tie-break; at default params this is the stored order."""
    ids = table.ids(pivot)[:h]
    if params.eta == 0.0 and params.kappa == 0.0:
        return ids
    scores = np.array(
        [psi_score(pivot, int(j), decision, table, topology, params, chosen) for j in ids]
    )
    order = np.argsort(-scores, kind="stable")
    return ids[order]


def substitute_token(
    decision: RouterDecision,
    residency_mask: np.ndarray,
    table: BuddyTable,
    gates: GateOutcome,
    cfg: SubstitutionConfig = SubstitutionConfig(),
    params: PsiParams = PsiParams(),
    topology: Topology | None = None,
) -> ReplacementPlan:
    """Plan replacements for one token under one residency snapshot.

    The uniqueness set starts as every expert currently assigned to the
    token and grows with each substitution, so no expert is ever executed
    twice for the same token.
    """
    mask = np.asarray(residency_mask, dtype=bool)
    allowed = gates.allowed
    budget = cfg.rho if cfg.rho is not None else np.inf
    fallback_kind = KIND_ONDEMAND if cfg.fallback == FALLBACK_PREFETCH else KIND_DROPPED
    assigned = {int(e) for e in decision.topk}
    chosen: list[int] = []
    slots = []
    used = 0
    for orig in (int(e) for e in decision.topk):
        if mask[orig]:
            slots.append(PlanSlot(orig, orig, KIND_KEPT))
            continue
        picked = None
        if allowed and used < budget:
            for cand in _ordered_candidates(orig, decision, table, topology, params,
                                            chosen, cfg.search_rank_h):
                j = int(cand)
                if mask[j] and j not in assigned:
                    picked = j
                    break
        if picked is None:
            slots.append(PlanSlot(orig, orig, fallback_kind))
        else:
            slots.append(PlanSlot(orig, picked, KIND_SUBSTITUTED))
            assigned.add(picked)
            chosen.append(picked)
            used += 1
    return ReplacementPlan(
        token=decision.token, layer=decision.layer, slots=tuple(slots), replacements_used=used
    )


def substitute_batch(
    decisions,
    residency_mask: np.ndarray,
    table: BuddyTable,
    gate_cfg: GateConfig,
    cfg: SubstitutionConfig = SubstitutionConfig(),
    params: PsiParams = PsiParams(),
    topology: Topology | None = None,
) -> list[ReplacementPlan]:
    """Plan a whole batch at one layer: evaluate gates against the shared
    snapshot, then plan each token independently (order has no effect)."""
    outcomes = evaluate_gates(decisions, residency_mask, gate_cfg)
    return [
        substitute_token(d, residency_mask, table, o, cfg, params, topology)
        for d, o in zip(decisions, outcomes)
    ]


def identity_plan(decision: RouterDecision) -> ReplacementPlan:
    """Keep every slot as routed (full-residency oracle path)."""
    slots = tuple(PlanSlot(int(e), int(e), KIND_KEPT) for e in decision.topk)
    return ReplacementPlan(decision.token, decision.layer, slots, 0)


def ondemand_plan(decision: RouterDecision, residency_mask: np.ndarray) -> ReplacementPlan:
    """No substitution: keep residents, fetch everything else on demand."""
    mask = np.asarray(residency_mask, dtype=bool)
    slots = tuple(
        PlanSlot(int(e), int(e), KIND_KEPT if mask[int(e)] else KIND_ONDEMAND)
        for e in decision.topk
    )
    return ReplacementPlan(decision.token, decision.layer, slots, 0)


def random_plan(decision: RouterDecision, residency_mask: np.ndarray,
                rng: np.random.Generator) -> ReplacementPlan:
    """Baseline: replace each missing expert with a uniformly drawn resident
    expert not already assigned to the token; no gates, no budget."""
    mask = np.asarray(residency_mask, dtype=bool)
    assigned = {int(e) for e in decision.topk}
    slots = []
    used = 0
    for orig in (int(e) for e in decision.topk):
        if mask[orig]:
            slots.append(PlanSlot(orig, orig, KIND_KEPT))
            continue
        pool = np.flatnonzero(mask)
        pool = pool[[int(p) not in assigned for p in pool]]
        if pool.size == 0:
            slots.append(PlanSlot(orig, orig, KIND_ONDEMAND))
            continue
        j = int(pool[rng.integers(0, pool.size)])
        slots.append(PlanSlot(orig, j, KIND_SUBSTITUTED))
        assigned.add(j)
        used += 1
    return ReplacementPlan(decision.token, decision.layer, tuple(slots), used)


def check_plan(plan: ReplacementPlan, decision: RouterDecision,
               residency_mask: np.ndarray, table: BuddyTable | None,
               cfg: SubstitutionConfig) -> None:
    """Audit one plan against the structural invariants; raises InputError
    with a description on the first violation (used by tests and the
    simulator's self-check mode)."""
    mask = np.asarray(residency_mask, dtype=bool)
    executed = [s.executed for s in plan.slots if s.kind != KIND_DROPPED]
    if len(set(executed)) != len(executed):
        raise InputError("duplicate executed expert for one token")
    if [s.original for s in plan.slots] != [int(e) for e in decision.topk]:
        raise InputError("slot originals do not match the routing decision")
    subs = 0
    for s in plan.slots:
        if s.kind == KIND_SUBSTITUTED:
            subs += 1
            if not mask[s.executed]:
                raise InputError("substitute is not resident in the snapshot")
            if table is not None:
                ids = list(table.ids(s.original)[: cfg.search_rank_h])
                if s.executed not in [int(j) for j in ids]:
                    raise InputError("substitute outside stored search rank")
        elif s.kind == KIND_KEPT:
            if s.executed != s.original:
                raise InputError("kept slot rewrote its expert")
    if cfg.rho is not None and subs > cfg.rho:
        raise InputError("per-token replacement budget exceeded")
    if subs != plan.replacements_used:
        raise InputError("replacements_used does not match slot kinds")
