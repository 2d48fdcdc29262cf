"""Two-tier residency and transfer cost simulation.

GPU residency is a fixed-capacity cache over expert ids; everything else
lives in host memory. Costs are analytic: a resident access is (near) free,
an on-demand load stalls the pipeline for a fixed latency, a substituted
miss costs nothing and moves no bytes. Prefetches are asynchronous,
bandwidth-timed, and all transfers (prefetch and on-demand alike) are
serialized on one simulated PCIe channel, so queueing delay is the sum of
in-flight remainders.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError, InvariantViolation

EV_HIT = "hit"
EV_MISS_ONDEMAND = "miss_ondemand"
EV_MISS_SUBSTITUTED = "miss_substituted"
EV_PREFETCH_ISSUE = "prefetch_issue"
EV_PREFETCH_COMPLETE = "prefetch_complete"
EV_EVICT = "evict"
EV_DROP = "drop"

# kinds that carry payload bytes
TRANSFER_KINDS = (EV_MISS_ONDEMAND, EV_PREFETCH_COMPLETE)

POLICY_LRU = "lru"
POLICY_LFU = "lfu"
POLICY_FREQ_STATIC = "freq_static"
POLICIES = (POLICY_LRU, POLICY_LFU, POLICY_FREQ_STATIC)

_TAG_RESIDENCY = 21


@dataclass(frozen=True)
class CostModel:
    expert_load_ms: float = 9.5         # blocking on-demand load, per expert
    hit_ms: float = 0.0                 # resident access overhead
    expert_compute_ms: float = 0.5      # per executed expert per token
    pcie_bw_bytes_per_s: float = 4.0e6  # async prefetch bandwidth
    expert_bytes: int = 32768

    def validate(self) -> "CostModel":
        if min(self.expert_load_ms, self.hit_ms, self.expert_compute_ms) < 0:
            raise ConfigurationError("cost times must be nonnegative")
        if self.pcie_bw_bytes_per_s <= 0:
            raise ConfigurationError("pcie_bw_bytes_per_s must be > 0")
        if self.expert_bytes <= 0:
            raise ConfigurationError("expert_bytes must be > 0")
        return self

    @property
    def prefetch_ms(self) -> float:
        return 1000.0 * self.expert_bytes / self.pcie_bw_bytes_per_s


@dataclass
class SimEvent:
    time_ms: float
    kind: str
    layer: int
    token: int   # -1 for events not tied to a token
    expert: int
    bytes: int
    stall_ms: float = 0.0  # internal; not part of the exported record


class PcieChannel:
    """Single serialized transfer lane shared by all layers."""

    def __init__(self):
        self.free_at = 0.0

    def acquire(self, now: float, duration_ms: float) -> float:
        start = max(now, self.free_at)
        done = start + duration_ms
        self.free_at = done
        return done


@dataclass
class SimClock:
    now: float = 0.0
    channel: PcieChannel = field(default_factory=PcieChannel)

    def advance(self, ms: float) -> None:
        if ms < 0:
            raise InvariantViolation("clock cannot move backwards")
        self.now += ms


class ResidencyState:
    """GPU residency for one layer plus the policy metadata to evict."""

    def __init__(self, num_experts: int, capacity: int, policy: str, seed: int = 0,
                 partition_of: np.ndarray | None = None,
                 static_freq: np.ndarray | None = None,
                 layer: int = 0):
        if policy not in POLICIES:
            raise ConfigurationError(f"unknown eviction policy {policy!r}")
        if not (0 <= capacity <= num_experts):
            raise ConfigurationError("capacity must be in [0, num_experts]")
        self.layer = layer
        self.num_experts = num_experts
        self.capacity = capacity
        self.policy = policy
        self.partition_of = partition_of
        self.mask = np.zeros(num_experts, dtype=bool)
        self._last_use = np.zeros(num_experts, dtype=np.int64)
        self._freq = np.zeros(num_experts, dtype=np.float64)
        self._static = None
        if static_freq is not None:
            self._static = np.asarray(static_freq, dtype=np.float64)
            if self._static.shape != (num_experts,):
                raise ConfigurationError("static_freq shape mismatch")
        if policy == POLICY_FREQ_STATIC and self._static is None:
            raise ConfigurationError("freq_static policy needs profiling frequencies")
        self._tick = 0
        self._unused_prefetch = np.zeros(num_experts, dtype=bool)
        self.pending: list[tuple[float, int]] = []  # (ready_ms, expert), issue order
        self.waste_evictions = 0

        if capacity > 0:
            if policy == POLICY_FREQ_STATIC:
                order = np.lexsort((np.arange(num_experts), -self._static))
                initial = order[:capacity]
            else:
                # prefix of a seeded permutation: initial contents nest
                # across capacities for the same seed
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, _TAG_RESIDENCY, layer])
                )
                initial = rng.permutation(num_experts)[:capacity]
            for e in sorted(int(v) for v in initial):
                self.mask[e] = True
                self._touch(e)

    def snapshot(self) -> np.ndarray:
        out = self.mask.copy()
        out.setflags(write=False)
        return out

    def resident(self, expert: int) -> bool:
        return bool(self.mask[expert])

    def resident_count(self) -> int:
        return int(self.mask.sum())

    def pending_set(self) -> set:
        return {e for _, e in self.pending}

    def _touch(self, expert: int) -> None:
        self._tick += 1
        self._last_use[expert] = self._tick
        self._freq[expert] += 1.0
        self._unused_prefetch[expert] = False

    def _victim(self) -> int:
        resident = np.flatnonzero(self.mask)
        if self.policy == POLICY_LRU:
            scores = self._last_use[resident]
        elif self.policy == POLICY_LFU:
            scores = self._freq[resident]
        else:
            scores = self._static[resident]
        return int(resident[int(np.argmin(scores))])  # argmin keeps lowest index on ties

    def insert(self, expert: int, via_prefetch: bool = False) -> int | None:
        """Make an expert resident; returns the evicted victim id, if any."""
        if self.capacity == 0:
            return None
        victim = None
        if not self.mask[expert]:
            if self.resident_count() >= self.capacity:
                victim = self._victim()
                self.mask[victim] = False
                if self._unused_prefetch[victim]:
                    self.waste_evictions += 1
                    self._unused_prefetch[victim] = False
                self._freq[victim] = 0.0
            self.mask[expert] = True
        if via_prefetch:
            self._freq[expert] = 0.0
            self._tick += 1
            self._last_use[expert] = self._tick
            self._unused_prefetch[expert] = True
        else:
            self._touch(expert)
        if self.resident_count() > self.capacity:
            raise InvariantViolation("residency exceeded capacity")
        return victim

    def unused_prefetch_resident(self) -> int:
        return int((self._unused_prefetch & self.mask).sum())


def init_residency(num_experts: int, cache_rate: float, policy: str, seed: int = 0,
                   partition_of: np.ndarray | None = None,
                   static_freq: np.ndarray | None = None,
                   layer: int = 0) -> ResidencyState:
    """Residency at capacity floor(cache_rate * num_experts).

    freq_static seeds the cache with the highest-frequency experts from
    profiling; the other policies start from a seeded random subset.
    """
    if not (0.0 < cache_rate <= 1.0):
        raise ConfigurationError("cache_rate must be in (0, 1]")
    capacity = int(np.floor(cache_rate * num_experts))
    return ResidencyState(num_experts, capacity, policy, seed=seed,
                          partition_of=partition_of, static_freq=static_freq, layer=layer)


def access(state: ResidencyState, expert: int, clock: SimClock, cost: CostModel,
           mode: str = "ondemand", layer: int | None = None, token: int = -1,
           log: list | None = None) -> SimEvent:
    """Charge one expert access and advance the clock.

    mode "ondemand": a miss blocks on the shared channel for the fixed
    load latency, moves expert_bytes, and inserts the expert (evicting per
    policy). mode "substituted_away": the miss was rewritten to a resident
    stand-in, so it costs hit time and moves nothing (the stand-in's own
    access is charged separately as a hit).
    """
    if mode not in ("ondemand", "substituted_away"):
        raise InputError(f"unknown access mode {mode!r}")
    if not (0 <= expert < state.num_experts):
        raise InputError("expert id out of range")
    lyr = state.layer if layer is None else layer
    start = clock.now
    if state.resident(expert):
        state._touch(expert)
        ev = SimEvent(start, EV_HIT, lyr, token, expert, 0, stall_ms=cost.hit_ms)
        clock.advance(cost.hit_ms)
    elif mode == "substituted_away":
        ev = SimEvent(start, EV_MISS_SUBSTITUTED, lyr, token, expert, 0, stall_ms=cost.hit_ms)
        clock.advance(cost.hit_ms)
    else:
        done = clock.channel.acquire(start, cost.expert_load_ms)
        stall = done - start
        clock.now = done
        victim = state.insert(expert)
        ev = SimEvent(start, EV_MISS_ONDEMAND, lyr, token, expert, cost.expert_bytes, stall_ms=stall)
        if log is not None:
            log.append(ev)
            if victim is not None:
                log.append(SimEvent(clock.now, EV_EVICT, lyr, -1, victim, 0))
        return ev
    if log is not None:
        log.append(ev)
    return ev


def prefetch(state: ResidencyState, experts, clock: SimClock, cost: CostModel,
             log: list | None = None) -> list[SimEvent]:
    """Issue asynchronous loads for the given experts.

    Already-resident and already-in-flight experts are skipped. Each
    transfer occupies the shared channel for expert_bytes / bandwidth and
    becomes visible at the next settle() whose clock has passed its
    completion time.
    """
    events = []
    in_flight = state.pending_set()
    for e in experts:
        e = int(e)
        if not (0 <= e < state.num_experts):
            raise InputError("expert id out of range")
        if state.resident(e) or e in in_flight:
            continue
        done = clock.channel.acquire(clock.now, cost.prefetch_ms)
        state.pending.append((done, e))
        in_flight.add(e)
        events.append(SimEvent(clock.now, EV_PREFETCH_ISSUE, state.layer, -1, e, 0))
    if log is not None:
        log.extend(events)
    return events


def settle(state: ResidencyState, clock: SimClock, cost: CostModel,
           log: list | None = None) -> list[SimEvent]:
    """Commit transfers whose completion time has passed; bytes are counted
    at completion, so an in-flight transfer at end of run moves nothing."""
    events = []
    remaining = []
    for done, e in state.pending:
        if done <= clock.now:
            victim = state.insert(e, via_prefetch=True)
            events.append(SimEvent(done, EV_PREFETCH_COMPLETE, state.layer, -1, e, cost.expert_bytes))
            if victim is not None:
                events.append(SimEvent(done, EV_EVICT, state.layer, -1, victim, 0))
        else:
            remaining.append((done, e))
    state.pending = remaining
    if log is not None:
        log.extend(events)
    return events


@dataclass
class RunMetrics:
    tokens: int = 0
    compute_ms: float = 0.0
    stall_ms: float = 0.0
    elapsed_ms: float = 0.0
    tokens_per_s: float = 0.0
    hits: int = 0
    misses_ondemand: int = 0
    misses_substituted: int = 0
    drops: int = 0
    prefetch_issued: int = 0
    prefetch_completed: int = 0
    evictions: int = 0
    read_bytes: int = 0
    ondemand_bytes: int = 0
    prefetch_bytes: int = 0
    waste_bytes: int = 0
    substitutions: int = 0
    gate_token_forbidden: int = 0
    gate_batch_bypassed: int = 0
    fidelity_cosine: float = float("nan")
    fidelity_argmax: float = float("nan")

    def as_rows(self) -> list[tuple[str, str]]:
        rows = [("format", "bsim/1")]
        for name in (
            "tokens", "compute_ms", "stall_ms", "elapsed_ms", "tokens_per_s",
            "hits", "misses_ondemand", "misses_substituted", "drops",
            "prefetch_issued", "prefetch_completed", "evictions",
            "read_bytes", "ondemand_bytes", "prefetch_bytes", "waste_bytes",
            "substitutions", "gate_token_forbidden", "gate_batch_bypassed",
            "fidelity_cosine", "fidelity_argmax",
        ):
            rows.append((name, repr(getattr(self, name))))
        return rows


def step_metrics(events, tokens: int, compute_ms: float, waste_bytes: int = 0) -> RunMetrics:
    """Aggregate a complete event log into run totals.

    Simulated throughput is tokens over (compute + stalls); the caller
    supplies compute time, which is not an event kind.
    """
    m = RunMetrics(tokens=tokens, compute_ms=compute_ms, waste_bytes=waste_bytes)
    for ev in events:
        if ev.kind == EV_HIT:
            m.hits += 1
            m.stall_ms += ev.stall_ms
        elif ev.kind == EV_MISS_ONDEMAND:
            m.misses_ondemand += 1
            m.stall_ms += ev.stall_ms
            m.ondemand_bytes += ev.bytes
        elif ev.kind == EV_MISS_SUBSTITUTED:
            m.misses_substituted += 1
            m.stall_ms += ev.stall_ms
        elif ev.kind == EV_PREFETCH_ISSUE:
            m.prefetch_issued += 1
        elif ev.kind == EV_PREFETCH_COMPLETE:
            m.prefetch_completed += 1
            m.prefetch_bytes += ev.bytes
        elif ev.kind == EV_EVICT:
            m.evictions += 1
        elif ev.kind == EV_DROP:
            m.drops += 1
        else:
            raise InputError(f"unknown event kind {ev.kind!r}")
    m.read_bytes = m.ondemand_bytes + m.prefetch_bytes
    m.elapsed_ms = m.compute_ms + m.stall_ms
    m.tokens_per_s = 1000.0 * tokens / m.elapsed_ms if m.elapsed_ms > 0 else float("inf")
    return m


def save_events(events, path) -> None:
    """Line-delimited event log: time kind layer token expert bytes."""
    with open(path, "w") as f:
        f.write("bsim/1\n")
        for ev in events:
            f.write(f"{ev.time_ms!r} {ev.kind} {ev.layer} {ev.token} {ev.expert} {ev.bytes}\n")


def load_events(path) -> list[SimEvent]:
    from .errors import FormatError  # local import keeps module deps one-way

    with open(path) as f:
        header = f.readline().strip()
        if header != "bsim/1":
            raise FormatError(f"{path}: bad or missing version header")
        out = []
        for line in f:
            t, kind, layer, token, expert, nbytes = line.split()
            out.append(SimEvent(float(t), kind, int(layer), int(token), int(expert), int(nbytes)))
    return out
