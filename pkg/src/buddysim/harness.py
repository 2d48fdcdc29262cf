"""Experiment pipeline: profile, build, simulate, report.

profile runs the stream through the router on the full-residency path and
accumulates per-layer co-activation statistics plus the entropy samples the
token gate calibrates against. build turns stats into buddy tables.
simulate replays a (held-out) stream under a residency budget with one of
three miss-handling methods and scores fidelity against the full-residency
oracle on identical inputs. report collates run metrics into a comparison
table and plot-ready CSV.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from . import buddies, gating, memtier, profiler, substitution
from .config import ExperimentConfig
from .errors import CalibrationError, ConfigurationError, FormatError
from .memtier import (
    EV_DROP,
    CostModel,
    RunMetrics,
    SimClock,
    SimEvent,
    access,
    init_residency,
    prefetch,
    settle,
    step_metrics,
)
from .model import (
    Model,
    build_model,
    forward_batch,
    layer_update,
    readout_head,
    route_batch,
    token_stream,
)

_RNG_TAG_RANDOM_METHOD = 31


def _stats_path(out_dir, layer):
    return os.path.join(out_dir, f"stats_L{layer:02d}.bin")


def _coact_path(out_dir, layer):
    return os.path.join(out_dir, f"coact_L{layer:02d}.csv")


def _table_path(out_dir, layer):
    return os.path.join(out_dir, f"buddies_L{layer:02d}.bin")


def _table_csv_path(out_dir, layer):
    return os.path.join(out_dir, f"buddies_L{layer:02d}.csv")


def _tae_path(out_dir):
    return os.path.join(out_dir, "tae_samples.txt")


# ---------------------------------------------------------------- profile


def cmd_profile(cfg: ExperimentConfig, out_dir: str) -> dict:
    """Run the profiling stream and write per-layer stats, entropy samples,
    and heatmap CSVs. Returns the written paths."""
    cfg.validate_run()
    spec = cfg.model_spec()
    model = build_model(spec)
    temperature = cfg["gate.temperature"]
    n = cfg["stream.num_tokens"]
    batch = cfg["stream.batch"]
    x = token_stream(spec, cfg["stream.seed"], n)

    stats = [
        profiler.CoActivationStats(
            layer=l,
            num_experts=spec.experts_per_layer,
            warmup_steps=cfg["stream.warmup_steps"],
            warmup_weight=cfg["profile.warmup_weight"],
            laplace_eps=cfg["profile.laplace_eps"],
        )
        for l in range(spec.num_layers)
    ]
    tae_samples: list[list[float]] = [[] for _ in range(spec.num_layers)]

    for b0 in range(0, n, batch):
        hb = x[b0 : b0 + batch]
        toks = range(b0, min(n, b0 + batch))
        for layer in range(spec.num_layers):
            decisions = route_batch(model, hb, layer, temperature, tokens=toks)
            for d in decisions:
                profiler.observe(stats[layer], d, step=d.token)
                tae_samples[layer].append(gating.tae(d))
            hb = layer_update(hb, forward_batch(model, hb, decisions))

    os.makedirs(out_dir, exist_ok=True)
    paths = {"stats": [], "coact": [], "tae": _tae_path(out_dir)}
    for layer, st in enumerate(stats):
        p = _stats_path(out_dir, layer)
        profiler.save_stats(st, p)
        paths["stats"].append(p)
        c = _coact_path(out_dir, layer)
        profiler.export_coactivation_csv(st, c, mode="binary")
        paths["coact"].append(c)
    with open(paths["tae"], "w") as f:
        f.write("bsim/1\n")
        for layer, samples in enumerate(tae_samples):
            for v in samples:
                f.write(f"{layer} {v!r}\n")
    return paths


def load_tae_samples(path) -> dict:
    out: dict[int, list[float]] = {}
    with open(path) as f:
        header = f.readline().strip()
        if header != "bsim/1":
            raise FormatError(f"{path}: bad or missing version header")
        for line in f:
            layer, value = line.split()
            out.setdefault(int(layer), []).append(float(value))
    return out


# ------------------------------------------------------------------ build


def cmd_build(cfg: ExperimentConfig, out_dir: str) -> dict:
    """Build per-layer buddy tables from profiled stats; returns paths and
    the size-report text."""
    cfg.validate_run()
    layers = cfg["model.layers"]
    alphas = cfg.alphas(layers)
    profile_dir = cfg["io.profile_dir"]
    os.makedirs(out_dir, exist_ok=True)
    paths = {"tables": [], "csv": []}
    report_lines = []
    for layer in range(layers):
        st = profiler.load_stats(_stats_path(profile_dir, layer))
        table = buddies.build_table(
            st, alpha=alphas[layer], k_max=cfg["builder.k_max"], mode=cfg["builder.mode"]
        )
        p = _table_path(out_dir, layer)
        buddies.save_table(table, p)
        buddies.export_table_csv(table, _table_csv_path(out_dir, layer))
        paths["tables"].append(p)
        paths["csv"].append(_table_csv_path(out_dir, layer))
        rep = buddies.table_size_report(table)
        report_lines.append(f"layer {layer}: {rep.format().splitlines()[0]}")
    paths["report"] = "\n".join(report_lines)
    return paths


# --------------------------------------------------------------- simulate


@dataclass
class SimResult:
    metrics: RunMetrics
    outputs: np.ndarray
    events: list
    gate_records: list
    tau_by_layer: list
    beta_final: float
    bandwidth_series: list  # (step, read_bytes) per outer batch step


def run_oracle(model: Model, x: np.ndarray, temperature: float, batch: int = 256) -> np.ndarray:
    """Full-residency forward pass; the fidelity reference."""
    n = x.shape[0]
    out = np.empty_like(x)
    for b0 in range(0, n, batch):
        hb = x[b0 : b0 + batch]
        toks = range(b0, min(n, b0 + batch))
        for layer in range(model.spec.num_layers):
            decisions = route_batch(model, hb, layer, temperature, tokens=toks)
            hb = layer_update(hb, forward_batch(model, hb, decisions))
        out[b0 : b0 + batch] = hb
    return out


def fidelity(outputs: np.ndarray, oracle: np.ndarray, readout: np.ndarray) -> tuple[float, float]:
    """(mean cosine, argmax agreement) of run outputs vs the oracle outputs.

    Bitwise-equal rows score cosine exactly 1.0; otherwise the usual
    normalized dot product."""
    if outputs.shape != oracle.shape:
        raise ConfigurationError("fidelity shapes do not match")
    dots = np.einsum("nd,nd->n", outputs, oracle)
    na = np.linalg.norm(outputs, axis=1)
    nb = np.linalg.norm(oracle, axis=1)
    denom = np.maximum(na * nb, 1e-30)
    cos = np.clip(dots / denom, -1.0, 1.0)
    equal = np.all(outputs == oracle, axis=1)
    cos = np.where(equal, 1.0, cos)
    agree = np.mean(
        np.argmax(outputs @ readout.T, axis=1) == np.argmax(oracle @ readout.T, axis=1)
    )
    return float(cos.mean()), float(agree)


def _predict_for_layer(state, prev_counts: dict) -> list:
    """Previous-step top-m frequency predictor; m is the capacity slack left
    over after the previous step's distinct working set."""
    if not prev_counts:
        return []
    m = max(0, state.capacity - len(prev_counts))
    if m == 0:
        return []
    ranked = sorted(prev_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [e for e, _ in ranked[:m]]


def run_simulation(
    cfg: ExperimentConfig,
    tables: list | None = None,
    tau_by_layer: list | None = None,
    static_freq: list | None = None,
    oracle_outputs: np.ndarray | None = None,
    collect_events: bool = True,
) -> SimResult:
    """Replay the evaluation stream under the configured method and budget.

    Artifacts (buddy tables, calibrated thresholds, profiling frequencies
    for the freq_static policy) are passed in; cmd_simulate does the disk
    I/O. The full-residency oracle pass can be supplied to avoid recomputing
    it across runs on identical inputs.
    """
    cfg.validate_run()
    spec = cfg.model_spec()
    model = build_model(spec)
    method = cfg["method"]
    temperature = cfg["gate.temperature"]
    n = cfg["stream.num_tokens"]
    batch = cfg["stream.batch"]
    layers = spec.num_layers
    num_e = spec.experts_per_layer
    x = token_stream(spec, cfg["stream.seed"], n)
    cost = cfg.cost_model(model.expert_bytes)
    sub_cfg = cfg.sub_config()
    psi = cfg.psi_params()

    partitions = cfg["topology.partitions"]
    partition_of = None
    if partitions > 1:
        partition_of = (np.arange(num_e) * partitions) // num_e
    topology = substitution.Topology(partition_of=partition_of, hop=cfg["topology.hop"])

    if method == "buddy":
        if tables is None or len(tables) != layers:
            raise ConfigurationError("buddy method needs one buddy table per layer")
        for t in tables:
            if t.num_experts != num_e:
                raise ConfigurationError(
                    f"buddy table shape {t.num_experts} does not match model {num_e}"
                )
            if sub_cfg.search_rank_h > t.k_max:
                raise ConfigurationError("sub.h exceeds the table's k_max")
        gate_cfg = cfg.gate_config(expert_bytes=float(cost.expert_bytes))
        if gate_cfg.tau is not None:
            tau_by_layer = [gate_cfg.tau] * layers
        elif tau_by_layer is None or len(tau_by_layer) != layers:
            raise ConfigurationError("buddy method needs a calibrated tau per layer")
        gate_by_layer = [gate_cfg.with_tau(t) for t in tau_by_layer]
    else:
        tau_by_layer = []
        gate_by_layer = []

    if cfg["cache.policy"] == memtier.POLICY_FREQ_STATIC:
        if static_freq is None or len(static_freq) != layers:
            raise ConfigurationError("freq_static policy needs profiling frequencies per layer")

    states = [
        init_residency(
            num_e,
            cfg["cache.rate"],
            cfg["cache.policy"],
            seed=cfg["run.seed"],
            partition_of=partition_of,
            static_freq=None if static_freq is None else static_freq[layer],
            layer=layer,
        )
        for layer in range(layers)
    ]

    controller = None
    if method == "buddy" and gate_cfg.pcie_budget_bytes is not None:
        controller = gating.BetaController(
            gate_cfg.pcie_budget_bytes, float(cost.expert_bytes), gate_cfg.beta
        )

    rng_random = np.random.default_rng(
        np.random.SeedSequence([cfg["run.seed"], _RNG_TAG_RANDOM_METHOD])
    )

    clock = SimClock()
    events: list[SimEvent] = []
    gate_records: list[tuple] = []
    bandwidth: list[tuple[int, int]] = []
    prev_counts: list[dict] = [dict() for _ in range(layers)]
    outputs = np.empty_like(x)
    compute_ms = 0.0
    substitutions = 0
    token_forbidden = 0
    batch_bypassed = 0
    prefetch_on = cfg["prefetch.enabled"]

    for step, b0 in enumerate(range(0, n, batch)):
        hb = x[b0 : b0 + batch]
        toks = list(range(b0, min(n, b0 + batch)))
        step_bytes = 0
        for layer in range(layers):
            state = states[layer]
            # speculative loads for the next layer ride under this layer's
            # compute window; the last layer prefetches layer 0 of the next step
            if prefetch_on and layers > 1:
                target = layer + 1 if layer + 1 < layers else 0
                preds = _predict_for_layer(states[target], prev_counts[target])
                prefetch(states[target], preds, clock, cost, log=events)
            for ev in settle(state, clock, cost, log=events):
                if ev.kind == memtier.EV_PREFETCH_COMPLETE:
                    step_bytes += ev.bytes

            decisions = route_batch(model, hb, layer, temperature, tokens=toks)
            snapshot = state.snapshot()

            if method == "buddy":
                gcfg = gate_by_layer[layer]
                if controller is not None:
                    gcfg = replace(gcfg, beta=controller.beta)
                outcomes = gating.evaluate_gates(decisions, snapshot, gcfg)
                plans = [
                    substitution.substitute_token(
                        d, snapshot, tables[layer], o, sub_cfg, psi, topology
                    )
                    for d, o in zip(decisions, outcomes)
                ]
                for d, o in zip(decisions, outcomes):
                    gate_records.append(
                        (step, layer, d.token, o.tae, o.margin, o.delta,
                         o.token_allowed, o.batch_allowed)
                    )
                    if not o.token_allowed:
                        token_forbidden += 1
                if outcomes and not outcomes[0].batch_allowed:
                    batch_bypassed += 1
                if controller is not None:
                    requested = np.unique(np.concatenate([d.topk for d in decisions]))
                    miss_count = int((~snapshot[requested]).sum())
                    controller.record(outcomes[0].delta, miss_count)
            elif method == "random":
                plans = [substitution.random_plan(d, snapshot, rng_random) for d in decisions]
            else:
                plans = [substitution.ondemand_plan(d, snapshot) for d in decisions]

            executed_slots = 0
            for d, plan in zip(decisions, plans):
                substitutions += plan.replacements_used
                for slot in plan.slots:
                    if slot.kind == substitution.KIND_DROPPED:
                        events.append(SimEvent(clock.now, EV_DROP, layer, d.token, slot.original, 0))
                        continue
                    executed_slots += 1
                    if slot.kind == substitution.KIND_SUBSTITUTED:
                        ev = access(state, slot.original, clock, cost,
                                    mode="substituted_away", token=d.token, log=events)
                        access(state, slot.executed, clock, cost, token=d.token, log=events)
                    else:
                        ev = access(state, slot.executed, clock, cost, token=d.token, log=events)
                        if ev.kind == memtier.EV_MISS_ONDEMAND:
                            step_bytes += ev.bytes

            compute_ms_layer = cost.expert_compute_ms * executed_slots
            clock.advance(compute_ms_layer)
            compute_ms += compute_ms_layer

            counts: dict[int, int] = {}
            for plan in plans:
                for slot in plan.slots:
                    if slot.kind != substitution.KIND_DROPPED:
                        counts[slot.executed] = counts.get(slot.executed, 0) + 1
            prev_counts[layer] = counts

            hb = layer_update(hb, forward_batch(model, hb, decisions, plans))
        outputs[b0 : b0 + batch] = hb
        bandwidth.append((step, step_bytes))

    for state in states:
        settle(state, clock, cost, log=events)
    events.sort(key=lambda e: e.time_ms)

    waste = sum(s.waste_evictions + s.unused_prefetch_resident() for s in states)
    metrics = step_metrics(events, tokens=n, compute_ms=compute_ms,
                           waste_bytes=waste * cost.expert_bytes)
    metrics.substitutions = substitutions
    metrics.gate_token_forbidden = token_forbidden
    metrics.gate_batch_bypassed = batch_bypassed

    expected = cost.expert_bytes * (metrics.misses_ondemand + metrics.prefetch_completed)
    if metrics.read_bytes != expected:
        raise memtier.InvariantViolation("transfer byte conservation failed")

    if oracle_outputs is None:
        # same batch shape as the replay loop so full residency scores 1.0
        oracle_outputs = run_oracle(model, x, temperature, batch=batch)
    readout = readout_head(spec, cfg["fidelity.readout_classes"])
    metrics.fidelity_cosine, metrics.fidelity_argmax = fidelity(outputs, oracle_outputs, readout)

    return SimResult(
        metrics=metrics,
        outputs=outputs,
        events=events if collect_events else [],
        gate_records=gate_records,
        tau_by_layer=list(tau_by_layer),
        beta_final=controller.beta if controller is not None else cfg["gate.beta"],
        bandwidth_series=bandwidth,
    )


def _echo_rows(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    rho = cfg["sub.rho"]
    return [
        ("method", cfg["method"]),
        ("cache_rate", repr(cfg["cache.rate"])),
        ("cache_policy", cfg["cache.policy"]),
        ("alpha", str(cfg["builder.alpha"])),
        ("k_max", str(cfg["builder.k_max"])),
        ("rho", "unlimited" if rho is None else str(rho)),
        ("run_seed", str(cfg["run.seed"])),
        ("stream_seed", str(cfg["stream.seed"])),
        ("num_tokens", str(cfg["stream.num_tokens"])),
        ("batch", str(cfg["stream.batch"])),
    ]


def write_metrics(metrics: RunMetrics, cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        f.write("metric,value\n")
        for k, v in metrics.as_rows() + _echo_rows(cfg):
            f.write(f"{k},{v}\n")


def read_metrics(path) -> dict:
    out = {}
    with open(path) as f:
        header = f.readline().strip()
        if header != "metric,value":
            raise FormatError(f"{path}: not a metrics file")
        for line in f:
            k, _, v = line.strip().partition(",")
            out[k] = v
    if out.get("format") != "bsim/1":
        raise FormatError(f"{path}: bad or missing format version")
    return out


def cmd_simulate(cfg: ExperimentConfig, out_dir: str) -> tuple[RunMetrics, dict]:
    """Load artifacts, run the configured method, write metrics, event log,
    gate records, and the per-step bandwidth series."""
    cfg.validate_run()
    layers = cfg["model.layers"]
    method = cfg["method"]
    profile_dir = cfg["io.profile_dir"]

    tables = None
    tau_by_layer = None
    if method == "buddy":
        tables = [buddies.load_table(_table_path(cfg["io.build_dir"], l)) for l in range(layers)]
        if cfg.gate_config().tau is None:
            samples = load_tae_samples(_tae_path(profile_dir))
            tau_by_layer = []
            for l in range(layers):
                if l not in samples:
                    raise CalibrationError(f"no entropy samples for layer {l}")
                tau_by_layer.append(
                    gating.calibrate_tau(samples[l], cfg.gate_config().tau_percentile)
                )

    static_freq = None
    if cfg["cache.policy"] == memtier.POLICY_FREQ_STATIC:
        static_freq = [
            profiler.load_stats(_stats_path(profile_dir, l)).counts for l in range(layers)
        ]

    result = run_simulation(cfg, tables=tables, tau_by_layer=tau_by_layer,
                            static_freq=static_freq)

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "metrics": os.path.join(out_dir, "metrics.csv"),
        "events": os.path.join(out_dir, "events.log"),
        "bandwidth": os.path.join(out_dir, "bandwidth.csv"),
    }
    write_metrics(result.metrics, cfg, paths["metrics"])
    memtier.save_events(result.events, paths["events"])
    with open(paths["bandwidth"], "w") as f:
        f.write("step,read_bytes\n")
        for step, nbytes in result.bandwidth_series:
            f.write(f"{step},{nbytes}\n")
    if method == "buddy":
        paths["gates"] = os.path.join(out_dir, "gates.log")
        with open(paths["gates"], "w") as f:
            f.write("bsim/1\n")
            for step, layer, token, h, m, d, tok_ok, batch_ok in result.gate_records:
                f.write(f"{step} {layer} {token} {h!r} {m!r} {d!r} {int(tok_ok)} {int(batch_ok)}\n")
    return result.metrics, paths


# ----------------------------------------------------------------- report


_REPORT_COLUMNS = (
    "method", "cache_rate", "alpha", "k_max", "rho",
    "fidelity_cosine", "fidelity_argmax", "tokens_per_s", "read_bytes",
)


def cmd_report(metrics_paths, out_dir: str | None = None) -> str:
    """Collate metrics files into an aligned comparison table; optionally
    write the same rows as plot-ready CSV."""
    if not metrics_paths:
        raise ConfigurationError("report needs at least one metrics file")
    rows = []
    for p in metrics_paths:
        m = read_metrics(p)
        missing = [c for c in _REPORT_COLUMNS if c not in m]
        if missing:
            raise FormatError(f"{p}: missing metrics {missing}")
        rows.append([m[c] for c in _REPORT_COLUMNS])

    def fmt(v, col):
        if col in ("fidelity_cosine", "fidelity_argmax", "tokens_per_s", "cache_rate"):
            try:
                return f"{float(v):.4f}"
            except ValueError:
                return v
        return v

    display = [list(_REPORT_COLUMNS)]
    for r in rows:
        display.append([fmt(v, c) for v, c in zip(r, _REPORT_COLUMNS)])
    widths = [max(len(row[i]) for row in display) for i in range(len(_REPORT_COLUMNS))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in display]
    table = "\n".join(lines)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.csv"), "w") as f:
            f.write(",".join(_REPORT_COLUMNS) + "\n")
            for r in rows:
                f.write(",".join(r) + "\n")
    return table
