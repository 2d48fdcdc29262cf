"""Acceptance gate for the whole package.

Each criterion is one test that prints exactly one PASS/FAIL line (with its
tolerance) to the real stdout, so the verdicts are visible in a plain pytest
run, and asserts the same condition so failures are red as usual.

The heavyweight fixtures run the full default-size pipeline once: profile
10000 tokens on the 24-layer model, build tables at alpha 0.95, then replay
a held-out stream under three residency budgets with three methods.
"""

import filecmp
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from buddysim import buddies, gating, harness, memtier, profiler, substitution
from buddysim.config import default_config, parse_config_text
from buddysim.gating import GateOutcome
from buddysim.model import build_model, route_batch, token_stream
from buddysim.substitution import PsiParams, SubstitutionConfig, Topology, check_plan

import conftest
from conftest import make_decision, make_table, random_instance, reference_plan

EVAL_SEED = 2
EVAL_TOKENS = 1600
CACHE_RATES = (0.375, 0.5, 0.75)
RHO = 3


def _report(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name} [{detail}]"
    conftest.ACCEPTANCE_VERDICTS.append(line)
    print(line)
    assert ok, line


# ------------------------------------------------------------- fixtures


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Default-size profile + build artifacts, computed once."""
    root = tmp_path_factory.mktemp("acceptance")
    pdir, bdir = str(root / "profile"), str(root / "build")
    cfg = default_config()
    harness.cmd_profile(cfg, pdir)
    cfg.set("io.profile_dir", pdir)
    harness.cmd_build(cfg, bdir)
    return pdir, bdir


@pytest.fixture(scope="module")
def artifacts(pipeline):
    pdir, bdir = pipeline
    cfg = default_config()
    layers = cfg["model.layers"]
    tables = [buddies.load_table(os.path.join(bdir, f"buddies_L{l:02d}.bin"))
              for l in range(layers)]
    samples = harness.load_tae_samples(os.path.join(pdir, "tae_samples.txt"))
    taus = [gating.calibrate_tau(samples[l], cfg["gate.tau_percentile"])
            for l in range(layers)]
    return {"pdir": pdir, "bdir": bdir, "tables": tables, "taus": taus}


def _eval_config(method: str, rate: float, num_tokens: int = EVAL_TOKENS):
    cfg = default_config()
    cfg.set("method", method)
    cfg.set("cache.rate", repr(rate))
    cfg.set("stream.seed", str(EVAL_SEED))
    cfg.set("stream.num_tokens", str(num_tokens))
    cfg.set("sub.rho", str(RHO))
    return cfg


@pytest.fixture(scope="module")
def eval_runs(artifacts):
    """metrics (and the buddy SimResults) for 3 methods x 3 cache rates on
    the held-out stream, all scored against one shared oracle pass."""
    cfg0 = default_config()
    spec = cfg0.model_spec()
    model = build_model(spec)
    x = token_stream(spec, EVAL_SEED, EVAL_TOKENS)
    oracle = harness.run_oracle(model, x, temperature=1.0, batch=cfg0["stream.batch"])
    runs: dict = {}
    for method in ("original", "random", "buddy"):
        for rate in CACHE_RATES:
            cfg = _eval_config(method, rate)
            result = harness.run_simulation(
                cfg,
                tables=artifacts["tables"] if method == "buddy" else None,
                tau_by_layer=artifacts["taus"] if method == "buddy" else None,
                oracle_outputs=oracle,
                collect_events=(method == "buddy"),
            )
            runs[method, rate] = result
    return runs


# ------------------------------------------------------------- criteria


def test_criterion_1_scoring_formulas():
    """Entropy, margin, distribution gate, and candidate score match hand
    values; conditional rows are proper distributions; coverage prefixes
    are minimal."""
    ok = True
    # normalized selection entropy
    ok &= gating.tae(make_decision([0, 1, 2, 3, 4, 5])) == pytest.approx(1.0, abs=1e-9)
    ok &= gating.tae(make_decision([0, 1], probs=[1.0, 0.0])) == 0.0
    ok &= gating.tae(make_decision([0, 1], probs=[0.75, 0.25])) == pytest.approx(0.8113, abs=1e-4)
    ok &= gating.tae(make_decision([3], probs=[1.0])) == 0.0
    ok &= gating.margin(make_decision([0, 1], probs=[0.75, 0.25])) == pytest.approx(0.5, abs=1e-12)

    # resident-deficit fraction and bypass rule
    mask = np.zeros(8, dtype=bool)
    mask[[0, 1, 2]] = True
    delta, allowed = gating.distribution_gate([0, 1, 2, 3, 4, 5], mask, beta=0.6)
    ok &= delta == 0.5 and allowed
    delta, allowed = gating.distribution_gate([0, 1, 2, 3, 4, 5], mask, beta=0.5)
    ok &= delta == 0.5 and not allowed
    ok &= gating.distribution_gate([0, 1], mask, beta=1.0)[0] == 0.0
    ok &= gating.distribution_gate([4, 5], mask, beta=1.0)[0] == 1.0

    # candidate score with logit, locality, and diversity terms active
    c = math.sqrt(3.0 / 7.0)
    d = make_decision([0], probs=[1.0], logits=[-1.0, 1.0, c], num_experts=3)
    table = make_table(3, {0: [(2, 0.4)]})
    topo = Topology(partition_of=np.array([0, 0, 1]), hop=1.0)
    got = substitution.psi_score(0, 2, d, table, topo, PsiParams(eta=0.1, kappa=0.05))
    ok &= got == pytest.approx(0.399, abs=1e-9)

    # conditional rows: zero diagonal, unit mass, in both modes
    rng = np.random.default_rng(101)
    rows_checked = 0
    for trial in range(4):
        E = int(rng.integers(12, 40))
        st = profiler.CoActivationStats(layer=0, num_experts=E, warmup_steps=0)
        for step in range(60):
            topk = rng.choice(E, size=4, replace=False)
            p = rng.random(4) + 0.05
            profiler.observe(st, make_decision(topk, p / p.sum(), num_experts=E), step)
        for pivot in range(E):
            for mode in ("binary", "weighted"):
                q = profiler.conditional_row(st, pivot, mode).q
                ok &= q[pivot] == 0.0
                ok &= abs(q.sum() - 1.0) <= 1e-9
                rows_checked += 1
                # minimal covering prefix at a random alpha
                alpha = float(rng.uniform(0.3, 1.0))
                t = buddies.cft_prefix(profiler.conditional_row(st, pivot, mode), alpha)
                top = np.sort(q)[::-1]
                ok &= top[:t].sum() >= alpha - 1e-9
                ok &= t == 1 or top[: t - 1].sum() < alpha - 1e-9
    ok &= rows_checked >= 100
    _report(
        "criterion 1: scoring formulas match hand values",
        bool(ok),
        f"entropy abs 1e-4, score/normalization abs 1e-9, {rows_checked} random rows",
    )


def test_criterion_2_planner_matches_reference():
    """Planner output equals an independent slot-by-slot reference on 1000
    random instances, and every plan passes the structural audit."""
    rng = np.random.default_rng(20260819)
    mismatches = 0
    audited = 0
    for _ in range(1000):
        inst = random_instance(rng)
        gates = GateOutcome(inst["allowed"], True, 1.0, 0.0, 0.0)
        cfg = SubstitutionConfig(
            search_rank_h=inst["h"], rho=inst["rho"], fallback=inst["fallback"]
        )
        params = PsiParams(eta=inst["eta"], kappa=inst["kappa"])
        topo = Topology(partition_of=inst["partition_of"], hop=1.0)
        plan = substitution.substitute_token(
            inst["decision"], inst["mask"], inst["table"], gates, cfg, params, topo
        )
        ref_slots, ref_used = reference_plan(
            inst["decision"], inst["mask"], inst["table"], inst["allowed"],
            inst["h"], inst["rho"], eta=inst["eta"], kappa=inst["kappa"],
            partition_of=inst["partition_of"], fallback=inst["fallback"],
        )
        got = [(s.original, s.executed, s.kind) for s in plan.slots]
        if got != ref_slots or plan.replacements_used != ref_used:
            mismatches += 1
            continue
        check_plan(plan, inst["decision"], inst["mask"], inst["table"], cfg)
        audited += 1
    _report(
        "criterion 2: planner equals independent reference on 1000 instances",
        mismatches == 0 and audited == 1000,
        f"exact slot/count equality, {mismatches} mismatches, {audited} audits clean",
    )


def test_criterion_3_full_residency_is_identity(artifacts):
    """With every expert resident, the replacement path is the identity:
    bitwise-equal outputs, no transfers, cosine exactly 1."""
    n = 256
    cfg = _eval_config("buddy", 1.0, num_tokens=n)
    spec = cfg.model_spec()
    model = build_model(spec)
    x = token_stream(spec, EVAL_SEED, n)
    # same batch shape as the replay loop so the comparison can be bitwise
    oracle = harness.run_oracle(model, x, temperature=1.0, batch=cfg["stream.batch"])
    result = harness.run_simulation(
        cfg, tables=artifacts["tables"], tau_by_layer=artifacts["taus"],
        oracle_outputs=oracle, collect_events=False,
    )
    m = result.metrics
    ok = (
        np.array_equal(result.outputs, oracle)
        and m.read_bytes == 0
        and m.misses_ondemand == 0
        and m.substitutions == 0
        and m.fidelity_cosine == 1.0
        and m.fidelity_argmax == 1.0
    )
    _report(
        "criterion 3: full residency reproduces the oracle",
        bool(ok),
        f"bitwise outputs, read_bytes={m.read_bytes}, cosine={m.fidelity_cosine}",
    )


def test_criterion_4_transfer_timing():
    """One on-demand miss stalls exactly expert_load_ms; one prefetch
    completes after bytes/bandwidth; transfers serialize on the channel;
    a substituted slot moves no bytes."""
    cost = memtier.CostModel()
    st = memtier.init_residency(64, 0.5, "lru", seed=0)
    clock = memtier.SimClock()
    missing = [int(e) for e in np.flatnonzero(~st.mask)[:4]]
    ev = memtier.access(st, missing[0], clock, cost)
    ok = abs(ev.stall_ms - 9.5) <= 1e-9 and abs(clock.now - 9.5) <= 1e-9
    ok &= ev.bytes == 32768

    clock2 = memtier.SimClock()
    st2 = memtier.init_residency(64, 0.5, "lru", seed=0)
    memtier.prefetch(st2, missing[:2], clock2, cost)
    ok &= abs(st2.pending[0][0] - 8.192) <= 1e-9
    ok &= abs(st2.pending[1][0] - 2 * 8.192) <= 1e-9
    ev = memtier.access(st2, missing[2], clock2, cost)  # queues behind both
    ok &= abs(ev.stall_ms - (2 * 8.192 + 9.5)) <= 1e-9

    before = clock.now
    ev = memtier.access(st, missing[3], clock, cost, mode="substituted_away")
    ok &= ev.bytes == 0 and clock.now == before + cost.hit_ms
    _report(
        "criterion 4: transfer timing is exact",
        bool(ok),
        "9.5 ms load, 8.192 ms prefetch, serialized channel, abs 1e-9",
    )


def test_criterion_5_throughput_and_fidelity(eval_runs):
    """Replacement beats the onload baseline by >= 1.05x throughput while
    staying >= 0.15 cosine above random replacement, at every budget; the
    baseline itself speeds up monotonically with cache size."""
    ok = True
    details = []
    for rate in CACHE_RATES:
        base = eval_runs["original", rate].metrics
        rnd = eval_runs["random", rate].metrics
        bud = eval_runs["buddy", rate].metrics
        ratio = bud.tokens_per_s / base.tokens_per_s
        gap = bud.fidelity_cosine - rnd.fidelity_cosine
        ok &= ratio >= 1.05
        ok &= gap >= 0.15
        details.append(f"c={rate}: x{ratio:.3f}, gap {gap:+.3f}")
    base_tps = [eval_runs["original", r].metrics.tokens_per_s for r in CACHE_RATES]
    ok &= base_tps[0] < base_tps[1] < base_tps[2]
    _report(
        "criterion 5: speedup >= 1.05x and cosine gap >= 0.15 at all budgets",
        bool(ok),
        "; ".join(details) + f"; baseline tok/s {['%.2f' % t for t in base_tps]}",
    )


def test_criterion_6_read_reduction(eval_runs):
    """Replacement moves at least 10% fewer bytes over the link than the
    onload baseline at every budget."""
    ok = True
    details = []
    for rate in CACHE_RATES:
        base = eval_runs["original", rate].metrics.read_bytes
        bud = eval_runs["buddy", rate].metrics.read_bytes
        reduction = 1.0 - bud / base
        ok &= reduction >= 0.10
        details.append(f"c={rate}: -{100 * reduction:.1f}%")
    _report(
        "criterion 6: >= 10% fewer read bytes than baseline",
        bool(ok),
        "; ".join(details),
    )


def test_criterion_7_table_structure(artifacts):
    """Built tables are capped, descending, prefix-monotone in alpha, and
    cover alpha when uncapped; storage never exceeds k_max per pivot."""
    ok = True
    # deployed tables from the real pipeline
    for table in artifacts["tables"]:
        ok &= table.k_max == 16
        ok &= table.total_entries() <= 16 * table.num_experts
        for p in range(table.num_experts):
            w = table.weights(p)
            ok &= w.size <= 16
            ok &= bool(np.all(np.diff(w) <= 1e-12)) if w.size > 1 else True

    # alpha semantics on synthetic stats
    rng = np.random.default_rng(707)
    pivots_checked = 0
    for trial in range(5):
        E = int(rng.integers(16, 48))
        st = profiler.CoActivationStats(layer=0, num_experts=E, warmup_steps=0)
        for step in range(80):
            topk = rng.choice(E, size=5, replace=False)
            p = rng.random(5) + 0.05
            profiler.observe(st, make_decision(topk, p / p.sum(), num_experts=E), step)
        lo = buddies.build_table(st, alpha=0.5, k_max=16)
        hi = buddies.build_table(st, alpha=0.95, k_max=16)
        for p in range(E):
            ids_lo, ids_hi = lo.ids(p), hi.ids(p)
            ok &= ids_lo.size <= ids_hi.size
            ok &= np.array_equal(ids_lo, ids_hi[: ids_lo.size])
            if ids_hi.size < 16:  # uncapped: stored mass covers alpha
                ok &= hi.weights(p).sum() >= 0.95 - 1e-9
            pivots_checked += 1
    ok &= pivots_checked >= 100
    _report(
        "criterion 7: coverage prefixes are capped, sorted, and monotone",
        bool(ok),
        f"coverage >= alpha - 1e-9, caps exact, {pivots_checked} pivots",
    )


def test_criterion_8_gate_behavior(eval_runs):
    """No token that a gate forbade ever gets a substitution, and the
    percentile calibration carries to the held-out stream."""
    result = eval_runs["buddy", 0.5]
    blocked = {
        (layer, token)
        for _, layer, token, _, _, _, tok_ok, batch_ok in result.gate_records
        if not (tok_ok and batch_ok)
    }
    violations = sum(
        1
        for ev in result.events
        if ev.kind == memtier.EV_MISS_SUBSTITUTED and (ev.layer, ev.token) in blocked
    )
    forbidden = [1.0 for rec in result.gate_records if not rec[6]]
    frac = 100.0 * len(forbidden) / len(result.gate_records)
    ok = violations == 0 and abs(frac - 15.0) <= 5.0
    _report(
        "criterion 8: gates block substitution and calibrate to the percentile",
        bool(ok),
        f"{violations} forbidden substitutions, held-out forbidden rate "
        f"{frac:.1f}% vs 15% +/- 5",
    )


_TINY_CFG = """
model.layers = 3
model.experts = 16
model.top_k = 3
model.hidden_dim = 16
model.ffn_dim = 24
model.clusters = 4
stream.num_tokens = 256
stream.batch = 32
stream.warmup_steps = 0
builder.k_max = 8
sub.h = 8
cache.rate = 0.5
"""


def _cli(*argv):
    return subprocess.run(
        [sys.executable, "-m", "buddysim", *argv], capture_output=True, text=True
    )


def _same_dirs(a, b):
    names = sorted(os.listdir(a))
    if names != sorted(os.listdir(b)):
        return False
    return all(filecmp.cmp(os.path.join(a, n), os.path.join(b, n), shallow=False)
               for n in names)


def test_criterion_9_cli_determinism(tmp_path):
    """Every subcommand, run twice from the command line with the same
    inputs, writes byte-identical artifacts."""
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(_TINY_CFG)
    ok = True
    for name in ("profile_a", "profile_b"):
        r = _cli("profile", "--config", str(cfg), "--out", str(tmp_path / name))
        ok &= r.returncode == 0
    ok &= _same_dirs(tmp_path / "profile_a", tmp_path / "profile_b")

    for name in ("build_a", "build_b"):
        r = _cli(
            "build", "--config", str(cfg),
            "--set", f"io.profile_dir={tmp_path / 'profile_a'}",
            "--out", str(tmp_path / name),
        )
        ok &= r.returncode == 0
    ok &= _same_dirs(tmp_path / "build_a", tmp_path / "build_b")

    for name in ("run_a", "run_b"):
        r = _cli(
            "simulate", "--config", str(cfg),
            "--set", f"io.profile_dir={tmp_path / 'profile_a'}",
            "--set", f"io.build_dir={tmp_path / 'build_a'}",
            "--set", "stream.seed=2", "--set", "stream.num_tokens=128",
            "--out", str(tmp_path / name),
        )
        ok &= r.returncode == 0
    ok &= _same_dirs(tmp_path / "run_a", tmp_path / "run_b")

    outs = []
    for name in ("report_a", "report_b"):
        r = _cli("report", str(tmp_path / "run_a" / "metrics.csv"),
                 "--out", str(tmp_path / name))
        ok &= r.returncode == 0
        outs.append(r.stdout)
    ok &= outs[0] == outs[1]
    ok &= _same_dirs(tmp_path / "report_a", tmp_path / "report_b")
    _report(
        "criterion 9: command line pipeline is deterministic",
        bool(ok),
        "byte-identical artifacts for profile/build/simulate/report run twice",
    )
