"""Co-activation statistics: accumulation, smoothing, serialization."""

import numpy as np
import pytest

from buddysim.errors import DegeneratePivotError, FormatError, InputError
from buddysim.profiler import (
    CoActivationStats,
    conditional_row,
    export_coactivation_csv,
    gini,
    load_stats,
    merge,
    observe,
    save_stats,
)

from conftest import make_decision


def _stats(E=4, **kw):
    kw.setdefault("warmup_steps", 0)
    return CoActivationStats(layer=0, num_experts=E, **kw)


def test_observe_hand_counts():
    st = _stats(E=3)
    observe(st, make_decision([0, 1], probs=[0.6, 0.4], num_experts=3), step=0)
    observe(st, make_decision([0, 2], probs=[0.7, 0.3], num_experts=3), step=1)
    observe(st, make_decision([1, 2], probs=[0.5, 0.5], num_experts=3), step=2)
    assert st.tokens_seen == 3
    assert st.counts.tolist() == [2.0, 2.0, 2.0]
    assert st.pair_counts[0, 1] == st.pair_counts[1, 0] == 1.0
    assert st.pair_counts[0, 2] == 1.0 and st.pair_counts[1, 2] == 1.0
    assert np.all(np.diag(st.pair_counts) == 0.0)
    # weighted mass accumulates min of the two renormalized probabilities
    assert st.pair_weights[0, 1] == pytest.approx(0.4)
    assert st.pair_weights[0, 2] == pytest.approx(0.3)
    assert st.pair_weights[1, 2] == pytest.approx(0.5)
    assert np.array_equal(st.pair_counts, st.pair_counts.T)


def test_observe_warmup_downweights():
    st = _stats(E=3, warmup_steps=2, warmup_weight=0.0)
    observe(st, make_decision([0, 1], num_experts=3), step=0)
    observe(st, make_decision([0, 1], num_experts=3), step=1)
    assert st.tokens_seen == 2
    assert st.counts.sum() == 0.0
    observe(st, make_decision([0, 1], num_experts=3), step=2)
    assert st.counts.tolist() == [1.0, 1.0, 0.0]

    half = _stats(E=3, warmup_steps=1, warmup_weight=0.5)
    observe(half, make_decision([0, 1], num_experts=3), step=0)
    assert half.counts.tolist() == [0.5, 0.5, 0.0]
    assert half.pair_counts[0, 1] == 0.5


def test_observe_rejects_bad_selections():
    st = _stats(E=4)
    with pytest.raises(InputError):
        observe(st, make_decision([1, 1], num_experts=4), step=0)
    with pytest.raises(InputError):
        observe(st, make_decision([0, 9], num_experts=4), step=0)
    with pytest.raises(InputError):
        observe(st, make_decision([0, 1], num_experts=4, layer=5), step=0)


def test_stats_config_validation():
    with pytest.raises(InputError):
        CoActivationStats(layer=0, num_experts=0)
    with pytest.raises(InputError):
        CoActivationStats(layer=0, num_experts=4, laplace_eps=-1.0)
    with pytest.raises(InputError):
        CoActivationStats(layer=0, num_experts=4, warmup_weight=1.5)


def test_conditional_row_hand_value():
    st = _stats(E=3, laplace_eps=0.5)
    st.pair_counts[0, 1] = st.pair_counts[1, 0] = 2.0
    row = conditional_row(st, 0, mode="binary")
    # smoothed off-diagonal: [_, 2.5, 0.5] -> normalized [0, 5/6, 1/6]
    assert row.q[0] == 0.0
    assert row.q[1] == pytest.approx(5.0 / 6.0, abs=1e-12)
    assert row.q[2] == pytest.approx(1.0 / 6.0, abs=1e-12)
    assert row.q.sum() == pytest.approx(1.0, abs=1e-12)


def test_conditional_row_unseen_pivot_uniform():
    st = _stats(E=5, laplace_eps=1e-3)
    row = conditional_row(st, 2)
    np.testing.assert_allclose(row.q[np.arange(5) != 2], 0.25, atol=1e-12)
    assert row.q[2] == 0.0


def test_conditional_row_normalization_random():
    rng = np.random.default_rng(12)
    st = _stats(E=8, laplace_eps=1e-3)
    m = rng.random((8, 8))
    st.pair_counts += m + m.T
    for pivot in range(8):
        q = conditional_row(st, pivot).q
        assert abs(float(q.sum()) - 1.0) < 1e-9
        assert q[pivot] == 0.0


def test_conditional_row_degenerate_without_smoothing():
    st = _stats(E=3, laplace_eps=0.0)
    with pytest.raises(DegeneratePivotError):
        conditional_row(st, 0)
    with pytest.raises(InputError):
        conditional_row(st, 7)
    with pytest.raises(InputError):
        conditional_row(st, 0, mode="nope")


def test_merge_equals_single_stream():
    rng = np.random.default_rng(13)
    whole = _stats(E=6)
    a = _stats(E=6)
    b = _stats(E=6)
    for step in range(40):
        ids = rng.choice(6, size=3, replace=False)
        p = rng.random(3)
        p /= p.sum()
        d = make_decision(ids, p, num_experts=6, token=step)
        observe(whole, d, step=step)
        observe(a if step % 2 == 0 else b, d, step=step)
    m = merge(a, b)
    assert m.tokens_seen == whole.tokens_seen
    np.testing.assert_allclose(m.counts, whole.counts, atol=1e-12)
    np.testing.assert_allclose(m.pair_counts, whole.pair_counts, atol=1e-12)
    np.testing.assert_allclose(m.pair_weights, whole.pair_weights, atol=1e-12)


def test_merge_rejects_mismatched_config():
    with pytest.raises(InputError):
        merge(_stats(E=4), _stats(E=5))
    with pytest.raises(InputError):
        merge(_stats(E=4, laplace_eps=0.1), _stats(E=4, laplace_eps=0.2))


def test_stats_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(14)
    st = _stats(E=5, warmup_steps=7, warmup_weight=0.25, laplace_eps=0.01)
    for step in range(30):
        ids = rng.choice(5, size=2, replace=False)
        observe(st, make_decision(ids, num_experts=5), step=step)
    p = tmp_path / "stats.bin"
    save_stats(st, p)
    back = load_stats(p)
    assert back.config_tuple() == st.config_tuple()
    assert back.tokens_seen == st.tokens_seen
    assert np.array_equal(back.counts, st.counts)
    assert np.array_equal(back.pair_counts, st.pair_counts)
    assert np.array_equal(back.pair_weights, st.pair_weights)


def test_stats_load_rejects_corruption(tmp_path):
    st = _stats(E=3)
    p = tmp_path / "stats.bin"
    save_stats(st, p)
    raw = p.read_bytes()

    bad_magic = tmp_path / "magic.bin"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_stats(bad_magic)

    truncated = tmp_path / "trunc.bin"
    truncated.write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_stats(truncated)

    bad_version = tmp_path / "ver.bin"
    bad_version.write_bytes(raw[:4] + b"\x63\x00\x00\x00" + raw[8:])
    with pytest.raises(FormatError):
        load_stats(bad_version)


def test_csv_export_shape(tmp_path):
    st = _stats(E=4)
    observe(st, make_decision([0, 3], num_experts=4), step=0)
    p = tmp_path / "coact.csv"
    export_coactivation_csv(st, p)
    lines = p.read_text().strip().splitlines()
    assert len(lines) == 4
    assert all(len(line.split(",")) == 4 for line in lines)
    assert float(lines[0].split(",")[3]) == 1.0


def test_gini_known_values():
    assert gini(np.ones(10)) == pytest.approx(0.0, abs=1e-12)
    assert gini(np.array([0.0, 0.0, 0.0, 1.0])) == pytest.approx(0.75, abs=1e-12)
    assert gini(np.zeros(4)) == 0.0
    # pairwise-difference definition as an independent check
    rng = np.random.default_rng(15)
    x = rng.random(50)
    diffs = np.abs(x[:, None] - x[None, :]).sum()
    expect = diffs / (2 * 50 * x.sum())
    assert gini(x) == pytest.approx(expect, abs=1e-9)
