"""Routing diagnostics: dumps, agreement statistics, entropy, perturbation."""

import itertools
import math

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from moekit import tensor as T
from moekit.analytics import (ContingencyTable, RoutingRecord,
                              adjacent_cramers_v, align_labels, chi_square,
                              contingency, cramers_v, dump_routes,
                              exhaustive_pair_alignment, frame_argmax_labels,
                              num_experts_of, permutation_experiment,
                              read_routes_csv, routing_entropy, usage_map,
                              write_routes_csv)
from moekit.data import SynthSpec, Tokenizer, generate
from moekit.encoder import ModelConfig, build_model
from moekit.errors import ContractError


def rec(uid, layer, frame, expert, n=2, probs=None):
    if probs is None:
        probs = np.zeros(n)
        probs[expert] = 1.0
    return RoutingRecord(utterance_id=uid, layer=layer, frame=frame,
                         expert=expert, gate=float(probs[expert]),
                         probs=np.asarray(probs, dtype=np.float64))


def routed_model(**kw):
    base = dict(variant="omni", layers=3, embed_dim=16, ffn_dim=24, heads=2,
                experts=2, vocab_size=7, frame_stack=2, feat_dim=8)
    base.update(kw)
    return build_model(ModelConfig(**base), seed=0)


def small_corpus(n=4):
    spec = SynthSpec(alphabet_size=6, min_tokens=3, max_tokens=5, min_frames=5,
                     max_frames=8, feat_dim=8, frame_stack=2, seed=1)
    return generate(spec, n), Tokenizer(6)


# ---------------------------------------------------------------------------
# Route dumps
# ---------------------------------------------------------------------------


def test_dump_routes_record_structure():
    model = routed_model()
    utts, _ = small_corpus()
    records = dump_routes(model, utts)
    total_stacked = sum(-(-u.features.shape[0] // 2) for u in utts)
    assert len(records) == total_stacked * 3
    for r in records:
        assert abs(r.probs.sum() - 1.0) < 1e-6
        assert r.expert == int(np.argmax(r.probs))
        assert r.gate == pytest.approx(r.probs[r.expert])


def test_dump_routes_rejects_dense():
    model = build_model(ModelConfig(variant="dense", layers=2, embed_dim=16,
                                    ffn_dim=24, heads=2, experts=1, vocab_size=7,
                                    frame_stack=2, feat_dim=8), seed=0)
    utts, _ = small_corpus(1)
    with pytest.raises(ContractError):
        dump_routes(model, utts)


def test_dump_routes_forced_expert():
    model = routed_model()
    # All-zero router logits tie everywhere; ties resolve to expert 0.
    model.shared_router.weight.data[:] = 0.0
    utts, _ = small_corpus(2)
    records = dump_routes(model, utts)
    assert all(r.expert == 0 for r in records)
    assert all(abs(r.gate - 0.5) < 1e-6 for r in records)


def test_dump_matches_live_forward():
    model = routed_model()
    utts, _ = small_corpus(3)
    records = dump_routes(model, utts)
    by_key = {(r.utterance_id, r.layer, r.frame): r.expert for r in records}
    for u in utts:
        _, dispatches = model.forward_utterance(u.features)
        for layer_pos, d in enumerate(dispatches):
            for t in range(d.num_tokens):
                assert by_key[(u.id, layer_pos, t)] == int(d.assignment[t])


def test_routes_csv_round_trip(tmp_path):
    model = routed_model()
    utts, _ = small_corpus(2)
    records = dump_routes(model, utts)
    main = tmp_path / "routes.csv"
    sidecar = tmp_path / "routes_probs.csv"
    write_routes_csv(records, main, probs_path=sidecar)
    back = read_routes_csv(main, probs_path=sidecar)
    assert len(back) == len(records)
    for a, b in zip(records, back):
        assert (a.utterance_id, a.layer, a.frame, a.expert) == \
            (b.utterance_id, b.layer, b.frame, b.expert)
        assert a.gate == b.gate  # repr round-trip is exact
        assert np.array_equal(a.probs, b.probs)
    # Without the sidecar the probs are simply absent.
    bare = read_routes_csv(main)
    assert all(b.probs.size == 0 for b in bare)
    with pytest.raises(ContractError):
        bad = tmp_path / "bad.csv"
        bad.write_text("wrong,header\n")
        read_routes_csv(bad)


# ---------------------------------------------------------------------------
# Contingency tables and Cramer's V
# ---------------------------------------------------------------------------


def hand_records(lower, upper):
    records = []
    for t, (a, b) in enumerate(zip(lower, upper)):
        records.append(rec("u", 0, t, a))
        records.append(rec("u", 1, t, b))
    return records


def test_contingency_hand_count():
    records = hand_records([0, 0, 1, 1, 0, 1], [1, 1, 0, 0, 1, 1])
    table = contingency(records, 0)
    assert table.layer_pair == (0, 1)
    assert table.total == 6
    assert table.counts[0, 1] == 3
    assert table.counts[1, 0] == 2
    assert table.counts[1, 1] == 1
    assert table.counts[0, 0] == 0


def test_contingency_identical_and_constant():
    same = contingency(hand_records([0, 1, 0, 1], [0, 1, 0, 1]), 0)
    assert np.array_equal(same.counts, np.diag([2, 2]))
    col = contingency(hand_records([0, 1, 1, 0], [0, 0, 0, 0]), 0)
    assert np.all(col.counts[:, 1:] == 0)
    with pytest.raises(ContractError):
        contingency(hand_records([0], [0]), 5)


def test_cramers_v_frozen_values():
    assert cramers_v(np.diag([7, 9])) == pytest.approx(1.0)
    margins_r = np.array([12, 18])
    margins_c = np.array([10, 20])
    independent = np.outer(margins_r, margins_c)  # scaled independence
    assert cramers_v(independent) == pytest.approx(0.0, abs=1e-12)
    table = np.array([[10, 2], [3, 15]])
    chi2 = chi_square(table)
    assert chi2 == pytest.approx(622080 / 47736, abs=1e-9)
    assert cramers_v(table) == pytest.approx(math.sqrt(622080 / 47736 / 30), abs=1e-9)
    assert cramers_v(table) == pytest.approx(0.6591, abs=5e-4)


def test_cramers_v_degenerate_and_errors():
    assert cramers_v(np.array([[5, 7], [0, 0]])) == 0.0
    assert cramers_v(np.array([[5, 0], [3, 0]])) == 0.0
    with pytest.raises(ContractError):
        cramers_v(np.zeros((2, 2), dtype=np.int64))
    with pytest.raises(ContractError):
        cramers_v(np.zeros(3))


def test_cramers_v_invariances():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 5))
        table = rng.integers(0, 20, size=(n, n))
        if table.sum() == 0:
            continue
        v = cramers_v(table)
        assert 0.0 <= v <= 1.0
        assert cramers_v(table * 7) == pytest.approx(v, abs=1e-12)
        pr = rng.permutation(n)
        pc = rng.permutation(n)
        assert cramers_v(table[pr][:, pc]) == pytest.approx(v, abs=1e-12)


def test_chi_square_matches_scipy():
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(60):
        r, c = int(rng.integers(2, 8)), int(rng.integers(2, 8))
        table = rng.integers(0, 30, size=(r, c))
        sub = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
        if sub.size == 0 or sub.shape[0] < 2 or sub.shape[1] < 2:
            continue
        want = chi2_contingency(sub, correction=False).statistic
        assert chi_square(table) == pytest.approx(want, abs=1e-9)
        checked += 1
    assert checked >= 40


def test_adjacent_cramers_v_runs_all_pairs():
    model = routed_model(layers=3)
    utts, _ = small_corpus(3)
    records = dump_routes(model, utts)
    rows = adjacent_cramers_v(records, 3)
    assert [pair for pair, _ in rows] == [(0, 1), (1, 2)]
    for _, v in rows:
        assert 0.0 <= v <= 1.0


# ---------------------------------------------------------------------------
# Label alignment
# ---------------------------------------------------------------------------


def test_alignment_trivial_cases():
    diag = ContingencyTable(counts=np.diag([5, 3]), layer_pair=(0, 1))
    perms = align_labels([diag])
    assert np.array_equal(perms[0], [0, 1])
    assert np.array_equal(perms[1], [0, 1])
    anti = ContingencyTable(counts=np.array([[0, 4], [6, 0]]), layer_pair=(0, 1))
    perms = align_labels([anti])
    assert np.array_equal(perms[1], [1, 0])


def test_alignment_matches_exhaustive_on_random_tables():
    rng = np.random.default_rng(2)
    for _ in range(30):
        counts = rng.integers(0, 25, size=(4, 4))
        fast = align_labels([ContingencyTable(counts=counts, layer_pair=(0, 1))])[1]
        slow = exhaustive_pair_alignment(counts)
        score = lambda m: sum(counts[m[b], b] for b in range(4))
        assert score(fast) == score(slow)
        assert sorted(fast.tolist()) == [0, 1, 2, 3]  # a real bijection


def test_alignment_composes_to_layer_zero():
    # Layer 1 swaps the labels, layer 2 swaps them back: the composition
    # must return layer 2 to the identity display labels.
    swap = np.array([[0, 9], [9, 0]])
    t01 = ContingencyTable(counts=swap, layer_pair=(0, 1))
    t12 = ContingencyTable(counts=swap, layer_pair=(1, 2))
    perms = align_labels([t01, t12])
    assert np.array_equal(perms[1], [1, 0])
    assert np.array_equal(perms[2], [0, 1])


def test_alignment_order_and_shape_errors():
    ok = ContingencyTable(counts=np.diag([1, 1]), layer_pair=(0, 1))
    wrong_pair = ContingencyTable(counts=np.diag([1, 1]), layer_pair=(2, 3))
    with pytest.raises(ContractError):
        align_labels([ok, wrong_pair])
    with pytest.raises(ContractError):
        align_labels([ContingencyTable(counts=np.ones((2, 3), dtype=int),
                                       layer_pair=(0, 1))])
    with pytest.raises(ContractError):
        align_labels([])


def test_usage_map_grid():
    records = hand_records([0, 1, 1], [1, 0, 1])
    perms = [np.array([0, 1]), np.array([1, 0])]  # display-swap layer 1
    grid = usage_map(records, perms)
    assert grid == {"u": [[0, 1, 1], [0, 1, 0]]}


# ---------------------------------------------------------------------------
# Routing entropy
# ---------------------------------------------------------------------------


def test_entropy_extremes():
    records = [rec("u", 0, t, 0, n=4) for t in range(8)]
    labels = {("u", t): 1 for t in range(8)}
    report = routing_entropy(records, labels)
    assert report.entropy[(1, 0)] == 0.0

    records = [rec("u", 0, t, t % 4, n=4) for t in range(8)]
    report = routing_entropy(records, labels)
    assert report.entropy[(1, 0)] == pytest.approx(2.0)

    records = [rec("u", 0, t, t % 2, n=4) for t in range(8)]
    report = routing_entropy(records, labels)
    assert report.entropy[(1, 0)] == pytest.approx(1.0)


def test_entropy_bounds_and_top_k():
    rng = np.random.default_rng(3)
    records = []
    labels = {}
    for t in range(60):
        records.append(rec("u", 0, t, int(rng.integers(0, 4)), n=4))
        labels[("u", t)] = int(rng.integers(1, 6))
    report = routing_entropy(records, labels, top_k=3)
    assert len(report.groups) == 3
    counts = sorted(
        (sum(1 for v in labels.values() if v == s) for s in report.groups),
        reverse=True)
    all_counts = sorted((sum(1 for v in labels.values() if v == s)
                         for s in set(labels.values())), reverse=True)
    assert counts == all_counts[:3]
    for h in report.entropy.values():
        assert 0.0 <= h <= 2.0 + 1e-12


def test_entropy_skips_empty_cells():
    records = [rec("u", 0, 0, 0), rec("u", 1, 1, 1)]
    labels = {("u", 0): 1, ("u", 1): 2}
    report = routing_entropy(records, labels)
    # Symbol 1 only appears at layer 0, symbol 2 only at layer 1: two of
    # the four (symbol, layer) cells are empty.
    assert report.skipped == 2
    assert set(report.entropy) == {(1, 0), (2, 1)}


def test_entropy_probability_averaged_variant():
    probs = np.array([0.5, 0.5])
    records = [RoutingRecord("u", 0, t, 0, 0.5, probs.copy()) for t in range(4)]
    labels = {("u", t): 1 for t in range(4)}
    by_count = routing_entropy(records, labels, use_probabilities=False)
    by_prob = routing_entropy(records, labels, use_probabilities=True)
    assert by_count.entropy[(1, 0)] == 0.0  # all assignments hit expert 0
    assert by_prob.entropy[(1, 0)] == pytest.approx(1.0)  # mean probs are split


def test_frame_argmax_labels_cover_all_frames():
    model = routed_model()
    utts, _ = small_corpus(2)
    labels = frame_argmax_labels(model, utts)
    for u in utts:
        stacked = -(-u.features.shape[0] // 2)
        for t in range(stacked):
            assert (u.id, t) in labels
            assert 0 <= labels[(u.id, t)] < 7


# ---------------------------------------------------------------------------
# Permutation robustness probe
# ---------------------------------------------------------------------------


def test_permutation_zero_p_is_pass_through():
    model = routed_model()
    utts, tok = small_corpus(3)
    rows = permutation_experiment(model, utts, tok, [0.0, 0.5], trials=2, seed=0)
    assert rows[0]["p"] == 0.0
    assert rows[0]["mean_change"] == 0.0
    assert rows[0]["absolute"] is False  # untrained model decodes badly
    assert rows[0]["baseline_wer"] == rows[1]["baseline_wer"]


def test_permutation_symmetric_experts_are_harmless():
    model = routed_model()
    # Identical experts and a flat router: substitution cannot change the
    # output, whatever the draw.
    model.shared_router.weight.data[:] = 0.0
    for block in model.blocks:
        e0, e1 = block.ffn.experts
        e1.w1.data = e0.w1.data.copy()
        e1.w2.data = e0.w2.data.copy()
    utts, tok = small_corpus(3)
    rows = permutation_experiment(model, utts, tok, [0.0, 1.0], trials=2, seed=1)
    assert rows[1]["mean_change"] == 0.0


def test_permutation_validation_and_determinism():
    model = routed_model()
    utts, tok = small_corpus(2)
    with pytest.raises(ContractError):
        permutation_experiment(model, utts, tok, [1.5], trials=1)
    dense = build_model(ModelConfig(variant="dense", layers=2, embed_dim=16,
                                    ffn_dim=24, heads=2, experts=1, vocab_size=7,
                                    frame_stack=2, feat_dim=8), seed=0)
    with pytest.raises(ContractError):
        permutation_experiment(dense, utts, tok, [0.5], trials=1)
    a = permutation_experiment(model, utts, tok, [0.3, 0.7], trials=2, seed=9)
    b = permutation_experiment(model, utts, tok, [0.3, 0.7], trials=2, seed=9)
    assert a == b
