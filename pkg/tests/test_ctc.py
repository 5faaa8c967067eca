"""CTC loss against a brute-force alignment oracle, plus decoding and WER."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import analytic_gradients, numeric_gradients
from moekit import tensor as T
from moekit.ctc import (InfeasibleTargetError, corpus_wer, ctc_loss,
                        ctc_loss_batch, greedy_decode, levenshtein,
                        min_frames_for, normalize_text, wer)
from moekit.errors import ContractError


def collapse(path):
    out = []
    prev = -1
    for p in path:
        if p != prev and p != 0:
            out.append(p)
        prev = p
    return out


def brute_force_loss(log_probs, target):
    """Sum path probabilities over every alignment that collapses to target."""
    frames, vocab = log_probs.shape
    target = list(target)
    total = 0.0
    for path in itertools.product(range(vocab), repeat=frames):
        if collapse(path) == target:
            total += math.exp(sum(log_probs[t, k] for t, k in enumerate(path)))
    return -math.log(total)


def random_log_probs(rng, frames, vocab):
    p = rng.dirichlet(np.ones(vocab), size=frames)
    return np.log(p)


def test_single_frame_single_path():
    lp = np.log(np.array([[0.5, 0.5]]))
    loss = ctc_loss(T.constant(lp, dtype=np.float64), [1]).item()
    assert abs(loss - (-math.log(0.5))) < 1e-12


def test_two_frame_uniform():
    # Three of the four alignments collapse to [1]: (1,-), (-,1), (1,1).
    lp = np.log(np.full((2, 2), 0.5))
    loss = ctc_loss(T.constant(lp, dtype=np.float64), [1]).item()
    assert abs(loss - 0.2876820724517809) < 1e-12


def test_empty_target_scores_all_blank_path():
    lp = np.log(np.array([[0.6, 0.4], [0.7, 0.3], [0.5, 0.5]]))
    loss = ctc_loss(T.constant(lp, dtype=np.float64), []).item()
    assert abs(loss - (-math.log(0.6 * 0.7 * 0.5))) < 1e-12


def test_matches_brute_force_on_random_instances(f64):
    rng = np.random.default_rng(42)
    for _ in range(25):
        frames = int(rng.integers(1, 7))
        vocab = int(rng.integers(2, 5))
        max_len = min(frames, 4)
        length = int(rng.integers(0, max_len + 1))
        target = rng.integers(1, vocab, size=length).tolist()
        if frames < min_frames_for(target):
            continue
        lp = random_log_probs(rng, frames, vocab)
        got = ctc_loss(T.constant(lp), target).item()
        want = brute_force_loss(lp, target)
        assert abs(got - want) < 1e-10


def test_gradient_matches_finite_differences(f64):
    rng = np.random.default_rng(7)
    lp = T.parameter(random_log_probs(rng, 5, 3))
    target = [1, 2, 1]
    make = lambda: ctc_loss(lp, target)
    analytic = analytic_gradients(make, [lp])
    numeric = numeric_gradients(make, [lp], h=1e-6)
    assert np.abs(analytic[0] - numeric[0]).max() < 1e-5


def test_gradient_respects_chain_scale(f64):
    rng = np.random.default_rng(8)
    data = random_log_probs(rng, 4, 3)
    lp = T.parameter(data.copy())
    with T.Tape():
        T.backward(T.scale(ctc_loss(lp, [1, 2]), 3.0))
    tripled = lp.grad.copy()
    lp2 = T.parameter(data.copy())
    with T.Tape():
        T.backward(ctc_loss(lp2, [1, 2]))
    assert np.allclose(tripled, 3.0 * lp2.grad, atol=1e-12)


def test_posterior_rows_sum_to_one(f64):
    # The gradient of the loss w.r.t. log-probs sums to -1 per frame: each
    # frame emits exactly one symbol along every path.
    rng = np.random.default_rng(9)
    lp = T.parameter(random_log_probs(rng, 6, 4))
    with T.Tape():
        T.backward(ctc_loss(lp, [2, 1, 3]))
    assert np.allclose(lp.grad.sum(axis=1), -1.0, atol=1e-9)


def test_probability_conservation(f64):
    # With normalized rows, total probability over every reachable collapsed
    # output must be exactly one.
    rng = np.random.default_rng(10)
    frames, vocab = 4, 3
    lp = random_log_probs(rng, frames, vocab)
    total = 0.0
    for length in range(0, frames + 1):
        for target in itertools.product(range(1, vocab), repeat=length):
            if min_frames_for(target) > frames:
                continue
            total += math.exp(-ctc_loss(T.constant(lp), list(target)).item())
    assert abs(total - 1.0) < 1e-10


def test_infeasible_target_raises():
    lp = T.constant(np.log(np.full((2, 3), 1 / 3)))
    with pytest.raises(InfeasibleTargetError):
        ctc_loss(lp, [1, 1])  # repeat needs a separating blank: 3 frames
    with pytest.raises(InfeasibleTargetError):
        ctc_loss(lp, [1, 2, 1])


def test_target_token_validation():
    lp = T.constant(np.log(np.full((4, 3), 1 / 3)))
    with pytest.raises(ContractError):
        ctc_loss(lp, [0, 1])
    with pytest.raises(ContractError):
        ctc_loss(lp, [3])


def test_min_frames_for():
    assert min_frames_for([]) == 0
    assert min_frames_for([1, 2, 3]) == 3
    assert min_frames_for([1, 1]) == 3
    assert min_frames_for([2, 2, 2]) == 5


def test_batch_is_mean_of_utterances(f64):
    rng = np.random.default_rng(11)
    lps = [T.constant(random_log_probs(rng, 5, 3)) for _ in range(3)]
    targets = [[1], [2, 1], [1, 2, 2]]
    single = [ctc_loss(lp, t).item() for lp, t in zip(lps, targets)]
    batch = ctc_loss_batch(lps, targets).item()
    assert abs(batch - sum(single) / 3) < 1e-12
    with pytest.raises(ContractError):
        ctc_loss_batch([], [])
    with pytest.raises(ContractError):
        ctc_loss_batch(lps, targets[:2])


def test_greedy_decode_collapse_rules():
    def from_argmax(ids, vocab=4):
        lp = np.full((len(ids), vocab), -10.0)
        lp[np.arange(len(ids)), ids] = 0.0
        return lp

    assert greedy_decode(from_argmax([1, 1, 0, 2])) == [1, 2]
    assert greedy_decode(from_argmax([0, 0, 0])) == []
    assert greedy_decode(from_argmax([1, 0, 1])) == [1, 1]


def test_greedy_decode_monotone_invariance():
    rng = np.random.default_rng(12)
    lp = rng.normal(size=(9, 5))
    base = greedy_decode(lp)
    assert greedy_decode(lp * 2.0) == base
    assert greedy_decode(lp + 7.0) == base
    assert greedy_decode(np.tanh(lp)) == base  # strictly monotone


def test_wer_examples():
    assert wer(["a", "b", "c"], ["a", "b", "c"]) == 0.0
    assert abs(wer(["a", "b", "c"], ["a", "x", "c"]) - 1 / 3) < 1e-12
    assert wer(["a", "b"], []) == 1.0
    with pytest.raises(ContractError):
        wer([], ["a"])


@given(st.lists(st.sampled_from("abc"), max_size=6),
       st.lists(st.sampled_from("abc"), max_size=6))
@settings(max_examples=100, deadline=None)
def test_levenshtein_is_symmetric_and_bounded(a, b):
    d = levenshtein(a, b)
    assert d == levenshtein(b, a)
    assert d <= max(len(a), len(b))
    assert d >= abs(len(a) - len(b))
    assert (d == 0) == (a == b)


@given(st.lists(st.sampled_from("ab"), max_size=5),
       st.lists(st.sampled_from("ab"), max_size=5),
       st.lists(st.sampled_from("ab"), max_size=5))
@settings(max_examples=60, deadline=None)
def test_levenshtein_triangle_inequality(a, b, c):
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


def test_normalize_text():
    assert normalize_text("The  Quick\tfox") == ["the", "quick", "fox"]
    assert normalize_text("") == []


def test_corpus_wer_pools_lengths():
    refs = [["a"], ["b", "c", "d"]]
    hyps = [["x"], ["b", "c", "d"]]
    # One substitution over four reference words.
    assert abs(corpus_wer(refs, hyps) - 0.25) < 1e-12
    with pytest.raises(ContractError):
        corpus_wer([[], []], [[], []])
    with pytest.raises(ContractError):
        corpus_wer([["a"]], [])
