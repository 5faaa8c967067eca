"""CTC loss, greedy decoding, and word error rate.

The loss marginalizes over all frame-level alignments of the target via
the standard forward recursion on the extended label sequence
(blank, y1, blank, y2, ..., blank). Everything runs in log space with
log-sum-exp, so long utterances cannot underflow. Blank id is 0.

The backward rule uses the forward/backward posteriors: with alpha_t(s)
including the frame-t emission and beta_t(s) covering emissions strictly
after t, d(-log P)/d log_probs[t, k] = -sum over lattice states s with
label k of exp(alpha_t(s) + beta_t(s) - log P). The DP runs in float64
regardless of build precision; the emitted gradient is cast back to the
input dtype.
"""

from __future__ import annotations

import numpy as np

from moekit import tensor as T
from moekit.errors import ContractError
from moekit.tensor import Tensor

BLANK = 0

NEG_INF = -np.inf


class InfeasibleTargetError(ValueError):
    """The target cannot be emitted in the given number of frames."""


def min_frames_for(targets) -> int:
    """Fewest frames that can emit `targets`: one per token plus a
    mandatory blank between equal consecutive tokens."""
    targets = list(targets)
    repeats = sum(1 for i in range(1, len(targets)) if targets[i] == targets[i - 1])
    return len(targets) + repeats


def _extended(targets) -> np.ndarray:
    ext = np.zeros(2 * len(targets) + 1, dtype=np.int64)
    ext[1::2] = targets
    return ext


def ctc_loss(log_probs: Tensor, targets) -> Tensor:
    """Negative log probability of `targets` under per-frame log_probs [T x V].

    targets are token ids in [1, V-1]; an empty target is permitted and
    scores the all-blank path. Raises InfeasibleTargetError when T is too
    short to emit the target at all (rather than returning infinity).
    """
    lp = log_probs if isinstance(log_probs, Tensor) else T.constant(log_probs)
    if lp.ndim != 2:
        raise T.ShapeError(f"ctc_loss expects [T x V] log-probs, got {lp.shape}")
    frames, vocab = lp.shape
    targets = [int(t) for t in targets]
    for tok in targets:
        if not (1 <= tok < vocab):
            raise ContractError(f"target token {tok} outside [1, {vocab - 1}] (0 is the blank)")
    need = min_frames_for(targets)
    if frames < need:
        raise InfeasibleTargetError(
            f"target of length {len(targets)} needs at least {need} frames, got {frames}")

    ext = _extended(targets)
    s_len = ext.shape[0]
    lpd = lp.data.astype(np.float64)
    emit = lpd[:, ext]  # [T x S] emission log-prob of each lattice state

    # A state may skip its s-2 predecessor when it is a label differing
    # from the label two back (the skip never crosses a repeated label).
    allow_skip = np.zeros(s_len, dtype=bool)
    if s_len > 2:
        allow_skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    alpha = np.full((frames, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, frames):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev[:-1]))[:s_len]
        acc = np.logaddexp(stay, step)
        skip = np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))[:s_len]
        acc = np.where(allow_skip, np.logaddexp(acc, skip), acc)
        alpha[t] = acc + emit[t]

    if s_len > 1:
        log_p = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        log_p = alpha[-1, -1]

    out = Tensor._wrap(np.asarray(-log_p, dtype=lp.data.dtype), False)

    def rule(g):
        if not lp.requires_grad:
            return
        beta = np.full((frames, s_len), NEG_INF)
        beta[-1, -1] = 0.0
        if s_len > 1:
            beta[-1, -2] = 0.0
        can_skip_to = np.concatenate((allow_skip[2:], [False, False]))[:s_len]
        for t in range(frames - 2, -1, -1):
            nxt = beta[t + 1] + emit[t + 1]
            stay = nxt
            step = np.concatenate((nxt[1:], [NEG_INF]))[:s_len]
            acc = np.logaddexp(stay, step)
            skip = np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))[:s_len]
            acc = np.where(can_skip_to, np.logaddexp(acc, skip), acc)
            beta[t] = acc
        post = np.exp(alpha + beta - log_p)  # [T x S], rows sum to 1
        grad = np.zeros_like(lpd)
        for t in range(frames):
            np.add.at(grad[t], ext, -post[t])
        _accum_scaled(lp, grad, g)

    return T._record((lp,), out, rule)


def _accum_scaled(lp: Tensor, grad: np.ndarray, g: np.ndarray) -> None:
    T._accum(lp, (grad * float(g)).astype(lp.data.dtype))


def ctc_loss_batch(log_probs_list, targets_list) -> Tensor:
    """Mean CTC loss over a batch of utterances."""
    if len(log_probs_list) != len(targets_list):
        raise ContractError(
            f"{len(log_probs_list)} utterances but {len(targets_list)} target sequences")
    if not log_probs_list:
        raise ContractError("ctc_loss_batch needs at least one utterance")
    total = None
    for lp, tgt in zip(log_probs_list, targets_list):
        loss = ctc_loss(lp, tgt)
        total = loss if total is None else T.add(total, loss)
    return T.scale(total, 1.0 / len(log_probs_list))


def greedy_decode(log_probs) -> list[int]:
    """Per-frame argmax, collapse repeats, strip blanks."""
    data = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    if data.ndim != 2:
        raise T.ShapeError(f"greedy_decode expects [T x V], got {data.shape}")
    best = np.argmax(data, axis=1)
    out = []
    prev = -1
    for b in best:
        if b != prev and b != BLANK:
            out.append(int(b))
        prev = b
    return out


def levenshtein(a, b) -> int:
    """Edit distance with unit insert/delete/substitute costs."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def wer(reference_words, hypothesis_words) -> float:
    """Word error rate: edit distance / reference length."""
    ref = list(reference_words)
    if not ref:
        raise ContractError("wer: empty reference")
    return levenshtein(ref, list(hypothesis_words)) / len(ref)


def normalize_text(text: str) -> list[str]:
    """Lowercase and split on whitespace; the only normalization applied."""
    return text.lower().split()


def corpus_wer(references, hypotheses) -> float:
    """Pooled word error rate: total edit distance / total reference words."""
    refs = [list(r) for r in references]
    hyps = [list(h) for h in hypotheses]
    if len(refs) != len(hyps):
        raise ContractError(f"{len(refs)} references but {len(hyps)} hypotheses")
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise ContractError("corpus_wer: no reference words")
    dist = sum(levenshtein(r, h) for r, h in zip(refs, hyps))
    return dist / total_ref
