"""Routing diagnostics: route dumps, expert agreement across layers,
routing entropy, and the expert-permutation robustness probe.

All statistics work off :class:`RoutingRecord` rows, one per (utterance,
routed layer, stacked frame), produced either in-process by
:func:`dump_routes` or re-read from the CSV it writes; integer expert
assignments survive the round trip exactly, so file-based and in-process
pipelines agree bit-for-bit on every assignment-derived statistic.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

from moekit.ctc import corpus_wer, greedy_decode, normalize_text
from moekit.data import Tokenizer, Utterance
from moekit.encoder import Model
from moekit.errors import ContractError
from moekit.rng import named_rng


@dataclass
class RoutingRecord:
    utterance_id: str
    layer: int
    frame: int
    expert: int
    gate: float
    probs: np.ndarray


def dump_routes(model: Model, utterances: list[Utterance]) -> list[RoutingRecord]:
    """Evaluate the corpus and record every routing decision.

    Only real (unpadded) stacked frames appear. Dense models have nothing
    to dump and are rejected.
    """
    if not model.routed_blocks:
        raise ContractError("dense model has no routing to dump")
    records = []
    for u in utterances:
        _, dispatches = model.forward_utterance(u.features)
        for layer_pos, d in enumerate(dispatches):
            probs = d.probs.data
            gates = d.gate.data
            for t in range(d.num_tokens):
                records.append(RoutingRecord(
                    utterance_id=u.id, layer=layer_pos, frame=t,
                    expert=int(d.assignment[t]), gate=float(gates[t]),
                    probs=np.array(probs[t], dtype=np.float64)))
    return records


def frame_argmax_labels(model: Model, utterances: list[Utterance]) -> dict:
    """Greedy per-frame symbol id (blank included) keyed by (utterance, frame)."""
    labels = {}
    for u in utterances:
        logits, _ = model.forward_utterance(u.features)
        best = np.argmax(logits.data, axis=1)
        for t, b in enumerate(best):
            labels[(u.id, t)] = int(b)
    return labels


def write_routes_csv(records: list[RoutingRecord], path, probs_path=None) -> None:
    """Main CSV holds the integer assignment and gate; the optional sidecar
    stores the full probability rows."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["utterance_id", "layer", "frame", "expert", "gate"])
        for r in records:
            w.writerow([r.utterance_id, r.layer, r.frame, r.expert, repr(r.gate)])
    if probs_path is not None:
        n = len(records[0].probs) if records else 0
        with open(probs_path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["utterance_id", "layer", "frame"] + [f"p{j}" for j in range(n)])
            for r in records:
                w.writerow([r.utterance_id, r.layer, r.frame]
                           + [repr(float(p)) for p in r.probs])


def read_routes_csv(path, probs_path=None) -> list[RoutingRecord]:
    probs_by_key = {}
    if probs_path is not None:
        with open(probs_path, newline="", encoding="utf-8") as f:
            rdr = csv.reader(f)
            header = next(rdr)
            n = len(header) - 3
            for row in rdr:
                probs_by_key[(row[0], int(row[1]), int(row[2]))] = np.array(
                    [float(x) for x in row[3:3 + n]])
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        rdr = csv.reader(f)
        header = next(rdr)
        if header[:5] != ["utterance_id", "layer", "frame", "expert", "gate"]:
            raise ContractError(f"unrecognized routes CSV header: {header}")
        for row in rdr:
            key = (row[0], int(row[1]), int(row[2]))
            records.append(RoutingRecord(
                utterance_id=key[0], layer=key[1], frame=key[2],
                expert=int(row[3]), gate=float(row[4]),
                probs=probs_by_key.get(key, np.zeros(0))))
    return records


# ---------------------------------------------------------------------------
# Contingency and Cramer's V
# ---------------------------------------------------------------------------


@dataclass
class ContingencyTable:
    """counts[a][b] = frames routed to expert a at the lower layer and
    expert b at the upper layer of the pair."""

    counts: np.ndarray
    layer_pair: tuple[int, int]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def num_experts_of(records: list[RoutingRecord]) -> int:
    experts = max(r.expert for r in records) + 1
    probed = max((len(r.probs) for r in records), default=0)
    return max(experts, probed)


def contingency(records: list[RoutingRecord], lower_layer: int,
                num_experts: int | None = None) -> ContingencyTable:
    """Cross-tabulate assignments of adjacent layers (lower_layer, lower_layer + 1)."""
    if num_experts is None:
        num_experts = num_experts_of(records)
    lower = {}
    upper = {}
    for r in records:
        if r.layer == lower_layer:
            lower[(r.utterance_id, r.frame)] = r.expert
        elif r.layer == lower_layer + 1:
            upper[(r.utterance_id, r.frame)] = r.expert
    if not lower or not upper:
        raise ContractError(
            f"no records for layer pair ({lower_layer}, {lower_layer + 1})")
    counts = np.zeros((num_experts, num_experts), dtype=np.int64)
    for key, a in lower.items():
        if key in upper:
            counts[a, upper[key]] += 1
    return ContingencyTable(counts=counts, layer_pair=(lower_layer, lower_layer + 1))


def chi_square(counts: np.ndarray) -> float:
    """Pearson chi-square against independence, on non-empty rows/columns."""
    counts = np.asarray(counts, dtype=np.float64)
    counts = counts[counts.sum(axis=1) > 0][:, counts.sum(axis=0) > 0]
    n = counts.sum()
    if n <= 0:
        raise ContractError("chi_square: empty table")
    expected = np.outer(counts.sum(axis=1), counts.sum(axis=0)) / n
    return float(((counts - expected) ** 2 / expected).sum())


def cramers_v(table) -> float:
    """Cramer's V = sqrt(chi2 / (n * (k - 1))), k = min(non-empty rows, cols).

    A table with a single non-empty row or column carries no association
    and scores exactly 0.
    """
    counts = np.asarray(table.counts if isinstance(table, ContingencyTable) else table)
    if counts.ndim != 2:
        raise ContractError(f"cramers_v expects a 2-D table, got shape {counts.shape}")
    n = counts.sum()
    if n <= 0:
        raise ContractError("cramers_v: table total is zero")
    rows = int((counts.sum(axis=1) > 0).sum())
    cols = int((counts.sum(axis=0) > 0).sum())
    k = min(rows, cols)
    if k <= 1:
        return 0.0
    v = math.sqrt(chi_square(counts) / (float(n) * (k - 1)))
    return min(v, 1.0)


def adjacent_cramers_v(records: list[RoutingRecord], num_layers: int,
                       num_experts: int | None = None) -> list[tuple[tuple[int, int], float]]:
    """Cramer's V for every adjacent routed-layer pair."""
    out = []
    for l in range(num_layers - 1):
        table = contingency(records, l, num_experts)
        out.append((table.layer_pair, cramers_v(table)))
    return out


# ---------------------------------------------------------------------------
# Label alignment across layers
# ---------------------------------------------------------------------------


def _pair_alignment(counts: np.ndarray) -> np.ndarray:
    """Map each upper-layer expert to the lower-layer expert it co-fires
    with most, as a bijection maximizing the matched count (assignment
    problem, solved exactly)."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise ContractError(f"alignment needs a square table, got {counts.shape}")
    rows, cols = linear_sum_assignment(counts, maximize=True)
    mapping = np.empty(counts.shape[0], dtype=np.int64)
    mapping[cols] = rows
    return mapping


def exhaustive_pair_alignment(counts: np.ndarray) -> np.ndarray:
    """Brute-force reference for small N: same contract as _pair_alignment."""
    counts = np.asarray(counts, dtype=np.int64)
    n = counts.shape[0]
    best, best_map = -1, None
    for perm in permutations(range(n)):
        score = sum(counts[perm[b], b] for b in range(n))
        if score > best:
            best = score
            best_map = np.array(perm, dtype=np.int64)
    return best_map


def align_labels(tables: list[ContingencyTable]) -> list[np.ndarray]:
    """Per-layer display relabelings that chain every layer back to layer 0.

    tables[i] must cross-tabulate layers (i, i + 1). Returns one
    permutation per layer: element e of layer l's array is the display
    label of raw expert e. Layer 0 keeps identity. Only presentation
    changes; every statistic computed on raw assignments is unaffected.
    """
    if not tables:
        raise ContractError("align_labels needs at least one table")
    n = tables[0].counts.shape[0]
    perms = [np.arange(n, dtype=np.int64)]
    for i, t in enumerate(tables):
        if t.layer_pair != (i, i + 1):
            raise ContractError(
                f"tables must cover adjacent pairs in order; got {t.layer_pair} at index {i}")
        if t.counts.shape != (n, n):
            raise ContractError(
                f"inconsistent table size {t.counts.shape} (expected {(n, n)})")
        mapping = _pair_alignment(t.counts)
        perms.append(perms[-1][mapping])
    return perms


def usage_map(records: list[RoutingRecord], alignments: list[np.ndarray]) -> dict:
    """Per-utterance [layers x frames] grid of aligned display labels."""
    by_utt: dict[str, dict] = {}
    for r in records:
        cell = by_utt.setdefault(r.utterance_id, {})
        cell[(r.layer, r.frame)] = int(alignments[r.layer][r.expert])
    out = {}
    for uid, cells in by_utt.items():
        layers = max(k[0] for k in cells) + 1
        frames = max(k[1] for k in cells) + 1
        grid = [[cells[(l, t)] for t in range(frames)] for l in range(layers)]
        out[uid] = grid
    return out


# ---------------------------------------------------------------------------
# Routing entropy by decoded symbol
# ---------------------------------------------------------------------------


@dataclass
class EntropyReport:
    """entropy[(symbol, layer)] in bits; groups holds per-symbol frame
    counts; skipped counts (symbol, layer) cells with no frames."""

    entropy: dict
    groups: dict
    skipped: int


def routing_entropy(records: list[RoutingRecord], frame_labels: dict,
                    top_k: int = 100, use_probabilities: bool = False) -> EntropyReport:
    """Base-2 entropy of expert choice per (frequent symbol, layer).

    Frames are grouped by their greedy-decoded frame-level symbol
    (``frame_labels``, blanks included); the top_k most frequent symbols
    are kept (at most the number of distinct symbols). By default the
    entropy is that of the empirical assignment distribution; with
    ``use_probabilities`` the group's mean routing distribution is used
    instead.
    """
    n_experts = num_experts_of(records)
    freq: dict[int, int] = {}
    for (uid, frame), sym in frame_labels.items():
        freq[sym] = freq.get(sym, 0) + 1
    keep = sorted(freq, key=lambda s: (-freq[s], s))[: min(top_k, len(freq))]
    keep_set = set(keep)
    layers = sorted({r.layer for r in records})
    acc: dict = {}
    for r in records:
        sym = frame_labels.get((r.utterance_id, r.frame))
        if sym is None or sym not in keep_set:
            continue
        slot = acc.setdefault((sym, r.layer), [np.zeros(n_experts), 0])
        if use_probabilities:
            slot[0] += r.probs
        else:
            slot[0][r.expert] += 1.0
        slot[1] += 1
    entropy = {}
    skipped = 0
    for sym in keep:
        for layer in layers:
            slot = acc.get((sym, layer))
            if slot is None or slot[1] == 0:
                skipped += 1
                continue
            dist = slot[0] / slot[0].sum()
            nz = dist[dist > 0]
            entropy[(sym, layer)] = float(-(nz * np.log2(nz)).sum())
    return EntropyReport(entropy=entropy,
                         groups={s: freq[s] for s in keep},
                         skipped=skipped)


# ---------------------------------------------------------------------------
# Expert-permutation robustness probe
# ---------------------------------------------------------------------------


def permutation_experiment(model: Model, utterances: list[Utterance],
                           tokenizer: Tokenizer, p_values, trials: int = 5,
                           seed: int = 0, exclude_original: bool = False) -> list[dict]:
    """Randomly re-route tokens with probability p and measure WER damage.

    For each p, every trial re-decodes the corpus with each token's routed
    expert replaced, with probability p, by a uniform draw over the
    experts (optionally excluding the original); the substitute's routed
    probability becomes the gate. Reports the mean relative WER change in
    percent against the unperturbed decode; if the baseline WER is zero
    the absolute WER is reported instead and flagged.

    p = 0 is a pure pass-through and scores exactly 0.
    """
    if not model.routed_blocks:
        raise ContractError("dense model has no routing to perturb")
    refs = [normalize_text(u.transcript) for u in utterances]

    def decode_corpus(perturb):
        hyps = []
        for u in utterances:
            logits, _ = model.forward_utterance(u.features, perturb=perturb)
            hyps.append(normalize_text(tokenizer.detokenize(greedy_decode(logits))))
        return hyps

    base_hyps = decode_corpus(None)
    base_wer = corpus_wer(refs, base_hyps)
    absolute = base_wer == 0.0
    rows = []
    for p_idx, p in enumerate(p_values):
        p = float(p)
        if not (0.0 <= p <= 1.0):
            raise ContractError(f"perturbation probability must be in [0, 1], got {p}")
        if p == 0.0:
            rows.append({"p": 0.0, "baseline_wer": base_wer, "mean_change": 0.0,
                         "absolute": absolute})
            continue
        changes = []
        for trial in range(trials):
            rng = named_rng(seed, "permute", trial, p_idx)
            w = corpus_wer(refs, decode_corpus((p, rng, exclude_original)))
            if absolute:
                changes.append(w)
            else:
                changes.append(100.0 * (w - base_wer) / base_wer)
        rows.append({"p": p, "baseline_wer": base_wer,
                     "mean_change": sum(changes) / len(changes),
                     "absolute": absolute})
    return rows


def write_analysis_csv(rows: list[dict], fieldnames: list[str], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in fieldnames})


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
