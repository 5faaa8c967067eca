"""Top-1 token routing, expert feed-forward blocks, and the balance loss.

A router is a single bias-free linear map from token features to expert
logits; softmax over the expert axis gives routing probabilities and the
argmax picks the one expert that runs each token. The chosen expert's
output is scaled by its routing probability (the gate), at training and
inference alike, which is the only path through which the router receives
gradient from the task loss.

The auxiliary balance loss follows the usual recipe: with f_j the fraction
of tokens whose argmax lands on expert j (a constant) and rho_j the mean
routed probability mass collected by expert j over the tokens it won
(differentiable), a layer contributes N * sum_j f_j * rho_j. Uniform
routing gives exactly 1.0; full collapse onto one expert gives N.

There is no capacity limit and no token dropping: every token always runs
through exactly one expert.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from moekit import tensor as T
from moekit.errors import ContractError
from moekit.tensor import Tensor


@dataclass
class DispatchResult:
    """Routing outcome for the T tokens of one layer pass.

    assignment : int array [T], chosen expert per token
    gate       : Tensor [T], routed probability of the chosen expert
    probs      : Tensor [T x N], full routing distribution per token
    """

    assignment: np.ndarray
    gate: Tensor
    probs: Tensor

    @property
    def num_tokens(self) -> int:
        return int(self.assignment.shape[0])

    @property
    def num_experts(self) -> int:
        return int(self.probs.shape[1])


class Router:
    """Bias-free linear routing map, weight [D x N]."""

    def __init__(self, weight: Tensor):
        if weight.ndim != 2:
            raise T.ShapeError(f"router weight must be 2-D, got {weight.shape}")
        self.weight = weight

    @property
    def num_experts(self) -> int:
        return int(self.weight.shape[1])


class ExpertFFN:
    """Two-layer feed-forward block with gelu, bias-free: W2 . gelu(x W1).

    Also serves as the dense variant's feed-forward sublayer.
    ``tokens_processed`` counts rows pushed through ``forward`` so tests can
    verify that a routed layer evaluates each token exactly once.
    """

    def __init__(self, w1: Tensor, w2: Tensor):
        self.w1 = w1
        self.w2 = w2
        self.tokens_processed = 0

    def forward(self, x: Tensor) -> Tensor:
        self.tokens_processed += int(x.shape[0])
        return T.matmul(T.gelu(T.matmul(x, self.w1)), self.w2)


def route(router: Router, x: Tensor) -> DispatchResult:
    """Assign each row of x [T x D] to one of N experts.

    Probabilities come from a softmax over expert logits x @ W. The argmax
    itself is taken over logits recomputed in float64 so the decision does
    not depend on the build's working precision; ties break toward the
    lowest expert index. gate[i] equals probs[i, assignment[i]].
    """
    if x.ndim != 2 or x.shape[1] != router.weight.shape[0]:
        raise T.ShapeError(f"route: tokens {x.shape} incompatible with router {router.weight.shape}")
    logits = T.matmul(x, router.weight)
    probs = T.softmax(logits)
    hp = x.data.astype(np.float64) @ router.weight.data.astype(np.float64)
    assignment = np.argmax(hp, axis=1)
    gate = T.take_per_row(probs, assignment)
    return DispatchResult(assignment=assignment, gate=gate, probs=probs)


class MoELayer:
    """N experts behind one top-1 router.

    For the shared-router variant the same Router object (hence the same
    weight tensor and gradient accumulator) is handed to every layer.
    """

    def __init__(self, router: Router, experts: list[ExpertFFN]):
        if len(experts) < 1:
            raise ContractError("MoELayer needs at least one expert")
        if router.num_experts != len(experts):
            raise ContractError(
                f"router predicts {router.num_experts} experts but layer has {len(experts)}")
        self.router = router
        self.experts = experts

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def forward(self, x: Tensor, perturb=None, detach_gate: bool = False):
        return moe_forward(self, x, perturb=perturb, detach_gate=detach_gate)


def moe_forward(layer: MoELayer, x: Tensor, perturb=None, detach_gate: bool = False):
    """Route tokens, run each through its expert, scale by the gate.

    perturb, when given, is a (p, rng, exclude_original) triple used by the
    permutation robustness probe: each token's routed expert is replaced
    with probability p by a random draw over the N experts, and the gate is
    re-read as the substituted expert's routed probability. The returned
    DispatchResult reflects the assignments actually executed.

    detach_gate is a diagnostic switch that stops gradient at the gate
    factor; with it set, the router receives no gradient from this op.

    Returns (output Tensor [T x D], DispatchResult).
    """
    d = route(layer.router, x)
    assignment = d.assignment
    if perturb is not None:
        p, rng, exclude_original = perturb
        n = layer.num_experts
        tokens = assignment.shape[0]
        if p > 0.0:
            hit = rng.random(tokens) < p
            if exclude_original:
                draws = (assignment + rng.integers(1, n, size=tokens)) % n
            else:
                draws = rng.integers(0, n, size=tokens)
            assignment = np.where(hit, draws, assignment)
            d = DispatchResult(assignment=assignment,
                               gate=T.take_per_row(d.probs, assignment),
                               probs=d.probs)
    tokens = assignment.shape[0]
    out = None
    for j, expert in enumerate(layer.experts):
        idx = np.flatnonzero(assignment == j)
        if idx.size == 0:
            continue
        y = expert.forward(T.gather_rows(x, idx))
        placed = T.scatter_add_rows(y, idx, tokens)
        out = placed if out is None else T.add(out, placed)
    gate = d.gate.detach() if detach_gate else d.gate
    out = T.scale_rows(out, gate)
    return out, d


def load_balance_loss(dispatches: list[DispatchResult], num_experts: int) -> Tensor:
    """Sum of per-layer balance terms N * sum_j f_j * rho_j.

    f_j is the argmax-count fraction (constant); rho_j averages, over all T
    tokens, the routed probability of expert j restricted to the tokens
    whose argmax chose j. Gradient flows only through rho.
    """
    if not dispatches:
        raise ContractError("load_balance_loss needs at least one dispatch")
    total = None
    for d in dispatches:
        t = d.num_tokens
        if t == 0:
            raise ContractError("load_balance_loss: dispatch with zero tokens")
        if d.num_experts != num_experts:
            raise ContractError(
                f"load_balance_loss: dispatch has {d.num_experts} experts, expected {num_experts}")
        counts = np.bincount(d.assignment, minlength=num_experts)
        f = counts.astype(d.probs.data.dtype) / t
        onehot = np.zeros((t, num_experts), dtype=d.probs.data.dtype)
        onehot[np.arange(t), d.assignment] = 1.0
        winning = T.mul(d.probs, T.constant(onehot, dtype=d.probs.data.dtype))
        rho = T.scale(T.reduce_sum(winning, axis=0), 1.0 / t)
        term = T.scale(T.reduce_sum(T.mul(rho, T.constant(f, dtype=d.probs.data.dtype))),
                       float(num_experts))
        total = term if total is None else T.add(total, term)
    return total


def router_param_count(variant: str, layers: int, embed_dim: int, experts: int) -> int:
    """Router parameters: per-layer routing pays layers * D * N, shared pays D * N."""
    if variant == "switch":
        return layers * embed_dim * experts
    if variant == "omni":
        return embed_dim * experts
    if variant == "dense":
        raise ContractError("dense models have no router")
    raise ContractError(f"unknown variant {variant!r}")
