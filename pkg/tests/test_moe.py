"""Routing, expert dispatch, and the balance loss."""

import numpy as np
import pytest

from conftest import assert_grads_match
from moekit import tensor as T
from moekit.errors import ContractError
from moekit.moe import (DispatchResult, ExpertFFN, MoELayer, Router,
                        load_balance_loss, moe_forward, route,
                        router_param_count)


def make_layer(rng, d=6, f=8, n=3, weight_scale=3.0):
    """Random layer with a scaled-up router so argmax margins are wide."""
    router = Router(T.parameter(rng.normal(size=(d, n)) * weight_scale))
    experts = [ExpertFFN(T.parameter(rng.normal(size=(d, f)) * 0.3),
                         T.parameter(rng.normal(size=(f, d)) * 0.3))
               for _ in range(n)]
    return MoELayer(router, experts)


def test_route_known_values():
    x = T.constant([[1.0, 0.0]])
    router = Router(T.constant([[2.0, 0.0], [0.0, 1.0]]))
    d = route(router, x)
    # logits (2, 0): p0 = 1 / (1 + e^-2)
    assert np.allclose(d.probs.data, [[0.8807970779778823, 0.11920292202211755]],
                       atol=1e-6)
    assert d.assignment.tolist() == [0]
    assert abs(d.gate.data[0] - 0.8807970779778823) < 1e-6


def test_route_tie_breaks_to_lowest_index():
    x = T.constant([[1.0, 1.0]])
    router = Router(T.constant([[1.0, 0.0], [0.0, 1.0]]))  # logits (1, 1)
    assert route(router, x).assignment.tolist() == [0]


def test_route_shape_error():
    router = Router(T.constant(np.zeros((4, 2))))
    with pytest.raises(T.ShapeError):
        route(router, T.constant(np.zeros((3, 5))))


def test_gate_matches_probs_row():
    rng = np.random.default_rng(0)
    x = T.constant(rng.normal(size=(9, 6)))
    layer = make_layer(rng)
    d = route(layer.router, x)
    for i, j in enumerate(d.assignment):
        assert d.gate.data[i] == d.probs.data[i, j]


def test_balance_loss_known_value(f64):
    probs = T.constant(np.array([[0.80, 0.20],
                                 [0.75, 0.25],
                                 [0.75, 0.25],
                                 [0.30, 0.70]]))
    assignment = np.array([0, 0, 0, 1])
    d = DispatchResult(assignment=assignment,
                       gate=T.take_per_row(probs, assignment), probs=probs)
    # f = (3/4, 1/4), rho = (2.3/4, 0.7/4), so 2 * (0.75*0.575 + 0.25*0.175).
    assert abs(load_balance_loss([d], 2).item() - 0.95) < 1e-9


def test_balance_loss_uniform_and_collapse(f64):
    # Perfect balance with unit winning mass: f_j = rho_j = 1/N, so the
    # layer term is N * N * (1/N^2) = 1 exactly.
    t, n = 12, 4
    assign = np.arange(t) % n
    onehot = np.zeros((t, n))
    onehot[np.arange(t), assign] = 1.0
    balanced = T.constant(onehot)
    d = DispatchResult(assign, T.take_per_row(balanced, assign), balanced)
    assert abs(load_balance_loss([d], n).item() - 1.0) < 1e-12

    collapsed = np.zeros((t, n))
    collapsed[:, 2] = 1.0
    collapsed = T.constant(collapsed)
    assign = np.full(t, 2)
    d = DispatchResult(assign, T.take_per_row(collapsed, assign), collapsed)
    assert abs(load_balance_loss([d], n).item() - float(n)) < 1e-12
    # Two layers sum.
    assert abs(load_balance_loss([d, d], n).item() - 2.0 * n) < 1e-12


def test_balance_loss_invariant_under_expert_relabeling(f64):
    rng = np.random.default_rng(20)
    x = T.constant(rng.normal(size=(15, 6)))
    layer = make_layer(rng, n=4)
    base = load_balance_loss([route(layer.router, x)], 4).item()
    perm = np.array([3, 1, 0, 2])
    relabeled = Router(T.constant(layer.router.weight.data[:, perm].copy()))
    swapped = load_balance_loss([route(relabeled, x)], 4).item()
    assert abs(base - swapped) < 1e-6


def test_balance_loss_contract_errors():
    with pytest.raises(ContractError):
        load_balance_loss([], 2)
    probs = T.constant(np.full((2, 3), 1 / 3))
    d = DispatchResult(np.array([0, 1]), T.take_per_row(probs, np.array([0, 1])), probs)
    with pytest.raises(ContractError):
        load_balance_loss([d], 2)


def test_balance_loss_gradient_only_through_mass(f64):
    # Finite differences agree because f is locally constant in the weights
    # (assignments do not move under an h-sized nudge).
    rng = np.random.default_rng(5)
    x = T.constant(rng.normal(size=(10, 6)))
    layer = make_layer(rng)

    def loss():
        return load_balance_loss([route(layer.router, x)], layer.num_experts)

    assert_grads_match(loss, [layer.router.weight], tol=1e-4)


def test_each_token_runs_exactly_one_expert():
    rng = np.random.default_rng(1)
    x = T.constant(rng.normal(size=(17, 6)))
    layer = make_layer(rng)
    out, d = moe_forward(layer, x)
    assert out.shape == (17, 6)
    assert sum(e.tokens_processed for e in layer.experts) == 17
    counts = np.bincount(d.assignment, minlength=layer.num_experts)
    for j, e in enumerate(layer.experts):
        assert e.tokens_processed == counts[j]


def test_moe_output_is_gated_expert_output():
    rng = np.random.default_rng(2)
    x = T.constant(rng.normal(size=(8, 6)))
    layer = make_layer(rng)
    out, d = moe_forward(layer, x)
    for i in range(8):
        j = d.assignment[i]
        row = T.constant(x.data[i:i + 1])
        expect = layer.experts[j].forward(row).data[0] * d.gate.data[i]
        assert np.allclose(out.data[i], expect, atol=1e-5)


def test_expert_permutation_equivariance():
    # Relabeling experts (and router columns to match) permutes assignments
    # and leaves the layer output unchanged.
    rng = np.random.default_rng(3)
    x = T.constant(rng.normal(size=(11, 6)))
    layer = make_layer(rng)
    perm = np.array([2, 0, 1])
    router2 = Router(T.constant(layer.router.weight.data[:, perm].copy()))
    experts2 = [layer.experts[j] for j in perm]
    layer2 = MoELayer(router2, experts2)
    out1, d1 = moe_forward(layer, x)
    out2, d2 = moe_forward(layer2, x)
    assert np.allclose(out1.data, out2.data, atol=1e-6)
    inverse = np.argsort(perm)
    assert np.array_equal(inverse[d1.assignment], d2.assignment)


def test_scaling_logits_keeps_assignment_changes_gate():
    rng = np.random.default_rng(21)
    x = T.constant(rng.normal(size=(10, 6)))
    w = rng.normal(size=(6, 3))
    hot = route(Router(T.constant(w * 5.0)), x)
    cold = route(Router(T.constant(w * 0.2)), x)
    assert np.array_equal(hot.assignment, cold.assignment)
    assert not np.allclose(hot.gate.data, cold.gate.data)


def test_zeroed_expert_yields_zero_rows():
    # Router pushed hard toward expert 1, whose weights are all zero.
    router = Router(T.constant(np.array([[-3.0, 3.0]] * 4)))
    experts = [ExpertFFN(T.constant(np.ones((4, 6))), T.constant(np.ones((6, 4)))),
               ExpertFFN(T.constant(np.zeros((4, 6))), T.constant(np.zeros((6, 4))))]
    layer = MoELayer(router, experts)
    ones = T.constant(np.ones((5, 4)))
    out, d = moe_forward(layer, ones)
    assert np.all(d.assignment == 1)
    assert np.all(out.data == 0.0)


def test_identical_experts_make_assignment_irrelevant():
    rng = np.random.default_rng(23)
    w1 = rng.normal(size=(6, 8))
    w2 = rng.normal(size=(8, 6))
    experts = [ExpertFFN(T.constant(w1.copy()), T.constant(w2.copy()))
               for _ in range(2)]
    layer = MoELayer(Router(T.constant(rng.normal(size=(6, 2)))), experts)
    x = T.constant(rng.normal(size=(7, 6)))
    out, d = moe_forward(layer, x)
    reference = ExpertFFN(T.constant(w1), T.constant(w2)).forward(x).data
    assert np.allclose(out.data, reference * d.gate.data[:, None], atol=1e-6)


def test_detach_gate_cuts_router_gradient(f64):
    rng = np.random.default_rng(4)
    x = T.constant(rng.normal(size=(7, 6)))
    layer = make_layer(rng)
    w = T.constant(rng.normal(size=(7, 6)))

    with T.Tape():
        out, _ = moe_forward(layer, x, detach_gate=True)
        T.backward(T.reduce_sum(T.mul(out, w)))
    assert layer.router.weight.grad is None

    with T.Tape():
        out, _ = moe_forward(layer, x, detach_gate=False)
        T.backward(T.reduce_sum(T.mul(out, w)))
    assert layer.router.weight.grad is not None
    assert np.abs(layer.router.weight.grad).max() > 0


def test_moe_forward_gradients(f64):
    rng = np.random.default_rng(6)
    x = T.parameter(rng.normal(size=(9, 6)))
    layer = make_layer(rng)
    w = rng.normal(size=(9, 6))
    leaves = [x, layer.router.weight, layer.experts[0].w1, layer.experts[1].w2]

    def loss():
        out, _ = moe_forward(layer, x)
        return T.reduce_sum(T.mul(out, T.constant(w)))

    assert_grads_match(loss, leaves, tol=1e-4)


def test_shared_router_accumulates_both_layers(f64):
    # One Router object behind two layers must collect the sum of the
    # gradients that two independent per-layer copies would each receive.
    rng = np.random.default_rng(7)
    d, n = 6, 3
    x1 = T.constant(rng.normal(size=(8, d)))
    x2 = T.constant(rng.normal(size=(5, d)))
    wdata = rng.normal(size=(d, n)) * 3.0
    rng_exp = np.random.default_rng(8)
    e1w = [(rng_exp.normal(size=(d, 8)) * 0.3, rng_exp.normal(size=(8, d)) * 0.3)
           for _ in range(n)]
    e2w = [(rng_exp.normal(size=(d, 8)) * 0.3, rng_exp.normal(size=(8, d)) * 0.3)
           for _ in range(n)]
    mix1 = rng.normal(size=(8, d))
    mix2 = rng.normal(size=(5, d))

    def run(shared):
        routers = ([Router(T.parameter(wdata.copy()))] * 2 if shared else
                   [Router(T.parameter(wdata.copy())) for _ in range(2)])
        layers = []
        for r, ws in zip(routers, (e1w, e2w)):
            layers.append(MoELayer(r, [ExpertFFN(T.parameter(a.copy()), T.parameter(b.copy()))
                                       for a, b in ws]))
        with T.Tape():
            o1, _ = moe_forward(layers[0], x1)
            o2, _ = moe_forward(layers[1], x2)
            loss = T.add(T.reduce_sum(T.mul(o1, T.constant(mix1))),
                         T.reduce_sum(T.mul(o2, T.constant(mix2))))
            T.backward(loss)
        return [lay.router.weight.grad for lay in layers]

    shared_grads = run(shared=True)
    assert shared_grads[0] is shared_grads[1]
    untied = run(shared=False)
    assert np.allclose(shared_grads[0], untied[0] + untied[1], rtol=1e-9, atol=1e-12)


def test_perturb_replaces_assignments():
    rng = np.random.default_rng(9)
    x = T.constant(rng.normal(size=(40, 6)))
    layer = make_layer(rng)
    _, base = moe_forward(layer, x)
    _, same = moe_forward(layer, x, perturb=(0.0, np.random.default_rng(0), False))
    assert np.array_equal(base.assignment, same.assignment)
    _, flipped = moe_forward(layer, x,
                             perturb=(1.0, np.random.default_rng(0), True))
    assert np.all(flipped.assignment != base.assignment)
    assert np.all((flipped.assignment >= 0) & (flipped.assignment < layer.num_experts))
    for i, j in enumerate(flipped.assignment):
        assert flipped.gate.data[i] == flipped.probs.data[i, j]
    # Token counts follow the executed assignments.
    counts = np.bincount(flipped.assignment, minlength=layer.num_experts)
    for e in layer.experts:
        e.tokens_processed = 0
    moe_forward(layer, x, perturb=(1.0, np.random.default_rng(0), True))
    for j, e in enumerate(layer.experts):
        assert e.tokens_processed == counts[j]


def test_layer_construction_contracts():
    rng = np.random.default_rng(10)
    router = Router(T.constant(rng.normal(size=(6, 3))))
    good = [ExpertFFN(T.constant(rng.normal(size=(6, 8))),
                      T.constant(rng.normal(size=(8, 6)))) for _ in range(3)]
    with pytest.raises(ContractError):
        MoELayer(router, good[:2])
    with pytest.raises(ContractError):
        MoELayer(router, [])


def test_router_param_count():
    assert router_param_count("switch", 16, 512, 4) == 32768
    assert router_param_count("omni", 16, 512, 4) == 2048
    assert router_param_count("switch", 16, 512, 4) // router_param_count(
        "omni", 16, 512, 4) == 16
    with pytest.raises(ContractError):
        router_param_count("dense", 16, 512, 4)
