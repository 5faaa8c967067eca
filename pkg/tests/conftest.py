"""Shared fixtures and the finite-difference gradient oracle."""

import numpy as np
import pytest

from moekit import tensor as T


@pytest.fixture
def f64():
    """Run the engine in float64 for the duration of a test."""
    with T.precision("float64"):
        yield


def numeric_gradients(make_loss, leaves, h=1e-5):
    """Central-difference gradients of make_loss() w.r.t. each leaf tensor.

    make_loss must rebuild its forward pass from the leaves on every call;
    it is invoked with perturbed leaf data and no tape.
    """
    grads = []
    for p in leaves:
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        out = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = make_loss().item()
            flat[i] = orig - h
            lo = make_loss().item()
            flat[i] = orig
            out[i] = (hi - lo) / (2.0 * h)
        grads.append(num)
    return grads


def analytic_gradients(make_loss, leaves):
    for p in leaves:
        p.zero_grad()
    with T.Tape():
        loss = make_loss()
        T.backward(loss)
    return [p.grad.copy() for p in leaves]


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Elementwise |a-b| / max(1, |b|), reduced to the worst entry."""
    denom = np.maximum(1.0, np.abs(b))
    return float((np.abs(a - b) / denom).max())


def assert_grads_match(make_loss, leaves, tol=1e-5, h=1e-5):
    analytic = analytic_gradients(make_loss, leaves)
    numeric = numeric_gradients(make_loss, leaves, h=h)
    for p, a, n in zip(leaves, analytic, numeric):
        err = max_rel_err(a, n)
        assert err < tol, f"gradient mismatch on shape {tuple(p.shape)}: rel err {err:.3g}"
