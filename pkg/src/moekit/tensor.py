"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine covering exactly what the encoder stack needs:
2-D matrix multiply, row-wise softmax / log-softmax / layer norm, an
elementwise suite, and gather/scatter over rows. Forward passes record
backward rules onto an explicit :class:`Tape`; ``backward(loss)`` replays
the tape in reverse, visiting each recorded node once and accumulating
gradients into ``Tensor.grad``.

Arrays are float32 by default. Tests that compare against finite
differences switch the engine to float64 via :func:`set_default_dtype` or
the :func:`precision` context manager before building their graphs.

No implicit broadcasting is performed anywhere except the documented
bias-add over rows (``add_bias``) and the row-scaling op ``scale_rows``;
every other binary op requires exact shape agreement and raises
:class:`ShapeError` naming both shapes otherwise.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from moekit.errors import ContractError

LN_EPS = 1e-5

# Stand-in for minus infinity in masked attention logits. Finite so that
# the softmax input check stays strict, yet small enough that
# exp(NEG_FILL - max) underflows to exactly zero in both float modes.
NEG_FILL = -1e30

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32


def set_default_dtype(name: str) -> None:
    """Select the dtype new tensors are created with ("float32"/"float64")."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}; choose from {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype():
    return _default_dtype


@contextmanager
def precision(name: str):
    """Temporarily switch the default dtype (used by gradient-check tests)."""
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = prev


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """Non-finite values reached an operation that requires finite input."""


class Tensor:
    """n-dimensional array plus gradient bookkeeping.

    ``requires_grad`` marks leaves (parameters) and tensors derived from
    them while a tape is active. ``grad`` is populated by ``backward`` and
    accumulates across calls until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @staticmethod
    def _wrap(arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Same values, cut off from the tape."""
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    # Operator sugar; the named functions below do the work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data, dtype=None) -> Tensor:
    """Tensor that never takes gradient (inputs, masks, lookup tables)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    """Leaf tensor that accumulates gradient."""
    return Tensor(data, requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_active_tape = None


class Tape:
    """Per-forward-pass record of operations, replayed in reverse by backward.

    Use as a context manager around a forward pass::

        with Tape() as tape:
            loss = model_forward(...)
            backward(loss)

    Outside any tape, operations run in evaluation mode: nothing is
    recorded and results never require gradient.
    """

    def __init__(self):
        self._entries = []  # (output Tensor, rule(grad_of_output) -> None)

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise ContractError("a Tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def record(self, out: Tensor, rule) -> None:
        self._entries.append((out, rule))

    def __len__(self):
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and propagate to every leaf on the tape."""
        if loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
        if not loss.requires_grad:
            raise ContractError("loss is not connected to any parameter on this tape")
        _accum(loss, np.ones_like(loss.data))
        for out, rule in reversed(self._entries):
            if out.grad is not None:
                rule(out.grad)


def active_tape():
    return _active_tape


def backward(loss: Tensor) -> None:
    """Reverse pass on the currently active tape."""
    if _active_tape is None:
        raise ContractError("backward called with no active tape")
    _active_tape.backward(loss)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _record(inputs, out: Tensor, rule) -> Tensor:
    """Mark `out` differentiable and push the rule if a tape is recording."""
    if _active_tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active_tape.record(out, rule)
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product a @ b."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = Tensor._wrap(a.data @ b.data, False)

    def rule(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _record((a, b), out, rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data + b.data, False)

    def rule(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _record((a, b), out, rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data - b.data, False)

    def rule(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _record((a, b), out, rule)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Row-broadcast bias add: out[i, :] = x[i, :] + bias.

    This is the one sanctioned broadcast in the engine.
    """
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.ndim != 2 or bias.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias expects [T x D] and [D], got {x.shape} and {bias.shape}")
    out = Tensor._wrap(x.data + bias.data[None, :], False)

    def rule(g):
        if x.requires_grad:
            _accum(x, g)
        if bias.requires_grad:
            _accum(bias, g.sum(axis=0))

    return _record((x, bias), out, rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data * b.data, False)

    def rule(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _record((a, b), out, rule)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    x = _as_tensor(x)
    c = float(c)
    out = Tensor._wrap(x.data * c, False)

    def rule(g):
        if x.requires_grad:
            _accum(x, g * c)

    return _record((x,), out, rule)


def scale_rows(x: Tensor, v: Tensor) -> Tensor:
    """out[i, :] = v[i] * x[i, :] for x [T x D], v [T]."""
    x, v = _as_tensor(x), _as_tensor(v)
    if x.ndim != 2 or v.ndim != 1 or x.shape[0] != v.shape[0]:
        raise ShapeError(f"scale_rows expects [T x D] and [T], got {x.shape} and {v.shape}")
    out = Tensor._wrap(x.data * v.data[:, None], False)

    def rule(g):
        if x.requires_grad:
            _accum(x, g * v.data[:, None])
        if v.requires_grad:
            _accum(v, (g * x.data).sum(axis=1))

    return _record((x, v), out, rule)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    out = Tensor._wrap(x.data * cdf, False)

    def rule(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
            _accum(x, g * (cdf + x.data * pdf))

    return _record((x,), out, rule)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError("log requires strictly positive input")
    out = Tensor._wrap(np.log(x.data), False)

    def rule(g):
        if x.requires_grad:
            _accum(x, g / x.data)

    return _record((x,), out, rule)


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor._wrap(np.exp(x.data), False)

    def rule(g):
        if x.requires_grad:
            _accum(x, g * out.data)

    return _record((x,), out, rule)


def _check_row_index(idx: np.ndarray, n_rows: int, op: str) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"{op} needs a 1-D integer index, got shape {idx.shape} dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        bad = idx[(idx < 0) | (idx >= n_rows)][0]
        raise IndexError(f"{op}: index {bad} out of range for {n_rows} rows")
    return idx


def gather_rows(x: Tensor, idx) -> Tensor:
    """out[k, :] = x[idx[k], :]. Adjoint scatter-adds duplicates."""
    x = _as_tensor(x)
    idx = _check_row_index(idx, x.shape[0], "gather_rows")
    out = Tensor._wrap(x.data[idx], False)

    def rule(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            np.add.at(buf, idx, g)
            _accum(x, buf)

    return _record((x,), out, rule)


def scatter_add_rows(src: Tensor, idx, num_rows: int) -> Tensor:
    """out[idx[k], :] += src[k, :] into a fresh [num_rows x D] zero tensor."""
    src = _as_tensor(src)
    idx = _check_row_index(idx, num_rows, "scatter_add_rows")
    if idx.shape[0] != src.shape[0]:
        raise ShapeError(f"scatter_add_rows: {src.shape[0]} rows but {idx.shape[0]} indices")
    buf = np.zeros((num_rows,) + src.data.shape[1:], dtype=src.data.dtype)
    np.add.at(buf, idx, src.data)
    out = Tensor._wrap(buf, False)

    def rule(g):
        if src.requires_grad:
            _accum(src, g[idx])

    return _record((src,), out, rule)


def take_per_row(x: Tensor, idx) -> Tensor:
    """out[i] = x[i, idx[i]] for x [T x N]; picks one column per row."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"take_per_row needs a 2-D tensor, got {x.shape}")
    idx = _check_row_index(idx, x.shape[1], "take_per_row")
    if idx.shape[0] != x.shape[0]:
        raise ShapeError(f"take_per_row: {x.shape[0]} rows but {idx.shape[0]} indices")
    rows = np.arange(x.shape[0])
    out = Tensor._wrap(x.data[rows, idx], False)

    def rule(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[rows, idx] = g
            _accum(x, buf)

    return _record((x,), out, rule)


def mask_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where mask is True by `value`; no gradient flows there."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"mask_fill shape mismatch: {x.shape} vs mask {mask.shape}")
    out = Tensor._wrap(np.where(mask, np.asarray(value, dtype=x.data.dtype), x.data), False)

    def rule(g):
        if x.requires_grad:
            _accum(x, np.where(mask, 0.0, g))

    return _record((x,), out, rule)


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {x.shape}")
    out = Tensor._wrap(np.ascontiguousarray(x.data.T), False)

    def rule(g):
        if x.requires_grad:
            _accum(x, g.T)

    return _record((x,), out, rule)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out = Tensor._wrap(x.data.reshape(shape), False)

    def rule(g):
        if x.requires_grad:
            _accum(x, g.reshape(x.data.shape))

    return _record((x,), out, rule)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-D tensor."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"slice_cols needs a 2-D tensor, got {x.shape}")
    if not (0 <= start < stop <= x.shape[1]):
        raise IndexError(f"slice_cols [{start}:{stop}] out of range for width {x.shape[1]}")
    out = Tensor._wrap(np.ascontiguousarray(x.data[:, start:stop]), False)

    def rule(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[:, start:stop] = g
            _accum(x, buf)

    return _record((x,), out, rule)


def concat_cols(parts) -> Tensor:
    """Concatenate 2-D tensors along columns."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_cols needs at least one tensor")
    rows = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(f"concat_cols row mismatch: {[tuple(q.shape) for q in parts]}")
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=1), False)
    widths = [p.shape[1] for p in parts]

    def rule(g):
        offset = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                _accum(p, g[:, offset:offset + w])
            offset += w

    return _record(parts, out, rule)


def concat_rows(parts) -> Tensor:
    """Concatenate tensors of equal trailing shape along axis 0."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows needs at least one tensor")
    trail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != trail:
            raise ShapeError(f"concat_rows trailing-shape mismatch: {[tuple(q.shape) for q in parts]}")
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=0), False)
    sizes = [p.shape[0] for p in parts]

    def rule(g):
        offset = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                _accum(p, g[offset:offset + n])
            offset += n

    return _record(parts, out, rule)


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum over all elements (axis=None) or over one axis of a 2-D tensor."""
    x = _as_tensor(x)
    if axis is None:
        out = Tensor._wrap(np.asarray(x.data.sum(), dtype=x.data.dtype), False)

        def rule(g):
            if x.requires_grad:
                _accum(x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype))

    else:
        if x.ndim != 2 or axis not in (0, 1):
            raise ShapeError(f"axis reductions support 2-D tensors with axis 0 or 1, got {x.shape} axis {axis}")
        out = Tensor._wrap(x.data.sum(axis=axis), False)

        def rule(g):
            if x.requires_grad:
                if axis == 0:
                    _accum(x, np.repeat(g[None, :], x.shape[0], axis=0))
                else:
                    _accum(x, np.repeat(g[:, None], x.shape[1], axis=1))

    return _record((x,), out, rule)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis), 1.0 / n)


def softmax(x: Tensor) -> Tensor:
    """Row-stable softmax along the last axis. Input must be finite."""
    x = _as_tensor(x)
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._wrap(y, False)

    def rule(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(x, y * (g - dot))

    return _record((x,), out, rule)


def log_softmax(x: Tensor) -> Tensor:
    """Numerically stable log(softmax(x)) along the last axis."""
    x = _as_tensor(x)
    if not np.isfinite(x.data).all():
        raise NumericError("log_softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse
    out = Tensor._wrap(out_data, False)

    def rule(g):
        if x.requires_grad:
            sm = np.exp(out_data)
            _accum(x, g - sm * g.sum(axis=-1, keepdims=True))

    return _record((x,), out, rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-row normalization of x [T x D], then affine via gain/bias [D]."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-D tensor, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor._wrap(xhat * gain.data[None, :] + bias.data[None, :], False)

    def rule(g):
        if bias.requires_grad:
            _accum(bias, g.sum(axis=0))
        if gain.requires_grad:
            _accum(gain, (g * xhat).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data[None, :]
            m1 = gx.mean(axis=1, keepdims=True)
            m2 = (gx * xhat).mean(axis=1, keepdims=True)
            _accum(x, inv * (gx - m1 - xhat * m2))

    return _record((x, gain, bias), out, rule)


def argmax_last(x: Tensor) -> np.ndarray:
    """Plain argmax along the last axis (no gradient; ties -> lowest index)."""
    return np.argmax(_as_tensor(x).data, axis=-1)
