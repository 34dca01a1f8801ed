"""Minimal reverse-mode autodiff over float32 numpy buffers.

A :class:`Tape` records primitive applications in execution order; the
backward pass walks the records in exact reverse order, so no explicit
topological sort is needed. Tapes are created per batch and thrown away
after the optimizer step. Only the primitives the model needs exist here.

Values default to float32. Reductions that feed losses accumulate in
float64 before casting back. The gradcheck harness builds float64 tensors
through the same ops to keep finite-difference noise out of its tolerances.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import ContractError, ParameterError, ShapeMismatch

log = logging.getLogger(__name__)

NORM_EPS = 1e-12  # lower clamp for vector norms; ~0 cosine on zero inputs

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """Dense array with an optional gradient buffer.

    ``grad`` is populated (and accumulated into) by ``backward`` only for
    tensors created with ``requires_grad=True``; intermediate gradients
    live and die inside the backward pass.
    """

    __slots__ = ("values", "requires_grad", "grad", "_connected")

    def __init__(self, values, requires_grad: bool = False, dtype=np.float32):
        self.values = np.asarray(values, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._connected = requires_grad

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{tag})"

    # Arithmetic sugar; every path funnels into the module-level primitives.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not a primitive; "
                                "multiply by a reciprocal instead")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _wrap(values) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.requires_grad = False
    out.grad = None
    out._connected = False
    return out


def _record(out: Tensor, inputs, backward_fn) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t._connected for t in inputs):
        out._connected = True
        tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def _as_values(x, like: Tensor):
    """Coerce a python scalar / ndarray operand to the dtype of ``like``."""
    if isinstance(x, Tensor):
        return x.values
    return np.asarray(x, dtype=like.values.dtype)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate additively across fan-out and across repeated
    backward calls; callers zero parameter grads between steps.
    """
    if loss.values.size != 1:
        raise ContractError(
            f"backward requires a scalar loss, got shape {tuple(loss.shape)}"
        )
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(tape.nodes):
        out_grad = grads.get(id(node.out))
        if out_grad is None:
            continue
        for t, g in zip(node.inputs, node.backward_fn(out_grad)):
            if g is None or not t._connected:
                continue
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.values)
                t.grad += g
            else:
                acc = grads.get(id(t))
                if acc is None:
                    grads[id(t)] = np.array(g, copy=True)
                else:
                    acc += g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

def _make_binary_bwd(bwd, at, bt):
    # Trim the backward tuple to the recorded tensor inputs only.
    def fn(g):
        ga, gb = bwd(g)
        if at and bt:
            return (ga, gb)
        return (ga,) if at else (gb,)

    return fn


def add(a, b) -> Tensor:
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    ref = a if at else b
    av, bv = _as_values(a, ref), _as_values(b, ref)
    out = _wrap(av + bv)

    def bwd(g):
        return (
            _unbroadcast(g, av.shape) if at else None,
            _unbroadcast(g, bv.shape) if bt else None,
        )

    inputs = (a, b) if (at and bt) else ((a,) if at else (b,))
    return _record(out, inputs, _make_binary_bwd(bwd, at, bt))


def sub(a, b) -> Tensor:
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    ref = a if at else b
    av, bv = _as_values(a, ref), _as_values(b, ref)
    out = _wrap(av - bv)

    def bwd(g):
        return (
            _unbroadcast(g, av.shape) if at else None,
            _unbroadcast(-g, bv.shape) if bt else None,
        )

    inputs = (a, b) if (at and bt) else ((a,) if at else (b,))
    return _record(out, inputs, _make_binary_bwd(bwd, at, bt))


def mul(a, b) -> Tensor:
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    ref = a if at else b
    av, bv = _as_values(a, ref), _as_values(b, ref)
    out = _wrap(av * bv)

    def bwd(g):
        return (
            _unbroadcast(g * bv, av.shape) if at else None,
            _unbroadcast(g * av, bv.shape) if bt else None,
        )

    inputs = (a, b) if (at and bt) else ((a,) if at else (b,))
    return _record(out, inputs, _make_binary_bwd(bwd, at, bt))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.values)
    out = _wrap(e)
    return _record(out, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    v = a.values
    out = _wrap(np.log(v))
    return _record(out, (a,), lambda g: (g / v,))


def relu(a: Tensor) -> Tensor:
    v = a.values
    out = _wrap(np.maximum(v, 0))
    return _record(out, (a,), lambda g: (g * (v > 0),))


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic; saturates cleanly for |x| large."""
    v = a.values
    y = np.empty_like(v)
    pos = v >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    y[~pos] = ev / (1.0 + ev)
    out = _wrap(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    v = a.values
    out = _wrap(np.clip(v, lo, hi))
    inside = (v >= lo) & (v <= hi)
    return _record(out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# Shape and gather primitives
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.values.shape
    out = _wrap(a.values.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.values.ndim)))
    inv = tuple(np.argsort(axes))
    out = _wrap(a.values.transpose(axes))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    """Transpose the trailing two axes (matmul helper)."""
    out = _wrap(np.swapaxes(a.values, -1, -2))
    return _record(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(parts, axis: int = -1) -> Tensor:
    vals = [p.values for p in parts]
    out = _wrap(np.concatenate(vals, axis=axis))
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(parts), bwd)


def gather(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]``; backward scatter-adds into the table."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.values.shape[0]):
        raise ContractError(
            f"gather index out of range [0, {table.values.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    out = _wrap(table.values[idx])

    def bwd(g):
        buf = np.zeros_like(table.values)
        np.add.at(buf, idx, g)
        return (buf,)

    return _record(out, (table,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank>=2 operands, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeMismatch(f"matmul inner dimensions disagree: {av.shape} @ {bv.shape}")
    out = _wrap(np.matmul(av, bv))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return (_unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape))

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum with float64 accumulation, cast back to the input dtype."""
    v = a.values
    acc = v.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = _wrap(np.asarray(acc, dtype=v.dtype))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, v.shape),)

    return _record(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.values.size if axis is None else a.values.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient routes to the first argmax per slice."""
    v = a.values
    out_v = v.max(axis=axis, keepdims=keepdims)
    arg = np.expand_dims(v.argmax(axis=axis), axis)
    out = _wrap(out_v)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        buf = np.zeros_like(v)
        np.put_along_axis(buf, arg, g, axis=axis)
        return (buf,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Composite-but-fused primitives
# ---------------------------------------------------------------------------

def softmax_with_temperature(x: Tensor, temperature: float, axis: int = -1) -> Tensor:
    """softmax(x / T) along ``axis``, stabilized by max subtraction."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    v = x.values
    shifted = (v - v.max(axis=axis, keepdims=True)) / v.dtype.type(temperature)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _wrap(y)

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((g - inner) * y / temperature,)

    return _record(out, (x,), bwd)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Rows scaled to unit norm; norms clamped below at NORM_EPS."""
    v = x.values
    raw = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    clamped = raw < NORM_EPS
    if clamped.any():
        log.debug("l2_normalize clamped %d zero-norm slice(s)", int(clamped.sum()))
    n = np.maximum(raw, v.dtype.type(NORM_EPS))
    y = v / n
    out = _wrap(y)

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * inner * ~clamped) / n,)

    return _record(out, (x,), bwd)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of two vectors; zero-norm inputs are clamped and logged."""
    av, bv = a.values, b.values
    if av.shape != bv.shape or av.ndim != 1:
        raise ShapeMismatch(f"cosine_similarity needs equal-length vectors, "
                            f"got {av.shape} and {bv.shape}")
    na_raw = float(np.sqrt((av.astype(np.float64) ** 2).sum()))
    nb_raw = float(np.sqrt((bv.astype(np.float64) ** 2).sum()))
    if na_raw < NORM_EPS or nb_raw < NORM_EPS:
        log.debug("cosine_similarity clamped a zero-norm operand")
    na, nb = max(na_raw, NORM_EPS), max(nb_raw, NORM_EPS)
    dot = float(av.astype(np.float64) @ bv.astype(np.float64))
    c = dot / (na * nb)
    out = _wrap(np.asarray(c, dtype=av.dtype))

    def bwd(g):
        ga = g * (bv / (na * nb) - (av * (c / (na * na)) if na_raw >= NORM_EPS else 0))
        gb = g * (av / (na * nb) - (bv * (c / (nb * nb)) if nb_raw >= NORM_EPS else 0))
        return (np.asarray(ga, dtype=av.dtype), np.asarray(gb, dtype=bv.dtype))

    return _record(out, (a, b), bwd)


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity (shared buffer), zero gradient through this edge."""
    return _wrap(x.values)


def straight_through(hard_values: np.ndarray, soft: Tensor) -> Tensor:
    """soft + stop_gradient(hard - soft), with the forward value taken
    verbatim from ``hard_values`` so no float round-trip can perturb it."""
    if hard_values.shape != soft.values.shape:
        raise ShapeMismatch(f"straight_through shapes differ: "
                            f"{hard_values.shape} vs {soft.values.shape}")
    out = _wrap(np.asarray(hard_values, dtype=soft.values.dtype))
    return _record(out, (soft,), lambda g: (g,))
