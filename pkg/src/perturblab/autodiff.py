"""Reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: a ``Tape`` records every operation whose inputs participate
in gradient tracking, and ``backward`` walks the record once in reverse,
accumulating gradients for every node.  The op set is exactly what the
encoder-decoder and its losses need.  Shapes are explicit; the only
broadcasting is the scalar ``scale`` op, which keeps shape errors loud.

Tensors not attached to a tape behave as constants: ops on them run the
same forward math without recording, which is how gradient-free forward
passes (sampling, greedy decoding) are performed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when an op's input shapes do not conform to its shape rule."""


class NonFiniteInputError(ValueError):
    """Raised when an op receives NaN or infinite input values."""


class Tensor:
    """Dense float64 array, optionally registered as a node on a tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to 1-d; only call when needed
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"


@dataclass
class TapeOp:
    """One recorded operation: kind, node wiring, and saved backward context."""

    kind: str
    input_ids: tuple  # node id per input; None marks a constant input
    output_id: int
    saved: tuple


class Tape:
    """Ordered operation record; inputs always precede their consumers."""

    def __init__(self):
        self.ops: list[TapeOp] = []
        self.node_shapes: list[tuple[int, ...]] = []

    @property
    def n_nodes(self) -> int:
        return len(self.node_shapes)

    def _new_node(self, shape: tuple[int, ...]) -> int:
        self.node_shapes.append(tuple(shape))
        return len(self.node_shapes) - 1

    def watch(self, data) -> Tensor:
        """Register a leaf tensor (parameter or input) for gradient tracking."""
        t = Tensor(data)
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteInputError("cannot watch a tensor with non-finite values")
        t.tape = self
        t.node_id = self._new_node(t.data.shape)
        return t


class GradientMap:
    """Node id -> gradient array for one backward pass over one tape.

    Nodes never reached from the loss read as zeros of the node's shape.
    """

    def __init__(self, tape: Tape, partial: list):
        self._tape = tape
        self._partial = partial

    def __getitem__(self, node_id: int) -> np.ndarray:
        g = self._partial[node_id]
        if g is None:
            return np.zeros(self._tape.node_shapes[node_id])
        return g

    def wrt(self, tensor: Tensor) -> np.ndarray:
        if tensor.tape is not self._tape or tensor.node_id is None:
            raise ValueError("tensor is not a node of the tape this GradientMap came from")
        return self[tensor.node_id]


# ---------------------------------------------------------------------------
# Forward rules. Each returns (output array, saved context for backward).
# ---------------------------------------------------------------------------


def _shape_err(kind: str, detail: str) -> ShapeMismatchError:
    return ShapeMismatchError(f"{kind}: {detail}")


def _fwd_add(xs, attrs):
    a, b = xs
    if a.shape != b.shape:
        raise _shape_err("add", f"shapes {a.shape} and {b.shape} differ")
    return a.data + b.data, ()


def _fwd_mul(xs, attrs):
    a, b = xs
    if a.shape != b.shape:
        raise _shape_err("mul", f"shapes {a.shape} and {b.shape} differ")
    return a.data * b.data, (a.data, b.data)


def _fwd_matmul(xs, attrs):
    a, b = xs
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise _shape_err("matmul", f"expects 2-D inputs, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise _shape_err("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
    return a.data @ b.data, (a.data, b.data)


def _fwd_embedding_lookup(xs, attrs):
    (m,) = xs
    ids = np.asarray(attrs["ids"], dtype=np.int64)
    if m.data.ndim != 2:
        raise _shape_err("embedding_lookup", f"matrix must be 2-D, got {m.shape}")
    if ids.ndim != 1:
        raise _shape_err("embedding_lookup", f"ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= m.shape[0]):
        raise ValueError(
            f"embedding_lookup: token id out of range [0, {m.shape[0]}): {ids.tolist()}"
        )
    return m.data[ids], (ids, m.shape)


def _fwd_softmax(xs, attrs):
    (x,) = xs
    if x.data.ndim < 1:
        raise _shape_err("softmax", "input must have at least one axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, (y,)


def _fwd_log_softmax(xs, attrs):
    (x,) = xs
    if x.data.ndim < 1:
        raise _shape_err("log_softmax", "input must have at least one axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return y, (y,)


def _fwd_layer_norm(xs, attrs):
    x, gain, bias = xs
    eps = float(attrs.get("eps", 1e-5))
    d = x.shape[-1] if x.data.ndim else 0
    if gain.shape != (d,) or bias.shape != (d,):
        raise _shape_err(
            "layer_norm", f"gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gain.data + bias.data, (xhat, inv_std, gain.data)


def _fwd_relu(xs, attrs):
    (x,) = xs
    return np.maximum(x.data, 0.0), (x.data > 0.0,)


def _fwd_scale(xs, attrs):
    (x,) = xs
    factor = float(attrs["factor"])
    if not np.isfinite(factor):
        raise NonFiniteInputError("scale: factor must be finite")
    return x.data * factor, (factor,)


def _fwd_concat(xs, attrs):
    axis = int(attrs["axis"])
    if not xs:
        raise _shape_err("concat", "needs at least one input")
    nd = xs[0].data.ndim
    if not 0 <= axis < nd:
        raise _shape_err("concat", f"axis {axis} out of range for {nd}-D inputs")
    base = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != nd or other[:axis] + other[axis + 1 :] != base[:axis] + base[axis + 1 :]:
            raise _shape_err("concat", f"incompatible shapes {xs[0].shape} and {t.shape}")
    sizes = tuple(t.shape[axis] for t in xs)
    return np.concatenate([t.data for t in xs], axis=axis), (axis, sizes)


def _fwd_slice(xs, attrs):
    (x,) = xs
    axis = int(attrs["axis"])
    start = int(attrs["start"])
    stop = int(attrs["stop"])
    if not 0 <= axis < x.data.ndim:
        raise _shape_err("slice", f"axis {axis} out of range for shape {x.shape}")
    if not 0 <= start < stop <= x.shape[axis]:
        raise _shape_err("slice", f"bounds [{start}, {stop}) invalid for dim {x.shape[axis]}")
    idx = tuple(slice(None) if a != axis else slice(start, stop) for a in range(x.data.ndim))
    return x.data[idx].copy(), (x.shape, idx)


def _fwd_sum(xs, attrs):
    (x,) = xs
    return np.asarray(x.data.sum()), (x.shape,)


def _fwd_mean(xs, attrs):
    (x,) = xs
    return np.asarray(x.data.mean()), (x.shape, x.data.size)


def _fwd_transpose(xs, attrs):
    (x,) = xs
    if x.data.ndim != 2:
        raise _shape_err("transpose", f"expects a 2-D input, got {x.shape}")
    return x.data.T.copy(), ()


_FORWARD: dict[str, Callable] = {
    "add": _fwd_add,
    "mul": _fwd_mul,
    "matmul": _fwd_matmul,
    "embedding_lookup": _fwd_embedding_lookup,
    "softmax": _fwd_softmax,
    "log_softmax": _fwd_log_softmax,
    "layer_norm": _fwd_layer_norm,
    "relu": _fwd_relu,
    "scale": _fwd_scale,
    "concat": _fwd_concat,
    "slice": _fwd_slice,
    "sum": _fwd_sum,
    "mean": _fwd_mean,
    "transpose": _fwd_transpose,
}

OP_KINDS = tuple(_FORWARD)


# ---------------------------------------------------------------------------
# Backward rules. Each returns one gradient per input (aligned with inputs).
# ---------------------------------------------------------------------------


def _bwd_add(g, saved):
    return g, g


def _bwd_mul(g, saved):
    a, b = saved
    return g * b, g * a


def _bwd_matmul(g, saved):
    a, b = saved
    return g @ b.T, a.T @ g


def _bwd_embedding_lookup(g, saved):
    ids, m_shape = saved
    dm = np.zeros(m_shape)
    np.add.at(dm, ids, g)
    return (dm,)


def _bwd_softmax(g, saved):
    (y,) = saved
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _bwd_log_softmax(g, saved):
    (y,) = saved
    return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)


def _bwd_layer_norm(g, saved):
    xhat, inv_std, gain = saved
    dxhat = g * gain
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    lead = tuple(range(g.ndim - 1))
    dgain = (g * xhat).sum(axis=lead) if lead else g * xhat
    dbias = g.sum(axis=lead) if lead else g
    return dx, dgain, dbias


def _bwd_relu(g, saved):
    (mask,) = saved
    return (g * mask,)


def _bwd_scale(g, saved):
    (factor,) = saved
    return (g * factor,)


def _bwd_concat(g, saved):
    axis, sizes = saved
    grads = []
    offset = 0
    for size in sizes:
        idx = tuple(
            slice(None) if a != axis else slice(offset, offset + size) for a in range(g.ndim)
        )
        grads.append(g[idx].copy())
        offset += size
    return tuple(grads)


def _bwd_slice(g, saved):
    in_shape, idx = saved
    dx = np.zeros(in_shape)
    dx[idx] = g
    return (dx,)


def _bwd_sum(g, saved):
    (in_shape,) = saved
    return (np.full(in_shape, float(g)),)


def _bwd_mean(g, saved):
    in_shape, n = saved
    return (np.full(in_shape, float(g) / n),)


def _bwd_transpose(g, saved):
    return (g.T.copy(),)


_BACKWARD: dict[str, Callable] = {
    "add": _bwd_add,
    "mul": _bwd_mul,
    "matmul": _bwd_matmul,
    "embedding_lookup": _bwd_embedding_lookup,
    "softmax": _bwd_softmax,
    "log_softmax": _bwd_log_softmax,
    "layer_norm": _bwd_layer_norm,
    "relu": _bwd_relu,
    "scale": _bwd_scale,
    "concat": _bwd_concat,
    "slice": _bwd_slice,
    "sum": _bwd_sum,
    "mean": _bwd_mean,
    "transpose": _bwd_transpose,
}


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def op_apply(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply a forward primitive; record it if any input is on a tape.

    Finiteness is validated on constants and freshly-watched leaves; outputs
    of recorded ops are trusted, since producing finite values from finite
    inputs is every op's own post-condition.
    """
    rule = _FORWARD.get(kind)
    if rule is None:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(_FORWARD)}")
    tensors = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
    tape = None
    for t in tensors:
        if t.tape is None:
            # sum-reduction check: NaN or +-Inf anywhere poisons the sum
            if not math.isfinite(float(t.data.sum())):
                raise NonFiniteInputError(f"{kind}: input contains NaN or Inf")
        else:
            if tape is not None and tape is not t.tape:
                raise ValueError(f"{kind}: inputs are recorded on different tapes")
            tape = t.tape
    out_data, saved = rule(tensors, attrs)
    if tape is None:
        return Tensor(out_data)
    out_id = tape._new_node(out_data.shape)
    tape.ops.append(TapeOp(kind, tuple(t.node_id for t in tensors), out_id, saved))
    return Tensor(out_data, tape, out_id)


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    """Gradients of a scalar loss with respect to every node on the tape.

    Accumulation is a sum over all consuming paths; a node the loss does not
    depend on reads as zeros.  The tape is not modified, so several losses
    recorded on one tape can each be differentiated independently.
    """
    if loss.tape is not tape or loss.node_id is None:
        raise ValueError("loss is not recorded on this tape")
    if loss.shape != ():
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    partial: list = [None] * tape.n_nodes
    partial[loss.node_id] = np.ones(())
    for op in reversed(tape.ops):
        g = partial[op.output_id]
        if g is None:
            continue
        input_grads = _BACKWARD[op.kind](g, op.saved)
        for nid, ig in zip(op.input_ids, input_grads):
            if nid is None or ig is None:
                continue
            if ig.shape != tape.node_shapes[nid]:
                raise AssertionError(
                    f"{op.kind}: backward produced shape {ig.shape} "
                    f"for node of shape {tape.node_shapes[nid]}"
                )
            if partial[nid] is None:
                partial[nid] = ig.copy() if ig is g else ig
            else:
                partial[nid] = partial[nid] + ig
    return GradientMap(tape, partial)


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float) -> float:
    """Max relative error between tape gradients of ``f`` and central differences.

    ``f`` must map a tensor to a scalar tensor and be smooth at ``x``.
    Returns the error magnitude; the caller decides what to assert.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    tape = Tape()
    xt = tape.watch(x.data)
    loss = f(xt)
    analytic = backward(tape, loss).wrt(xt)

    def value_at(arr: np.ndarray) -> float:
        return float(f(Tensor(arr)).data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        up = value_at(bumped.reshape(x.shape))
        bumped[i] = flat[i] - h
        down = value_at(bumped.reshape(x.shape))
        num_flat[i] = (up - down) / (2.0 * h)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0


# Thin named wrappers; model code reads better with these than raw kinds.


def add(a, b) -> Tensor:
    return op_apply("add", [a, b])


def mul(a, b) -> Tensor:
    return op_apply("mul", [a, b])


def matmul(a, b) -> Tensor:
    return op_apply("matmul", [a, b])


def embedding_lookup(matrix, ids) -> Tensor:
    return op_apply("embedding_lookup", [matrix], ids=ids)


def softmax(x) -> Tensor:
    return op_apply("softmax", [x])


def log_softmax(x) -> Tensor:
    return op_apply("log_softmax", [x])


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    return op_apply("layer_norm", [x, gain, bias], eps=eps)


def relu(x) -> Tensor:
    return op_apply("relu", [x])


def scale(x, factor: float) -> Tensor:
    return op_apply("scale", [x], factor=factor)


def concat(parts, axis: int) -> Tensor:
    return op_apply("concat", list(parts), axis=axis)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    return op_apply("slice", [x], axis=axis, start=start, stop=stop)


def reduce_sum(x) -> Tensor:
    return op_apply("sum", [x])


def reduce_mean(x) -> Tensor:
    return op_apply("mean", [x])


def transpose(x) -> Tensor:
    return op_apply("transpose", [x])
