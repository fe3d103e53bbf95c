"""A small tape-based reverse-mode differentiation engine over numpy.

Operations run eagerly on float64 arrays. While a :class:`Tape` is active,
every operation with a differentiable input is appended to it; outside a
tape the same functions run as plain numpy code (inference mode).

    with Tape() as tape:
        loss = sum_all(mul(x, x))
    tape.backward(loss)      # x.grad == 2 * x.data

Broadcasting is limited to a scalar, a row vector ``(d,)`` or a column
``(N, 1)`` against an ``(N, d)`` matrix.
"""

from __future__ import annotations

import contextvars

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, DimensionError, NumericError

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("adaprop_tape", default=None)


class Value:
    """A float64 array with an optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return self.backward_fn is None

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Value{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def parameter(data, name=None) -> Value:
    return Value(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Value:
    return data if isinstance(data, Value) else Value(data)


class Tape:
    """Ordered record of operations; backward replays it in reverse."""

    def __init__(self):
        self.nodes: list[Value] = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Value) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Value) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every leaf parameter.

    Intermediate gradients are released after use. Leaf gradients add to
    whatever is already stored, so repeated calls sum.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(pg, dtype=np.float64)
            else:
                parent.grad = parent.grad + pg
        node.grad = None


def _record(data, parents, backward_fn, check=True) -> Value:
    if check and not np.all(np.isfinite(data)):
        raise NumericError("operation produced a non-finite value")
    out = Value(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        tape.nodes.append(out)
    return out


def _check_broadcast(a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return np.broadcast_shapes(sa, sb)
    big, small = (sa, sb) if len(sa) >= len(sb) else (sb, sa)
    if len(big) == 2 and (small == (big[1],) or small == (big[0], 1) or small == (1, big[1])):
        return big
    raise DimensionError(f"incompatible shapes {sa} and {sb}")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Value:
    a, b = constant(a), constant(b)
    _check_broadcast(a.data, b.data)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Value:
    a, b = constant(a), constant(b)
    _check_broadcast(a.data, b.data)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Value:
    a, b = constant(a), constant(b)
    _check_broadcast(a.data, b.data)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Value:
    a, b = constant(a), constant(b)
    _check_broadcast(a.data, b.data)
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def scale(a, c: float) -> Value:
    a = constant(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def rotate(a, b) -> Value:
    """Pairwise complex product over adjacent pairs ``(re, im)`` of the last axis."""
    a, b = constant(a), constant(b)
    if a.shape[-1] % 2 or b.shape[-1] % 2:
        raise DimensionError("rotate needs an even last dimension")
    _check_broadcast(a.data, b.data)
    ar, ai = a.data[..., 0::2], a.data[..., 1::2]
    br, bi = b.data[..., 0::2], b.data[..., 1::2]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0::2] = ar * br - ai * bi
    out[..., 1::2] = ar * bi + ai * br

    def bw(g):
        gr, gi = g[..., 0::2], g[..., 1::2]
        ga = np.empty(g.shape)
        ga[..., 0::2] = gr * br + gi * bi
        ga[..., 1::2] = -gr * bi + gi * br
        gb = np.empty(g.shape)
        gb[..., 0::2] = gr * ar + gi * ai
        gb[..., 1::2] = -gr * ai + gi * ar
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bw)


def matmul(a, b) -> Value:
    a, b = constant(a), constant(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"cannot matmul {a.shape} by {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:
            return np.outer(g, bd), ad.T @ g
        if bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad

    return _record(out, (a, b), bw)


def affine(x, w, b=None) -> Value:
    """``x @ w.T + b`` with ``w`` of shape ``(out, in)``."""
    x, w = constant(x), constant(w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"affine: input {x.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T
    parents = [x, w]
    if b is not None:
        b = constant(b)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"affine: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data
        parents.append(b)

    def bw(g):
        gx = g @ w.data
        gw = np.outer(g, x.data) if x.data.ndim == 1 else g.T @ x.data
        grads = [gx, gw]
        if b is not None:
            grads.append(g if g.ndim == 1 else g.sum(axis=0))
        return grads

    return _record(out, parents, bw)


def relu(a) -> Value:
    a = constant(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Value:
    a = constant(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Value:
    a = constant(a)
    x = a.data
    # stable in both tails
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Value:
    a = constant(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Value:
    a = constant(a)
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a, lo=None, hi=None) -> Value:
    """Clip into ``[lo, hi]``; the gradient is zero where clipping is active."""
    a = constant(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _record(out, (a,), lambda g: (g * inside,))


def reshape(a, shape) -> Value:
    a = constant(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), check=False)


def transpose(a) -> Value:
    a = constant(a)
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    return _record(a.data.T, (a,), lambda g: (g.T,), check=False)


def sum_all(a) -> Value:
    a = constant(a)
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean_all(a) -> Value:
    a = constant(a)
    n = max(a.data.size, 1)
    return _record(np.asarray(a.data.sum() / n), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def stop_gradient(a) -> Value:
    """Same value, no gradient (``no_grad`` in the ST estimator)."""
    return Value(constant(a).data.copy())


def concat(values, axis=0) -> Value:
    values = [constant(v) for v in values]
    try:
        out = np.concatenate([v.data for v in values], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def bw(g):
        return np.split(g, bounds, axis=axis)

    return _record(out, values, bw, check=False)


def take_cols(a, start: int, stop: int) -> Value:
    """Column slice ``a[:, start:stop]``."""
    a = constant(a)
    if a.data.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise DimensionError(f"bad column slice [{start}:{stop}] of {a.shape}")

    def bw(g):
        out = np.zeros(a.shape)
        out[:, start:stop] = g
        return (out,)

    return _record(a.data[:, start:stop], (a,), bw, check=False)


def _scatter_rows(ids, values, n_rows):
    """Sum rows of ``values`` into ``n_rows`` buckets given by ``ids``."""
    if values.ndim == 1:
        return np.bincount(ids, weights=values, minlength=n_rows).astype(np.float64)
    m = sp.csr_matrix((np.ones(len(ids)), (ids, np.arange(len(ids)))), shape=(n_rows, len(ids)))
    return np.asarray(m @ values)


def gather(table, ids) -> Value:
    """Rows ``table[ids]``; repeated ids accumulate gradient."""
    table = constant(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError("gather ids must be one-dimensional")
    if len(ids) and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("gather id out of range")
    return _record(table.data[ids], (table,),
                   lambda g: (_scatter_rows(ids, g, table.shape[0]),), check=False)


def _segment_starts(segment_ids, num_segments):
    if len(segment_ids) and np.any(np.diff(segment_ids) < 0):
        raise ContractError("segment ids must be sorted")
    if len(segment_ids) and (segment_ids[0] < 0 or segment_ids[-1] >= num_segments):
        raise IndexError("segment id out of range")
    counts = np.bincount(segment_ids, minlength=num_segments)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return counts, starts


def segment_reduce(values, segment_ids, num_segments: int, mode: str = "sum") -> Value:
    """Reduce rows of ``values`` per sorted segment id.

    Empty segments produce zeros. ``max`` routes the gradient to the first
    maximal row of each segment, column by column.
    """
    values = constant(values)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if len(seg) != values.shape[0]:
        raise DimensionError("segment ids do not match the number of rows")
    counts, starts = _segment_starts(seg, num_segments)
    x = values.data
    nonempty = counts > 0
    out = np.zeros((num_segments,) + x.shape[1:])
    if mode in ("sum", "mean"):
        if len(seg):
            out[nonempty] = np.add.reduceat(x, starts[nonempty], axis=0)
        if mode == "mean":
            denom = np.maximum(counts, 1).reshape((-1,) + (1,) * (x.ndim - 1))
            out = out / denom

            def bw(g):
                return ((g / denom)[seg],)
        else:
            def bw(g):
                return (g[seg],)
    elif mode == "max":
        if len(seg):
            out[nonempty] = np.maximum.reduceat(x, starts[nonempty], axis=0)
        rows = np.arange(len(seg)).reshape((-1,) + (1,) * (x.ndim - 1))
        cand = np.where(x == out[seg], rows, len(seg))
        first = np.zeros((num_segments,) + x.shape[1:], dtype=np.int64)
        if len(seg):
            first[nonempty] = np.minimum.reduceat(cand, starts[nonempty], axis=0)

        def bw(g):
            gx = np.zeros(x.shape)
            if x.ndim == 1:
                gx[first[nonempty]] = g[nonempty]
            else:
                cols = np.broadcast_to(np.arange(x.shape[1]), first[nonempty].shape)
                gx[first[nonempty], cols] = g[nonempty]
            return (gx,)
    else:
        raise ContractError(f"unknown segment mode {mode!r}")
    return _record(out, (values,), bw)


def segment_cumsum(values, segment_ids, num_segments: int, exclusive: bool = True) -> Value:
    """Running sum of a 1-d array within each sorted segment."""
    values = constant(values)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if values.data.ndim != 1 or len(seg) != len(values.data):
        raise DimensionError("segment_cumsum expects a 1-d array matching the segment ids")
    counts, starts = _segment_starts(seg, num_segments)
    total = np.cumsum(values.data)
    base = np.concatenate([[0.0], total])[starts][seg]
    out = total - base
    if exclusive:
        out = out - values.data

    def bw(g):
        # reverse cumulative sum within each segment
        rev = np.cumsum(g[::-1])[::-1]
        ends = starts + counts
        tail = np.concatenate([rev, [0.0]])[ends][seg]
        gx = rev - tail
        if exclusive:
            gx = gx - g
        return (gx,)

    return _record(out, (values,), bw)


def segment_softmax(logits, segment_ids, num_segments: int) -> Value:
    """Softmax of a 1-d array within each sorted segment."""
    logits = constant(logits)
    seg = np.asarray(segment_ids, dtype=np.int64)
    shift = np.zeros(num_segments)
    counts, starts = _segment_starts(seg, num_segments)
    if len(seg):
        nz = counts > 0
        shift[nz] = np.maximum.reduceat(logits.data, starts[nz])
    z = exp(sub(logits, Value(shift[seg])))
    total = segment_reduce(z, seg, num_segments, "sum")
    return div(z, gather(total, seg))


def straight_through(rep, p) -> Value:
    """``(1 - no_grad(p) + p) * rep`` with the multiplier fixed to exactly one.

    ``rep`` is ``(N, d)`` and ``p`` is ``(N,)``. The forward value equals
    ``rep`` bit for bit; ``rep`` receives the incoming gradient unchanged and
    ``p`` receives ``sum(grad * rep)`` per row.
    """
    rep, p = constant(rep), constant(p)
    if rep.data.ndim != 2 or p.shape != (rep.shape[0],):
        raise DimensionError(f"straight_through: rep {rep.shape} vs p {p.shape}")
    if np.any(p.data <= 0) or np.any(p.data > 1):
        raise ContractError("straight_through needs probabilities in (0, 1]")
    return _record(rep.data.copy(), (rep, p),
                   lambda g: (g, np.einsum("ij,ij->i", g, rep.data)), check=False)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One Adam update with decoupled weight decay, in place.

    ``params`` and ``grads`` are parallel lists of arrays; ``state`` is a dict
    holding the step count and moment estimates (created on first use).
    """
    if "m" not in state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            g = np.zeros_like(p)
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


class Adam:
    """Adam over a list of parameter Values."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state: dict = {}

    def step(self):
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
