"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in numpy arrays; the differentiation machinery is local. A forward
pass records primitive ops onto an explicit :class:`Tape`; :func:`backward`
replays the tape in reverse and returns a gradient buffer per node id. Tapes
are rebuilt for every forward pass and never reused across passes.

Supported primitives: matmul, add (same shape or trailing-axis bias), mul,
scale, concat, slice, gather (embedding lookup / row selection), softmax and
log-softmax over the last axis, layer normalization, GELU (tanh form),
transpose, reshape, reduce_sum, reduce_mean.

Broadcasting is deliberately restricted to trailing-axis bias addition; wider
broadcasting rules are out of scope, so constants that need a batched shape
are materialized with ``np.broadcast_to`` before being wrapped in a Tensor.

Thread contract: one tape is active per thread at a time; a tape and its
tensors may be handed between threads but never used concurrently. Independent
tapes can run in parallel.
"""

from __future__ import annotations

import math
import threading

import numpy as np

from .errors import ContractError, NumericDomainError, ShapeMismatchError

_GELU_C0 = 0.7978845608  # sqrt(2/pi), fixed constant of the tanh form
_GELU_C1 = 0.044715
_LN_VAR_GUARD = 1e-6  # added to the variance before the square root


class Tensor:
    """A dense float64 array with an optional gradient slot.

    ``node_id`` identifies the tensor on the tape it was last registered
    with; it is reassigned whenever the tensor joins a new tape. ``grad`` is
    filled by :func:`backward` for requires_grad leaves as a convenience.
    """

    __slots__ = ("values", "requires_grad", "grad", "node_id", "_tape")

    def __init__(self, values, requires_grad=False):
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None
        self._tape = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self):
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self):
        """A constant copy sharing no graph history."""
        return Tensor(self.values.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "out_id", "input_ids", "backward_fn")

    def __init__(self, op, out_id, input_ids, backward_fn):
        self.op = op
        self.out_id = out_id
        self.input_ids = input_ids
        self.backward_fn = backward_fn


_LOCAL = threading.local()


def _active_tape():
    return getattr(_LOCAL, "tape", None)


class Tape:
    """Ordered record of one forward pass.

    Node order is a valid topological order by construction (an op's inputs
    are registered before its output). Use as a context manager::

        with Tape() as tape:
            loss = ...
        grads = backward(tape, loss)
    """

    def __init__(self):
        self.nodes = []
        self._next_id = 0
        self._leaves = []  # (node_id, tensor) for requires_grad leaves
        self._out_index = {}  # out_id -> position in nodes

    def __enter__(self):
        if _active_tape() is not None:
            raise ContractError("a tape is already active on this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _LOCAL.tape = None
        return False

    def _register(self, tensor):
        """Assign this tape's node id to a tensor not yet on it."""
        if tensor._tape is self and tensor.node_id is not None:
            return tensor.node_id
        nid = self._next_id
        self._next_id += 1
        tensor.node_id = nid
        tensor._tape = self
        if tensor.requires_grad:
            self._leaves.append((nid, tensor))
        return nid

    def _record(self, op, inputs, out, backward_fn):
        input_ids = tuple(self._register(t) for t in inputs)
        out_id = self._next_id
        self._next_id += 1
        out.node_id = out_id
        out._tape = self
        self._out_index[out_id] = len(self.nodes)
        self.nodes.append(_Node(op, out_id, input_ids, backward_fn))


def _maybe_record(op, inputs, out_values, backward_fn):
    """Wrap op output; record a node when a tape is active and grads flow."""
    out = Tensor(out_values)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(op, inputs, out, backward_fn)
    return out


def _accum(grads, node_id, value):
    g = grads.get(node_id)
    if g is None:
        grads[node_id] = value
    else:
        grads[node_id] = g + value


def backward(tape, loss):
    """Reverse-mode sweep from a scalar loss recorded on ``tape``.

    Returns a dict mapping node_id to gradient array. Every requires_grad
    leaf registered on the tape is present in the map (zeros when the loss
    does not reach it), and each such leaf tensor's ``grad`` slot is set.
    Repeated calls are independent and bitwise deterministic.
    """
    if not isinstance(loss, Tensor) or loss.values.shape != ():
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if loss._tape is not tape or loss.node_id is None:
        raise ContractError("loss was not recorded on this tape")

    grads = {loss.node_id: np.ones((), dtype=np.float64)}
    start = tape._out_index.get(loss.node_id)
    if start is not None:  # a leaf loss has no nodes to walk
        for node in reversed(tape.nodes[: start + 1]):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            node.backward_fn(g, grads)

    for nid, leaf in tape._leaves:
        if nid not in grads:
            grads[nid] = np.zeros_like(leaf.values)
        leaf.grad = grads[nid]
    return grads


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values):
    """Wrap values as a non-differentiable tensor."""
    return Tensor(np.asarray(values, dtype=np.float64))


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product.

    Accepts (2d @ 2d), (nd @ 2d) where the 2d operand is a weight applied to
    the trailing axis, and (nd @ nd) with identical leading batch dims.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeMismatchError(f"matmul: operands must be >=2d, got {av.shape} x {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {av.shape} x {bv.shape}")
    if bv.ndim == 2:
        out = av @ bv

        def bwd(g, grads):
            if a.requires_grad:
                _accum(grads, a.node_id, g @ bv.T)
            if b.requires_grad:
                lead = tuple(range(av.ndim - 1))
                _accum(grads, b.node_id, np.tensordot(av, g, axes=(lead, lead)))

    elif av.shape[:-2] == bv.shape[:-2]:
        out = av @ bv

        def bwd(g, grads):
            if a.requires_grad:
                _accum(grads, a.node_id, g @ np.swapaxes(bv, -1, -2))
            if b.requires_grad:
                _accum(grads, b.node_id, np.swapaxes(av, -1, -2) @ g)

    else:
        raise ShapeMismatchError(f"matmul: unsupported batch shapes {av.shape} x {bv.shape}")
    return _maybe_record("matmul", (a, b), out, bwd)


def add(a, b):
    """Elementwise sum; also accepts a trailing-axis bias for ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.shape == bv.shape:
        out = av + bv

        def bwd(g, grads):
            if a.requires_grad:
                _accum(grads, a.node_id, g)
            if b.requires_grad:
                _accum(grads, b.node_id, g)

    elif bv.ndim == 1 and av.ndim >= 1 and av.shape[-1:] == bv.shape:
        out = av + bv

        def bwd(g, grads):
            if a.requires_grad:
                _accum(grads, a.node_id, g)
            if b.requires_grad:
                _accum(grads, b.node_id, g.reshape(-1, bv.shape[0]).sum(axis=0))

    else:
        raise ShapeMismatchError(f"add: incompatible shapes {av.shape} + {bv.shape}")
    return _maybe_record("add", (a, b), out, bwd)


def mul(a, b):
    """Elementwise product of same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.shape != b.values.shape:
        raise ShapeMismatchError(f"mul: incompatible shapes {a.shape} * {b.shape}")
    av, bv = a.values, b.values
    out = av * bv

    def bwd(g, grads):
        if a.requires_grad:
            _accum(grads, a.node_id, g * bv)
        if b.requires_grad:
            _accum(grads, b.node_id, g * av)

    return _maybe_record("mul", (a, b), out, bwd)


def scale(a, c):
    """Multiply by a python float."""
    a = _as_tensor(a)
    c = float(c)
    out = a.values * c

    def bwd(g, grads):
        if a.requires_grad:
            _accum(grads, a.node_id, g * c)

    return _maybe_record("scale", (a,), out, bwd)


def sub(a, b):
    return add(a, scale(b, -1.0))


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatchError("concat: empty input list")
    ref = tensors[0].values.shape
    for t in tensors[1:]:
        s = t.values.shape
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeMismatchError(f"concat: incompatible shapes {ref} vs {s} on axis {axis}")
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, grads):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(grads, t.node_id, g[tuple(idx)])

    return _maybe_record("concat", tuple(tensors), out, bwd)


def slice_axis(a, axis, start, stop):
    """Contiguous slice [start, stop) along one axis."""
    a = _as_tensor(a)
    n = a.values.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeMismatchError(f"slice: [{start}:{stop}) out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.values.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.values[idx].copy()

    def bwd(g, grads):
        if a.requires_grad:
            full = np.zeros_like(a.values)
            full[idx] = g
            _accum(grads, a.node_id, full)

    return _maybe_record("slice", (a,), out, bwd)


def gather(table, indices):
    """Row lookup along axis 0: embedding gather and row selection.

    ``indices`` is an integer array of any shape; output shape is
    ``indices.shape + table.shape[1:]``. Backward scatter-adds into the table.
    """
    table = _as_tensor(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeMismatchError("gather: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.values.shape[0]):
        raise ShapeMismatchError(
            f"gather: index out of range for table with {table.values.shape[0]} rows"
        )
    out = table.values[idx]

    def bwd(g, grads):
        if table.requires_grad:
            gt = np.zeros_like(table.values)
            np.add.at(gt, idx, g)
            _accum(grads, table.node_id, gt)

    return _maybe_record("gather", (table,), out, bwd)


def _check_finite(op, values):
    if not np.isfinite(values).all():
        raise NumericDomainError(f"{op}: non-finite input")


def softmax(a):
    """Softmax over the last axis; rows are probability vectors."""
    a = _as_tensor(a)
    _check_finite("softmax", a.values)
    z = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g, grads):
        if a.requires_grad:
            dot = (g * out).sum(axis=-1, keepdims=True)
            _accum(grads, a.node_id, out * (g - dot))

    return _maybe_record("softmax", (a,), out, bwd)


def log_softmax(a):
    a = _as_tensor(a)
    _check_finite("log_softmax", a.values)
    z = a.values - a.values.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bwd(g, grads):
        if a.requires_grad:
            p = np.exp(out)
            _accum(grads, a.node_id, g - p * g.sum(axis=-1, keepdims=True))

    return _maybe_record("log_softmax", (a,), out, bwd)


def layer_norm(a, gain, bias):
    """Normalize the last axis to zero mean and unit variance, then affine.

    The variance is guarded with 1e-6 before the square root so constant
    rows do not divide by zero.
    """
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    h = a.values.shape[-1]
    if gain.values.shape != (h,) or bias.values.shape != (h,):
        raise ShapeMismatchError(
            f"layer_norm: gain/bias must be ({h},), got {gain.shape} and {bias.shape}"
        )
    mu = a.values.mean(axis=-1, keepdims=True)
    xc = a.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_VAR_GUARD)
    xhat = xc * inv
    out = xhat * gain.values + bias.values

    def bwd(g, grads):
        if gain.requires_grad:
            _accum(grads, gain.node_id, (g * xhat).reshape(-1, h).sum(axis=0))
        if bias.requires_grad:
            _accum(grads, bias.node_id, g.reshape(-1, h).sum(axis=0))
        if a.requires_grad:
            gx = g * gain.values
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(grads, a.node_id, inv * (gx - m1 - xhat * m2))

    return _maybe_record("layer_norm", (a, gain, bias), out, bwd)


def gelu(a):
    """GELU in the tanh approximation with fixed constants."""
    a = _as_tensor(a)
    x = a.values
    u = _GELU_C0 * (x + _GELU_C1 * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bwd(g, grads):
        if a.requires_grad:
            du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x * x)
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            _accum(grads, a.node_id, g * d)

    return _maybe_record("gelu", (a,), out, bwd)


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.values.ndim)):
        raise ShapeMismatchError(f"transpose: axes {axes} invalid for shape {a.shape}")
    out = np.transpose(a.values, axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g, grads):
        if a.requires_grad:
            _accum(grads, a.node_id, np.transpose(g, inverse))

    return _maybe_record("transpose", (a,), out, bwd)


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.values.size:
        raise ShapeMismatchError(f"reshape: cannot view {a.shape} as {shape}")
    orig = a.values.shape
    out = a.values.reshape(shape)

    def bwd(g, grads):
        if a.requires_grad:
            _accum(grads, a.node_id, g.reshape(orig))

    return _maybe_record("reshape", (a,), out, bwd)


def reduce_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)
    shape = a.values.shape

    def bwd(g, grads):
        if a.requires_grad:
            if axis is None:
                _accum(grads, a.node_id, np.broadcast_to(g, shape).copy())
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                _accum(grads, a.node_id, np.broadcast_to(ge, shape).copy())

    return _maybe_record("reduce_sum", (a,), out, bwd)


def reduce_mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.values.size if axis is None else a.values.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


_OP_TABLE = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "concat": concat,
    "slice": slice_axis,
    "gather": gather,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "transpose": transpose,
    "reshape": reshape,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
}


def apply_op(kind, *args, **attrs):
    """Dispatch a primitive by name; mainly for composition fuzz tests."""
    try:
        fn = _OP_TABLE[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*args, **attrs)


# ---------------------------------------------------------------------------
# norms and gradient verification
# ---------------------------------------------------------------------------


def frobenius_norm(t, per_sample=False):
    """sqrt of the sum of squared entries.

    With ``per_sample`` the leading axis indexes samples and a vector of
    independent norms is returned. Works on tensors and raw arrays; an empty
    slice has norm 0.
    """
    v = t.values if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if per_sample:
        return np.sqrt((v * v).reshape(v.shape[0], -1).sum(axis=1))
    return float(np.sqrt((v * v).sum()))


def grad_check(fn, wrt, h=1e-5, sample_per_tensor=None, rng=None):
    """Compare reverse-mode gradients of ``fn`` with central differences.

    ``fn`` takes no arguments, builds its own tape over the tensors in
    ``wrt`` (a list of requires_grad Tensors), and returns the scalar loss
    tensor together with its tape: ``(loss, tape)``. Central differences
    ``(f(x+h) - f(x-h)) / (2h)`` are evaluated entrywise, or on a
    deterministic random subset of ``sample_per_tensor`` coordinates per
    tensor when given. Relative error denominators are guarded by
    ``max(|a|, |b|, 1e-8)``.

    Returns a dict with ``max_rel_err`` and per-tensor entries of
    ``(coords_checked, max_rel_err)``.
    """
    if h <= 0:
        raise ContractError("grad_check: h must be positive")
    loss, tape = fn()
    if loss.values.shape != ():
        raise ContractError("grad_check: function must return a scalar")
    if not np.isfinite(loss.values):
        raise NumericDomainError("grad_check: non-finite function value")
    grads = backward(tape, loss)
    analytic = [grads[t.node_id].copy() for t in wrt]

    def value_at():
        out, _ = fn()
        v = float(out.values)
        if not math.isfinite(v):
            raise NumericDomainError("grad_check: non-finite function value")
        return v

    report = {}
    max_err = 0.0
    for t, ga in zip(wrt, analytic):
        flat = t.values.reshape(-1)
        n = flat.size
        if sample_per_tensor is None or sample_per_tensor >= n:
            coords = np.arange(n)
        else:
            r = rng if rng is not None else np.random.default_rng(0)
            coords = r.choice(n, size=sample_per_tensor, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = value_at()
            flat[c] = orig - h
            fm = value_at()
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(ga.reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        report[id(t)] = (len(coords), worst)
        max_err = max(max_err, worst)
    report["max_rel_err"] = max_err
    return report
