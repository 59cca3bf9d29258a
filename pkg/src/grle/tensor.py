"""Reverse-mode autodiff on dense numpy storage.

A Tensor wraps a C-contiguous float32/float64 ndarray. Primitives record
nodes on the active Tape when gradients are enabled and any input requires
them; backward() replays the tape in reverse and accumulates exact
vector-Jacobian products into the .grad slots of requires_grad tensors.

Broadcasting is restricted to leading batch dimensions: two operands are
compatible only when one shape is a suffix of the other. This keeps every
backward rule a plain sum over the added leading axes.
"""

import contextlib

import numpy as np

from . import kernels as K

DEFAULT_DTYPE = np.float32
_FLOATS = (np.float32, np.float64)


class Tensor:
    """Dense array with an optional gradient slot and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "tape_node")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOATS:
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        # asarray(order="C") forces contiguity but, unlike ascontiguousarray,
        # keeps 0-d shapes intact.
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape_node = None

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

    def item(self):
        return self.data.item()

    def detach(self):
        """Constant view of the same values, disconnected from any tape."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other, self))

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    """One recorded primitive application: inputs, output, and its VJP."""

    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs, output, vjp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Topologically ordered record of primitive applications."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def reset(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_TAPE_STACK = [Tape()]
_GRAD_ENABLED = True
_DETERMINISTIC = False


def current_tape():
    return _TAPE_STACK[-1]


def reset_tape():
    current_tape().reset()


@contextlib.contextmanager
def use_tape(tape):
    _TAPE_STACK.append(tape)
    try:
        yield tape
    finally:
        _TAPE_STACK.pop()


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


def set_deterministic(flag):
    """Force sequential execution in components that could parallelize."""
    global _DETERMINISTIC
    _DETERMINISTIC = bool(flag)


def is_deterministic():
    return _DETERMINISTIC


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _result_dtype(*tensors):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"mixed tensor dtypes {sorted(d.name for d in dtypes)}; cast explicitly")
    return dtypes.pop()


def _make(data, inputs, vjp):
    rg = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=rg, dtype=data.dtype)
    if rg:
        node = Node(tuple(inputs), out, vjp)
        current_tape().nodes.append(node)
        out.tape_node = node
    return out


def backward(loss):
    """Reverse-mode sweep from a scalar loss over the active tape.

    Visits each tape node at most once. Repeated calls without a tape reset
    accumulate into .grad (documented behaviour); reset the tape between
    training steps.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor loss")
    if loss.shape != ():
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.tape_node is None:
        raise ValueError("loss is not connected to the active tape (detached or constant)")
    pending = {id(loss): np.ones((), dtype=loss.data.dtype)}
    holders = {id(loss): loss}
    for node in reversed(current_tape().nodes):
        gy = pending.get(id(node.output))
        if gy is None:
            continue
        grads = node.vjp(gy)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            k = id(t)
            if k in pending:
                pending[k] = pending[k] + g
            else:
                pending[k] = g
                holders[k] = t
    for k, t in holders.items():
        g = pending[k]
        t.grad = np.array(g) if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# Shape helpers

def _check_suffix(sa, sb):
    """Suffix-broadcast check; returns the output shape or raises."""
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ValueError(f"shapes {sa} and {sb} differ beyond leading batch dimensions")


def _reduce_to(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# Elementwise primitives

def add(a, b):
    _result_dtype(a, b)
    _check_suffix(a.shape, b.shape)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b):
    _result_dtype(a, b)
    _check_suffix(a.shape, b.shape)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b):
    _result_dtype(a, b)
    _check_suffix(a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _make(ad * bd, (a, b), vjp)


def div(a, b):
    _result_dtype(a, b)
    _check_suffix(a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        return _reduce_to(g / bd, a.shape), _reduce_to(-g * ad / (bd * bd), b.shape)

    return _make(ad / bd, (a, b), vjp)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a):
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    y = np.sqrt(a.data)
    return _make(y, (a,), lambda g: (g * (0.5 / y),))


def clamp_min(a, floor):
    ad = a.data
    mask = ad >= floor

    def vjp(g):
        return (g * mask,)

    return _make(np.maximum(ad, floor), (a,), vjp)


def log_sigmoid(a):
    """log(sigmoid(x)), computed as -log1p(exp(-x)) without overflow."""
    ad = a.data
    y = -np.logaddexp(np.zeros((), dtype=ad.dtype), -ad)

    def vjp(g):
        # d/dx log(sigmoid(x)) = sigmoid(-x)
        return (g / (1.0 + np.exp(ad)),)

    return _make(y, (a,), vjp)


def gelu(a):
    ad = a.data

    def vjp(g):
        return (K.gelu_backward(ad, g),)

    return _make(K.gelu(ad), (a,), vjp)


# ---------------------------------------------------------------------------
# Structural primitives

def reshape(a, shape):
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), vjp)


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), vjp)


def concat(tensors, axis=0):
    tensors = list(tensors)
    _result_dtype(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(sizes))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def stack(tensors, axis=0):
    tensors = list(tensors)
    _result_dtype(*tensors)

    def vjp(g):
        return tuple(np.ascontiguousarray(np.take(g, i, axis=axis)) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, vjp)


def slice_axis(a, axis, start, stop):
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    full_shape = a.shape

    def vjp(g):
        out = np.zeros(full_shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return _make(np.ascontiguousarray(a.data[index]), (a,), vjp)


def embedding(table, ids):
    """Row lookup table[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"token id out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}"
        )
    tshape = table.shape

    def vjp(g):
        gt = np.zeros(tshape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tshape[-1]))
        return (gt,)

    return _make(np.ascontiguousarray(table.data[ids]), (table,), vjp)


def gather(a, indices, axis):
    """take_along_axis; indices must have a.ndim dimensions."""
    indices = np.asarray(indices)
    ashape = a.shape

    def vjp(g):
        out = np.zeros(ashape, dtype=g.dtype)
        ix = list(np.indices(indices.shape))
        ix[axis] = indices
        np.add.at(out, tuple(ix), g)
        return (out,)

    return _make(np.ascontiguousarray(np.take_along_axis(a.data, indices, axis=axis)), (a,), vjp)


def masked_fill(a, mask, value):
    """Replace entries where mask is true by a constant; grads pass elsewhere."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    keep = ~mask

    def vjp(g):
        return (g * keep,)

    return _make(np.where(mask, np.asarray(value, dtype=a.data.dtype), a.data), (a,), vjp)


# ---------------------------------------------------------------------------
# Reductions

def tsum(a, axis=None, keepdims=False):
    ashape = a.shape

    def vjp(g):
        if axis is None:
            return (np.full(ashape, g, dtype=g.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.ascontiguousarray(np.broadcast_to(gg, ashape)),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(np.asarray(1.0 / count, dtype=a.data.dtype)))


# ---------------------------------------------------------------------------
# Rowwise kernels (softmax family, normalization)

def _to_rows(arr, axis):
    moved = np.moveaxis(arr, axis, -1)
    return np.ascontiguousarray(moved).reshape(-1, moved.shape[-1]), moved.shape


def _from_rows(rows, moved_shape, axis):
    return np.ascontiguousarray(np.moveaxis(rows.reshape(moved_shape), -1, axis))


def _check_axis(a, axis):
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"axis {axis} out of range for shape {a.shape}")


def softmax(a, axis=-1):
    _check_axis(a, axis)
    rows, mshape = _to_rows(a.data, axis)
    yrows = K.softmax_rows(rows)
    y = _from_rows(yrows, mshape, axis)

    def vjp(g):
        grows, _ = _to_rows(g, axis)
        return (_from_rows(K.softmax_rows_backward(yrows, grows), mshape, axis),)

    return _make(y, (a,), vjp)


def log_softmax(a, axis=-1):
    _check_axis(a, axis)
    rows, mshape = _to_rows(a.data, axis)
    yrows = K.log_softmax_rows(rows)
    y = _from_rows(yrows, mshape, axis)

    def vjp(g):
        grows, _ = _to_rows(g, axis)
        return (_from_rows(K.log_softmax_rows_backward(yrows, grows), mshape, axis),)

    return _make(y, (a,), vjp)


def rms_norm(a, gain, eps=1e-6):
    """Scale-only normalization over the last axis: x / rms(x) * gain."""
    if gain.shape != a.shape[-1:]:
        raise ValueError(f"gain shape {gain.shape} does not match feature size {a.shape[-1:]}")
    _result_dtype(a, gain)
    rows = a.data.reshape(-1, a.shape[-1])
    gdata = gain.data
    yrows, inv = K.rms_norm_rows(rows, gdata, eps)

    def vjp(g):
        grows = g.reshape(rows.shape)
        gx, ggain = K.rms_norm_rows_backward(rows, gdata, inv, grows)
        return gx.reshape(a.shape), ggain

    return _make(yrows.reshape(a.shape), (a, gain), vjp)


def l2_normalize(a, axis=-1):
    """Rows scaled to unit Euclidean norm; raises on a zero-norm row."""
    _check_axis(a, axis)
    norms = np.linalg.norm(a.data, axis=axis, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize a zero-norm vector")
    y = a.data / norms

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * dot) / norms,)

    return _make(y, (a,), vjp)


# ---------------------------------------------------------------------------
# Matrix multiply

def matmul(a, b):
    """Stacked matrix product (..., m, k) @ (..., k, n).

    Batch dimensions follow the suffix rule: equal, or absent on one side.
    """
    _result_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs 2-D or higher operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    _check_suffix(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _reduce_to(np.matmul(g, bd.swapaxes(-1, -2)), a.shape)
        gb = _reduce_to(np.matmul(ad.swapaxes(-1, -2), g), b.shape)
        return np.ascontiguousarray(ga), np.ascontiguousarray(gb)

    return _make(np.matmul(ad, bd), (a, b), vjp)
