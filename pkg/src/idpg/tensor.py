"""Dense tensors with tape-based reverse-mode differentiation.

Storage is a numpy array. Parameters are *leaves*: tensors with
``requires_grad=True`` that belong to no tape. Every forward pass owns a
:class:`Tape`; operations record themselves on the tape of their operands,
so two forward passes on two tapes never interfere.

    tape = Tape(np.float64)
    x = tape.tensor([[1.0, 2.0]])
    loss = F.sum(F.matmul(x, w))
    tape.backward(loss)          # w.grad is populated

An operation whose operands carry no tape is evaluated eagerly and records
nothing; its result is a constant.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, RankError

FLOAT32 = np.float32
FLOAT64 = np.float64


def dtype_for(precision):
    """Map a precision flag (32 or 64) to a numpy dtype."""
    if precision in (32, "32", FLOAT32):
        return FLOAT32
    if precision in (64, "64", FLOAT64):
        return FLOAT64
    raise ValueError(f"unsupported precision {precision!r}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(FLOAT64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"zero extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def tape(self):
        return self._tape

    @property
    def is_leaf(self):
        return self._tape is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of the operations of one forward pass."""

    def __init__(self, dtype=FLOAT64):
        self.dtype = np.dtype(dtype)
        self.nodes = []
        self._done = False

    def tensor(self, data):
        """Bind input data to this tape as a constant of the tape's dtype."""
        t = Tensor(np.asarray(data, dtype=self.dtype))
        t._tape = self
        return t

    def record(self, out, parents, backward_fn):
        out = np.asarray(out)
        if out.dtype != self.dtype:
            raise ContractError(
                f"mixed precision on one tape: result {out.dtype}, tape {self.dtype}"
            )
        t = Tensor(out)
        t._tape = self
        if any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._backward = backward_fn
            self.nodes.append(t)
        return t

    def backward(self, loss):
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._done:
            raise ContractError("backward already ran on this tape")
        self._done = True
        if not loss.requires_grad:
            return
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is None:
                    pg = np.asarray(pg, dtype=parent.data.dtype)
                    if parent.grad is None:
                        parent.grad = pg.copy()
                    else:
                        parent.grad = parent.grad + pg
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg


def backward(loss):
    """Run reverse accumulation from a scalar loss on its own tape."""
    if loss._tape is None:
        raise ContractError("loss is not attached to a tape")
    loss._tape.backward(loss)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _find_tape(tensors, tape=None):
    found = tape
    for t in tensors:
        if t._tape is not None:
            if found is None:
                found = t._tape
            elif t._tape is not found:
                raise ContractError("operands belong to different tapes")
    return found


def _op(parents, out, backward_fn, tape=None):
    tape = _find_tape(parents, tape)
    if tape is None:
        return Tensor(out, dtype=np.asarray(out).dtype)
    return tape.record(out, parents, backward_fn)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------


def add(a, b, tape=None):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_check(a, b, "add")
    sa, sb = a.shape, b.shape
    return _op((a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), tape)


def sub(a, b, tape=None):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_check(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _op((a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), tape)


def mul(a, b, tape=None):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_check(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _op((a, b), ad * bd, bw, tape)


def scale(a, c, tape=None):
    c = a.data.dtype.type(c)
    return _op((a,), a.data * c, lambda g: (g * c,), tape)


def tanh(x, tape=None):
    y = np.tanh(x.data)
    return _op((x,), y, lambda g: (g * (1.0 - y * y),), tape)


def relu(x, tape=None):
    mask = x.data > 0
    return _op((x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,), tape)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x, tape=None):
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    y = (xd * cdf).astype(x.dtype)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf)).astype(x.dtype),

    return _op((x,), y, bw, tape)


def exp(x, tape=None):
    y = np.exp(x.data)
    return _op((x,), y, lambda g: (g * y,), tape)


def log(x, tape=None):
    xd = x.data
    return _op((x,), np.log(xd), lambda g: (g / xd,), tape)


def dropout(x, rate, rng, training=True, tape=None):
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return mul(x, Tensor(keep, dtype=x.dtype), tape=tape)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b, tape=None):
    """Matrix product; a 1-d operand acts as a row (left) or column (right) vector.

    Leading dimensions broadcast as in ``np.matmul``.
    """
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data
    if a2.shape[-1] != b2.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    out2 = a2 @ b2
    out = out2
    if b.ndim == 1:
        out = out[..., 0]
    if a.ndim == 1:
        out = out[..., 0, :] if b.ndim > 1 else out[..., 0]

    def bw(g):
        g2 = g.reshape(out2.shape)
        ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(a.shape)
        gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(b.shape)
        return ga, gb

    return _op((a, b), out, bw, tape)


def kron(a, b, tape=None):
    """Kronecker product of two matrices: out[i*r+k, j*s+l] = a[i,j] * b[k,l]."""
    if a.ndim != 2 or b.ndim != 2:
        raise RankError(f"kron needs two matrices, got ranks {a.ndim} and {b.ndim}")
    (p, q), (r, s) = a.shape, b.shape
    ad, bd = a.data, b.data
    out = (ad[:, None, :, None] * bd[None, :, None, :]).reshape(p * r, q * s)

    def bw(g):
        g4 = g.reshape(p, r, q, s)
        return np.einsum("ikjl,kl->ij", g4, bd), np.einsum("ikjl,ij->kl", g4, ad)

    return _op((a, b), out, bw, tape)


# -- reductions and normalisation -----------------------------------------


def sum(x, axis=None, keepdims=False, tape=None):  # noqa: A001
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy(),

    return _op((x,), np.asarray(out, dtype=x.dtype), bw, tape)


def mean(x, axis=None, keepdims=False, tape=None):
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims, tape=tape), 1.0 / n)


def softmax(x, axis=-1, tape=None):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True)),

    return _op((x,), y, bw, tape)


def log_softmax(x, axis=-1, tape=None):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return g - p * g.sum(axis=axis, keepdims=True),

    return _op((x,), y, bw, tape)


LAYER_NORM_EPS = 1e-5


def layer_norm(x, gain, shift, eps=LAYER_NORM_EPS, tape=None):
    """Normalise the last axis to zero mean and unit variance, then apply gain and shift."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty last axis")
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / shift {shift.shape} do not match last axis {d}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _op((x, gain, shift), out.astype(x.dtype), bw, tape)


# -- shape manipulation -----------------------------------------------------


def reshape(x, shape, tape=None):
    old = x.shape
    out = x.data.reshape(shape)
    return _op((x,), out, lambda g: (g.reshape(old),), tape)


def transpose(x, axes=None, tape=None):
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _op((x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),), tape)


def swapaxes(x, a1, a2, tape=None):
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes, tape)


def getitem(x, index, tape=None):
    """Indexing (basic slices or integer arrays); gradients scatter-add back."""
    shape, dtype = x.shape, x.dtype
    out = x.data[index]

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return full,

    return _op((x,), np.array(out, dtype=dtype), bw, tape)


def concat(tensors, axis=0, tape=None):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _op(tuple(tensors), out, bw, tape)


def stack(tensors, axis=0, tape=None):
    tensors = list(tensors)
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:], tape) for t in tensors]
    return concat(expanded, axis=axis, tape=tape)
