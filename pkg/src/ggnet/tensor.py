"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation returns a new :class:`Tensor`; when any input requires a
gradient the result records its parents and a backward closure.  Calling
:meth:`Tensor.backward` on a scalar linearises the recorded graph into a
:class:`Tape` (topological order) and replays it in reverse, visiting every
node exactly once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .exceptions import InvalidKernelError, NumericError, ShapeError

__all__ = [
    "Tensor", "Tape", "no_grad", "as_tensor",
    "add", "sub", "mul", "div", "neg", "exp", "log", "abs_", "relu", "elu",
    "tanh", "sigmoid", "matmul", "sum_", "mean", "reshape", "transpose",
    "broadcast_to", "concat", "getitem", "take", "scatter_add", "softmax_rows",
    "masked_affine", "shift_sum", "stack_taps", "conv1d_centered", "propagate", "grad_check",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad, shape):
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An immutable float64 array that may participate in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        Tape.record(self).backward(self, np.asarray(grad, dtype=np.float64))

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data if type(data) is np.ndarray else np.asarray(data, dtype=np.float64)
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


class Tape:
    """Topologically ordered record of the nodes feeding one output."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def record(cls, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def backward(self, root, seed):
        grads = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / b.data ** 2, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data / b.data, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def abs_(a):
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def elu(a):
    a = as_tensor(a)
    em1 = np.expm1(np.minimum(a.data, 0.0))
    out = np.maximum(a.data, 0.0) + em1
    # em1 is 0 for positive inputs, so em1 + 1 is the derivative everywhere
    return _node(out, (a,), lambda g: (g * (em1 + 1.0),), "elu")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# -- linear algebra and shape ------------------------------------------------

def matmul(a, b):
    """Broadcasting matrix product over the last two axes (both operands >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        flat = a.ndim > 2 and b.ndim == 2
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if flat:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    if a.ndim > 2 and b.ndim == 2:
        data = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + b.shape[-1:])
    else:
        data = np.matmul(a.data, b.data)
    return _node(data, (a, b), bw, "matmul")


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _node(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, old),),
                 "broadcast")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(data, tuple(tensors), bw, "concat")


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(a, index):
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def bw(g):
        out = np.zeros(a.shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _node(np.array(a.data[index]), (a,), bw, "getitem")


def take(a, indices, axis=0):
    """Gather slices of ``a`` along ``axis``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)

    def bw(g):
        out = np.zeros(a.shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices.ravel(),
                  np.moveaxis(g, list(range(axis, axis + indices.ndim)),
                              list(range(indices.ndim))).reshape((-1,) + moved.shape[1:]))
        return (out,)

    return _node(np.take(a.data, indices, axis=axis), (a,), bw, "take")


def scatter_add(base, indices, values, axis=0):
    """Return ``base`` with ``values`` added at ``indices`` along ``axis``."""
    base, values = as_tensor(base), as_tensor(values)
    indices = np.asarray(indices, dtype=np.intp)
    out = base.data.copy()
    np.add.at(np.moveaxis(out, axis, 0), indices, np.moveaxis(values.data, axis, 0))

    def bw(g):
        return g, np.take(g, indices, axis=axis)

    return _node(out, (base, values), bw, "scatter_add")


def softmax_rows(m):
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    m = as_tensor(m)
    z = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (m,), bw, "softmax")


# -- structured operators ----------------------------------------------------

def masked_affine(h, weight, m=None, weight_m=None, offset=None):
    """``h @ weight + m * weight_m + offset`` for ``h`` of shape ``(C, ..., F)``.

    ``weight`` is ``(F, O)`` or per-slice ``(C, F, O)``.  ``m`` is a constant
    ``(C, ..., 1)`` array and ``weight_m`` has shape ``(1, O)`` or ``(C, 1, O)``.
    ``offset`` is any tensor broadcastable to the output.  Fusing the terms
    avoids full-size temporaries on both passes.
    """
    h, weight = as_tensor(h), as_tensor(weight)
    grouped = weight.ndim == 3
    C, F = h.shape[0], h.shape[-1]
    O = weight.shape[-1]
    if weight.shape[-2] != F or (grouped and weight.shape[0] != C):
        raise ShapeError(f"cannot apply weight {weight.shape} to input {h.shape}")
    out_shape = h.shape[:-1] + (O,)
    hf = h.data.reshape(C, -1, F) if grouped else h.data.reshape(-1, F)
    out = np.matmul(hf, weight.data).reshape(out_shape)
    parents = [h, weight]
    if m is not None:
        weight_m = as_tensor(weight_m)
        m = np.asarray(m, dtype=np.float64)
        mf = m.reshape(C, -1, 1) if grouped else m.reshape(-1, 1)
        out += (mf * weight_m.data).reshape(out_shape)
        parents.append(weight_m)
    if offset is not None:
        offset = as_tensor(offset)
        out += offset.data
        parents.append(offset)

    def bw(g):
        gf = g.reshape(C, -1, O) if grouped else g.reshape(-1, O)
        sw = np.swapaxes(weight.data, -1, -2)
        grads = [
            np.matmul(gf, sw).reshape(h.shape) if h.requires_grad else None,
            np.matmul(np.swapaxes(hf, -1, -2), gf) if weight.requires_grad else None,
        ]
        if m is not None:
            gm = np.matmul(np.swapaxes(mf, -1, -2), gf) if weight_m.requires_grad else None
            grads.append(None if gm is None else gm.reshape(weight_m.shape))
        if offset is not None:
            grads.append(_unbroadcast(g, offset.shape) if offset.requires_grad else None)
        return tuple(grads)

    return _node(out, tuple(parents), bw, "masked_affine")


def shift_sum(z, k, dilation=1):
    """Combine per-tap projections along time: ``out[t] = sum_j z[t + (j - (k-1)/2) d, tap j]``.

    ``z`` has shape ``(..., T, k * H)`` holding the ``k`` tap blocks side by
    side; reads outside ``[0, T)`` contribute zero.
    """
    z = as_tensor(z)
    if k < 1 or k % 2 == 0:
        raise InvalidKernelError(f"kernel length must be odd, got {k}")
    if dilation < 1:
        raise InvalidKernelError(f"dilation must be >= 1, got {dilation}")
    T, kh = z.shape[-2:]
    if kh % k:
        raise ShapeError(f"last axis {kh} is not a multiple of k={k}")
    H = kh // k
    half = (k - 1) // 2
    spans = []
    for j in range(k):
        off = (j - half) * dilation
        lo, hi = max(0, -off), min(T, T - off)
        if lo < hi:
            spans.append((j, off, lo, hi))
    out = np.zeros(z.shape[:-1] + (H,))
    for j, off, lo, hi in spans:
        out[..., lo:hi, :] += z.data[..., lo + off:hi + off, j * H:(j + 1) * H]

    def bw(g):
        gz = np.zeros(z.shape)
        for j, off, lo, hi in spans:
            gz[..., lo + off:hi + off, j * H:(j + 1) * H] = g[..., lo:hi, :]
        return (gz,)

    return _node(out, (z,), bw, "shift_sum")


def stack_taps(kernel):
    """``(..., k, F, H)`` filter bank -> ``(..., F, k * H)`` for use with :func:`shift_sum`."""
    kernel = as_tensor(kernel)
    k, F, H = kernel.shape[-3:]
    lead = kernel.shape[:-3]
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    return reshape(transpose(kernel, perm), lead + (F, k * H))


def conv1d_centered(x, kernel, dilation=1):
    """Zero-padded 'same' 1-D convolution along axis -2.

    ``x`` has shape ``(..., T, F)``.  ``kernel`` is either ``(k, F, H)``,
    shared by every leading index, or ``(C, k, F, H)``, in which case
    ``x.shape[0] == C`` and slice ``c`` of the input uses its own filter bank.
    Tap ``j`` reads ``x[t + (j - (k-1)/2) * dilation]``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim not in (3, 4):
        raise ShapeError(f"kernel must be 3-D or 4-D, got {kernel.shape}")
    k, f_in, _ = kernel.shape[-3:]
    if k % 2 == 0:
        raise InvalidKernelError(f"kernel length must be odd, got {k}")
    if dilation < 1:
        raise InvalidKernelError(f"dilation must be >= 1, got {dilation}")
    if x.ndim < 2 or x.shape[-1] != f_in:
        raise ShapeError(f"input feature width {x.shape[-1:]} does not match kernel {f_in}")
    taps = stack_taps(kernel)
    if kernel.ndim == 4:
        C = kernel.shape[0]
        if x.ndim < 3 or x.shape[0] != C:
            raise ShapeError("grouped kernel needs x.shape[0] == kernel.shape[0]")
        flat = reshape(x, (C, -1, f_in))
        z = reshape(matmul(flat, taps), x.shape[:-1] + (taps.shape[-1],))
    else:
        z = matmul(reshape(x, (-1, f_in)), taps)
        z = reshape(z, x.shape[:-1] + (taps.shape[-1],))
    return shift_sum(z, k, dilation)


def propagate(adj, x, axis=0):
    """Mix ``x`` along ``axis`` with a square matrix: ``y[..i..] = sum_j adj[i, j] x[..j..]``."""
    adj, x = as_tensor(adj), as_tensor(x)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ShapeError(f"adjacency must be square, got {adj.shape}")
    V = adj.shape[0]
    if x.shape[axis] != V:
        raise ShapeError(f"axis {axis} of {x.shape} does not match adjacency size {V}")
    moved = np.moveaxis(x.data, axis, 0)
    rest = moved.shape[1:]
    x2 = moved.reshape(V, -1)
    out = np.moveaxis((adj.data @ x2).reshape((V,) + rest), 0, axis)

    def bw(g):
        g2 = np.moveaxis(g, axis, 0).reshape(V, -1)
        ga = g2 @ x2.T if adj.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = np.moveaxis((adj.data.T @ g2).reshape((V,) + rest), 0, axis)
        return ga, gx

    return _node(out, (adj, x), bw, "propagate")


# -- verification ------------------------------------------------------------

def grad_check(function: Callable, point, epsilon: float = 1e-6) -> float:
    """Compare reverse-mode gradients against central differences.

    ``point`` is a tensor (or array) or a sequence of them; ``function`` is
    called with the same structure and must return a scalar tensor.  Returns
    ``max |analytic - numeric| / max(1, |analytic|)`` over all coordinates.
    """
    if not 1e-8 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon must lie in [1e-8, 1e-4], got {epsilon}")
    single = not isinstance(point, (list, tuple))
    points: Sequence = [point] if single else point
    leaves = [Tensor(np.array(as_tensor(p).data, dtype=np.float64), requires_grad=True)
              for p in points]

    def call():
        out = function(leaves[0]) if single else function(*leaves)
        value = np.asarray(out.data)
        if value.size != 1:
            raise ShapeError("grad_check needs a scalar-valued function")
        if not np.all(np.isfinite(value)):
            raise NumericError("function value is not finite")
        return out

    call().backward()
    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + epsilon
                f_plus = float(call().data)
                flat[i] = orig - epsilon
                f_minus = float(call().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * epsilon)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
