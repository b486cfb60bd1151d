"""Dense tensors with reverse-mode automatic differentiation.

Each differentiable primitive records a node (operands, backward rule, a
global sequence number) on its output.  ``backward`` gathers the nodes
reachable from a scalar loss into a :class:`GradTape`, ordered by descending
sequence number, which is exactly the reverse of recording order, and replays
it once.  Replayed nodes are marked consumed; a second ``backward`` through
them raises instead of silently double-counting.

Only scalar-vs-tensor broadcasting is supported.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording on the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("seq", "inputs", "backward", "consumed")

    def __init__(self, inputs, backward):
        self.seq = next(_seq)
        self.inputs = inputs
        self.backward = backward
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=dtype or (data.dtype if data.dtype in (np.float32, np.float64)
                                                              else DEFAULT_DTYPE))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    @classmethod
    def _result(cls, data: np.ndarray, inputs: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._node = None
        out.requires_grad = False
        if _grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._node = _Node(tuple(inputs), backward)
        return out

    # ---- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # ---- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("division is only defined by a python scalar")
        return div_scalar(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _raise_nonscalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced a non-finite value")
    return arr


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


class GradTape:
    """The recorded operations reachable from one loss, in replay order."""

    def __init__(self, entries):
        self.entries = entries  # list of (output tensor, node), reverse recording order

    def __len__(self):
        return len(self.entries)

    @classmethod
    def collect(cls, loss: Tensor) -> "GradTape":
        seen = set()
        entries = []
        stack = [loss]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            if node.consumed:
                raise ContractError("graph already replayed by an earlier backward(); re-run the forward pass")
            seen.add(id(node))
            entries.append((t, node))
            stack.extend(node.inputs)
        entries.sort(key=lambda e: -e[1].seq)
        return cls(entries)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if not loss.requires_grad:
            raise ContractError("backward() on a tensor with an empty tape")
        _accumulate_leaf(loss, seed)
        return
    tape = GradTape.collect(loss)
    grads = {id(loss): seed}
    for out, node in tape.entries:
        node.consumed = True
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                _accumulate_leaf(inp, ig)
            else:
                k = id(inp)
                grads[k] = grads[k] + ig if k in grads else ig
    # drop references so intermediate activations can be freed
    for _, node in tape.entries:
        node.inputs = ()
        node.backward = None


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return "same"
    if _is_scalar(b):
        return "b_scalar"
    if _is_scalar(a):
        return "a_scalar"
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting)")


def _scalar_of(t: Tensor, like: np.ndarray):
    return t.data.reshape(()).astype(like.dtype, copy=False)


def _sum_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum(), dtype=t.data.dtype).reshape(t.shape)


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return Tensor._result(a.data + a.data.dtype.type(c), (a,), lambda g: (g,))
    a = as_tensor(a)
    kind = _binary_shapes(a, b, "add")
    if kind == "same":
        return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g))
    if kind == "b_scalar":
        return Tensor._result(a.data + _scalar_of(b, a.data), (a, b), lambda g: (g, _sum_to(g, b)))
    return add(b, a)


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    return add(a, neg(b) if isinstance(b, Tensor) else -float(b))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(float(b))
        return Tensor._result(a.data * c, (a,), lambda g: (g * c,))
    kind = _binary_shapes(a, b, "mul")
    if kind == "same":
        ad, bd = a.data, b.data
        return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    if kind == "b_scalar":
        ad, c = a.data, _scalar_of(b, a.data)
        return Tensor._result(ad * c, (a, b), lambda g: (g * c, _sum_to(g * ad, b)))
    return mul(b, a)


def div_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if c == 0.0:
        raise NumericError("division by zero scalar")
    return mul(a, 1.0 / c)


@contextmanager
def frozen_relu(masks: list, record: bool = False):
    """Record (``record=True``) or replay the activation patterns of every ``relu``.

    Replaying fixes each ReLU to the pattern seen at recording time, in call
    order, which makes a piecewise-linear network smooth around that point.
    Finite-difference Hessians need this: otherwise any pre-activation that
    crosses zero inside the step adds an O(1/step) jump.
    """
    prev = getattr(_state, "relu_masks", None)
    _state.relu_masks = (masks, record, [0])
    try:
        yield masks
    finally:
        _state.relu_masks = prev


def _relu_mask(a: Tensor) -> np.ndarray:
    frozen = getattr(_state, "relu_masks", None)
    if frozen is None:
        return a.data > 0
    masks, record, pos = frozen
    if record:
        masks.append(a.data > 0)
        return masks[-1]
    if pos[0] >= len(masks) or masks[pos[0]].shape != a.shape:
        raise ContractError("replayed relu pattern does not match the recorded forward pass")
    pos[0] += 1
    return masks[pos[0] - 1]


def relu(a: Tensor) -> Tensor:
    mask = _relu_mask(a)
    return Tensor._result(np.where(mask, a.data, 0).astype(a.data.dtype, copy=False), (a,),
                          lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = _finite(np.exp(a.data), "exp")
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    x = a.data
    return Tensor._result(np.log(x), (a,), lambda g: (g / x,))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._result(out, (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis), 1.0 / n)


def softmax(a: Tensor, dim: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=dim, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=dim, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=dim, keepdims=True)),)

    return Tensor._result(p, (a,), bw)


def log_softmax(a: Tensor, dim: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=dim, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=dim, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=dim, keepdims=True),)

    return Tensor._result(out, (a,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits[N, K]`` against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.data.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return Tensor._result(_finite(loss, "cross_entropy"), (logits,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take(a: Tensor, index) -> Tensor:
    """Gather elements of a 1-D tensor; ``index`` may be an int or int array."""
    if a.ndim != 1:
        raise DimensionError("take expects a 1-D tensor")
    idx = np.asarray(index, dtype=np.int64)
    n = a.shape[0]

    def bw(g):
        out = np.zeros(n, dtype=a.data.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._result(a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._result(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = _finite(ad @ bd, "matmul")
    return Tensor._result(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x[N, in] @ w[out, in].T + b[out]``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data
    _finite(out, "linear")

    def bw(g):
        grads = (g @ wd, g.T @ xd)
        return grads + ((g.sum(axis=0),) if b is not None else ())

    inputs = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, inputs, bw)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, ``x[N, C, H, W]`` with ``w[F, C, kh, kw]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D operands, got {x.shape} and {w.shape}")
    n, c, h, wd_ = x.shape
    f, c2, kh, kw = w.shape
    if c != c2:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {c2}")
    if stride < 1:
        raise ContractError("conv2d stride must be >= 1")
    if kh > h + 2 * pad or kw > wd_ + 2 * pad:
        raise DimensionError("conv2d kernel larger than padded input")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd_ + 2 * pad - kw) // stride + 1
    dt = np.result_type(x.data.dtype, w.data.dtype)
    # im2col in channels-last order: one strided copy per kernel tap
    xh = np.zeros((n, h + 2 * pad, wd_ + 2 * pad, c), dtype=dt)
    xh[:, pad:pad + h, pad:pad + wd_, :] = x.data.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=dt)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xh[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(f, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = _finite(out, "conv2d").reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    xh_shape = xh.shape
    del xh

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (g2.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
            gxh = np.zeros(xh_shape, dtype=dt)
            for i in range(kh):
                for j in range(kw):
                    gxh[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = np.ascontiguousarray(gxh[:, pad:pad + h, pad:pad + wd_, :].transpose(0, 3, 1, 2))
        grads = (gx, np.ascontiguousarray(gw))
        return grads + ((g2.sum(axis=0),) if b is not None else ())

    inputs = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, inputs, bw)


def custom_op(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Record an operation defined outside this module (e.g. fake quantization)."""
    return Tensor._result(data, tuple(inputs), backward)


def zeros(shape, dtype=None, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def grad_at(fn: Callable[[Sequence[Tensor]], Tensor], values: Sequence[np.ndarray]):
    """Evaluate ``fn`` and its gradient at fresh leaves built from ``values``.

    Used for finite-difference Hessian-vector products: the caller's own
    tensors are never touched, so concurrent evaluations do not interfere.
    Returns ``(loss_value, [grad arrays])``.
    """
    leaves = [Tensor(v, requires_grad=True, dtype=np.asarray(v).dtype) for v in values]
    loss = fn(leaves)
    backward(loss)
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]
    return loss.item(), grads
