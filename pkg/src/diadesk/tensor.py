"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op builds a node holding references to its parents and a closure that
maps the output gradient to parent gradients. ``backward`` orders the nodes
reachable from a scalar loss into a :class:`ComputationTape` and replays it
in reverse.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError, NonFiniteError, UsageError

NORMALIZE_EPS = 1e-12
LAYER_NORM_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _check: bool = True):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if _check and not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # ---- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data, _check=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # ---- operator sugar ------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _result(data: np.ndarray, parents: Sequence, backward_fn: Callable, op: str) -> Tensor:
    # one reduction: any NaN/Inf (or overflow to Inf) poisons the sum
    if not math.isfinite(data.sum()):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor(data, _check=False)
    out.op = op
    tracked = tuple(p for p in parents if isinstance(p, Tensor))
    if _grad_enabled and any(p.requires_grad for p in tracked):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---- the tape -------------------------------------------------------------
class ComputationTape:
    """Nodes reachable from a root, in topological order (inputs first)."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; recursion depth would track graph depth
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, seed: np.ndarray, visit: Callable[[Tensor], None] | None = None) -> None:
        grads: dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if visit is not None:
                visit(node)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor, grad=None) -> ComputationTape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if grad is None:
        if loss.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    else:
        seed = np.broadcast_to(_data(grad), loss.shape).astype(np.float64)
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any tensor that requires grad")
    tape = ComputationTape(loss)
    tape.replay(seed)
    return tape


# ---- elementwise arithmetic --------------------------------------------------
def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    sa, sb = ad.shape, bd.shape
    return _result(ad + bd, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    sa, sb = ad.shape, bd.shape
    return _result(ad - bd, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad / bd
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def neg(a) -> Tensor:
    return _result(-_data(a), (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    ad = _data(a)
    if exponent == 2:
        return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "pow")
    return _result(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    out = np.exp(_data(a))
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    ad = _data(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _result(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(_data(a))
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    out = np.tanh(_data(a))
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    ad = _data(a)
    mask = ad > 0
    return _result(np.where(mask, ad, 0.0), (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    # tanh approximation
    x = _data(a)
    inner = _GELU_C * (x + 0.044715 * x * x * x)  # x**3 is far slower in numpy
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _result(out, (a,), bw, "gelu")


def clip(a, lo: float, hi: float) -> Tensor:
    ad = _data(a)
    mask = (ad >= lo) & (ad <= hi)
    return _result(np.clip(ad, lo, hi), (a,), lambda g: (g * mask,), "clip")


def arccos(a) -> Tensor:
    ad = _data(a)
    if np.any(np.abs(ad) > 1.0):
        raise DegenerateInputError("arccos argument outside [-1, 1]")

    def bw(g):
        denom = np.sqrt(np.maximum(1.0 - ad * ad, 0.0))
        safe = denom > 0
        return (np.where(safe, -g / np.where(safe, denom, 1.0), 0.0),)

    return _result(np.arccos(ad), (a,), bw, "arccos")


# ---- reductions and shape ops -------------------------------------------------
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    ad = _data(a)
    shape = ad.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(ad, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    ad = _data(a)
    if axis is None:
        count = ad.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([ad.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    ad = _data(a)
    old = ad.shape
    return _result(ad.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    ad = _data(a)
    if axes is None:
        axes = tuple(reversed(range(ad.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(ad.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    axes = list(range(_data(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)


def getitem(a, index) -> Tensor:
    ad = _data(a)
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(ad)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(ad[index], (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    arrays = [_data(t) for t in tensors]
    sizes = [x.shape[axis] for x in arrays]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate(arrays, axis=axis), tuple(tensors), bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    expanded = [reshape(t, _expand_shape(_data(t).shape, axis)) for t in tensors]
    return concat(expanded, axis=axis)


def _expand_shape(shape, axis):
    nd = len(shape) + 1
    axis = axis % nd
    return shape[:axis] + (1,) + shape[axis:]


# ---- linear algebra -------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules; 1-D operands are promoted."""
    ad, bd = _data(a), _data(b)
    if ad.ndim == 0 or bd.ndim == 0:
        raise DimensionError("matmul needs at least 1-D operands")
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")
    if ad.ndim == 1:
        out = matmul(reshape(a, (1, ad.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if bd.ndim == 1:
        out = matmul(a, reshape(b, (bd.shape[0], 1)))
        return reshape(out, out.shape[:-1])

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), bw, "matmul")


# ---- normalizations ---------------------------------------------------------------
def softmax(a, axis: int = -1) -> Tensor:
    ad = _data(a)
    if ad.shape and ad.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    z = np.exp(ad - ad.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    ad = _data(a)
    shifted = ad - ad.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), bw, "log_softmax")


def norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the gradient at a zero vector is taken as 0."""
    ad = _data(a)
    n = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * ad / safe, 0.0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _result(out, (a,), bw, "norm")


def l2_normalize(a, axis: int = -1, eps: float = NORMALIZE_EPS) -> Tensor:
    """Scale to unit Euclidean norm along ``axis``.

    Raises DegenerateInputError if any slice has norm <= eps.
    """
    ad = _data(a)
    n = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    if np.any(n <= eps):
        raise DegenerateInputError(f"cannot normalize a vector with norm <= {eps}")
    out = ad / n

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / n,)

    return _result(out, (a,), bw, "l2_normalize")


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit (population) variance, then scale and shift."""
    xd, gd = _data(x), _data(gamma)
    d = xd.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs at least two features")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + _data(beta)

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gd.shape)
        gbeta = _unbroadcast(g, _data(beta).shape)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), bw, "layer_norm")


# ---- helpers -----------------------------------------------------------------------
def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def parameters_grad_zero(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
