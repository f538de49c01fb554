"""Small reverse-mode automatic differentiation engine over float64 numpy arrays.

Every differentiable primitive produces a :class:`Tensor` holding its parents and
a closure mapping the upstream gradient to one gradient per parent. Calling
:func:`backward` on a scalar walks the recorded graph in reverse topological
order (the tape) and accumulates gradients into leaf tensors.

Example::

    >>> w = Tensor([[0.0]], requires_grad=True)
    >>> loss = sigmoid(w).sum()
    >>> backward(loss)
    >>> float(w.grad[0, 0])
    0.25
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation forwards)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    # make ``ndarray <op> Tensor`` defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def matmul(a, b) -> Tensor:
    """Matrix product of ``a`` (m x k) and ``b`` (k x n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), _back)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sign,))


def clip(a, low: float, high: float) -> Tensor:
    """Clamp values; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)
    return _node(np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def getitem(a, index) -> Tensor:
    """Basic or integer-array indexing; gradient scatters back with ``np.add.at``."""
    a = as_tensor(a)
    shape = a.shape

    def _back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), _back)


def take_rows(a, rows: np.ndarray) -> Tensor:
    """Gather rows of a 2-d tensor (e.g. per-cluster parameters for a batch)."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    shape = a.shape

    def _back(g):
        full = np.zeros(shape)
        np.add.at(full, rows, g)
        return (full,)

    return _node(a.data[rows], (a,), _back)


# --------------------------------------------------------------- activations


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(a) -> Tensor:
    """Row-wise softmax over the last axis."""
    a = as_tensor(a)
    out = np.exp(_log_softmax(a.data))

    def _back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), _back)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    out = _log_softmax(a.data)
    probs = np.exp(out)
    return _node(out, (a,), lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "softmax": softmax}


def activation(x, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(
            f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}"
        ) from None
    return fn(x)


# ----------------------------------------------------------- fused losses


def cross_entropy_logits(logits, labels: np.ndarray) -> Tensor:
    """Mean categorical cross-entropy of integer ``labels`` under softmax(``logits``).

    Softmax and log are fused so the backward rule is ``(softmax - onehot) / n``.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"class labels must lie in [0, {k}), got range "
                            f"[{labels.min()}, {labels.max()}]")
    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def _back(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _node(np.asarray(loss), (logits,), _back)


def bce_logits(logits, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy computed from logits (softplus form)."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    x = logits.data
    n = x.size
    loss = (np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))).mean()
    return _node(np.asarray(loss), (logits,), lambda g: ((_stable_sigmoid(x) - t) * (g / n),))


# ----------------------------------------------------- adversarial routing


def gradient_reversal(x, strength: float = 1.0) -> Tensor:
    """Identity on the forward pass; multiplies the incoming gradient by ``-strength``."""
    if not strength > 0:
        raise ConfigurationError(f"gradient reversal strength must be > 0, got {strength}")
    x = as_tensor(x)
    return _node(x.data.copy(), (x,), lambda g: (-strength * g,))


# ------------------------------------------------------------------ tape


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Intermediate gradients live in a local map, so calling ``backward`` twice on
    the same graph adds the leaf gradients twice and nothing else. Returns the
    map from ``id(leaf)`` to the gradient contributed by this call.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[id(node)] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def grad_of(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` via one backward pass."""
    t = Tensor(np.array(x, dtype=np.float64, copy=True), requires_grad=True)
    out = f(t)
    if out.data.size != 1:
        raise ContractError(f"function output must be scalar, got shape {out.shape}")
    backward(out)
    return t.grad if t.grad is not None else np.zeros_like(t.data)


def finite_difference_check(
    f: Callable[[Tensor], Tensor], x, eps: float = 1e-5
) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``."""
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x = np.array(x, dtype=np.float64, copy=True)
    analytic = grad_of(f, x)
    numeric = np.empty_like(x)
    flat, nflat = x.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            up = f(Tensor(x)).item()
        flat[i] = orig - eps
        with no_grad():
            down = f(Tensor(x)).item()
        flat[i] = orig
        nflat[i] = (up - down) / (2.0 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def parameters_finite_difference_check(
    loss_fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5
) -> float:
    """Finite-difference check of ``loss_fn`` against every parameter in ``params``."""
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = loss_fn().item()
            flat[i] = orig - eps
            with no_grad():
                down = loss_fn().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * eps)
        err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(analytic.reshape(-1)))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
