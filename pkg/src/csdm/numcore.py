"""Small reverse-mode autodiff engine on top of numpy float64 arrays.

Only the operations needed by the CTR backbones and the diffusion stack are
provided. Every node keeps a closure that pushes its output gradient back to
its parents; ``Tensor.backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

BCE_EPS = 1e-7


class DimensionError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out the axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): _as_array(grad).reshape(self.shape)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: parameters and user inputs keep their gradient
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if parent.requires_grad:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg

    # arithmetic -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / _as_array(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf with Adam moment buffers."""

    __slots__ = ("name", "m", "v", "step_count")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step_count = 0

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, _parents=tuple(parents) if rg else (), _backward=backward if rg else None)


# elementwise ------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def back(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _node(a.data + b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: ((a, -g),))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def back(g):
        return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))

    return _node(a.data * b.data, (a, b), back)


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: ((a, 2.0 * a.data * g),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: ((a, g * mask),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    y = _stable_sigmoid(a.data)
    return _node(y, (a,), lambda g: ((a, g * y * (1.0 - y)),))


# shape and reductions -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")

    def back(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _node(a.data @ b.data, (a, b), back)


def affine(x, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` for a batch of row vectors."""
    x = _wrap(x)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0] or b.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    y = x.data @ W.data + b.data

    def back(g):
        return ((x, g @ W.data.T), (W, x.data.T @ g), (b, _unbroadcast(g, b.shape)))

    return _node(y, (x, W, b), back)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _node(y, (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return reduce_sum(a, axis=axis) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: ((a, g.reshape(a.shape)),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    y = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(zip(parts, np.split(g, bounds, axis=axis)))

    return _node(y, parts, back)


def stack(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    y = np.stack([p.data for p in parts], axis=axis)

    def back(g):
        return tuple((p, np.take(g, i, axis=axis)) for i, p in enumerate(parts))

    return _node(y, parts, back)


def embedding_bag(table: Tensor, idx: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted sum of table rows.

    ``idx`` is ``[n]`` (plain lookup) or ``[n, k]`` with per-slot ``weights``;
    zero-weight slots act as padding. Backward scatter-adds into the table.
    """
    idx = np.asarray(idx)
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = idx[(idx < 0) | (idx >= vocab)][0]
        raise IndexError(f"index {int(bad)} out of vocabulary of size {vocab}")
    if idx.ndim == 1:
        y = table.data[idx]

        def back(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            return ((table, gt),)

        return _node(y, (table,), back)

    w = np.ones(idx.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    y = np.einsum("nk,nkd->nd", w, table.data[idx])

    def back_bag(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.ravel(), (w[:, :, None] * g[:, None, :]).reshape(-1, table.shape[1]))
        return ((table, gt),)

    return _node(y, (table,), back_bag)


# stochastic -----------------------------------------------------------------------


def dropout(x, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are rescaled by 1/(1-p) so inference is identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = _wrap(x)
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * mask, (x,), lambda g: ((x, g * mask),))


# losses -----------------------------------------------------------------------------


def _check_labels(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    return y


def bce_loss(p_hat, y):
    """Elementwise binary cross entropy on probabilities (numpy, no graph)."""
    y = _check_labels(y)
    p = np.clip(np.asarray(p_hat, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    out = -y * np.log(p) - (1.0 - y) * np.log(1.0 - p)
    return float(out) if out.ndim == 0 else out


def bce_with_logits(logits: Tensor, y) -> Tensor:
    """Mean BCE of sigmoid(logits); the logit gradient is (p_hat - y) / n."""
    y = _check_labels(y).reshape(logits.shape)
    p = _stable_sigmoid(logits.data)
    loss = np.mean(bce_loss(p, y))
    n = logits.data.size
    return _node(np.array(loss), (logits,), lambda g: ((logits, g * (p - y) / n),))


def mse(pred: Tensor, target) -> Tensor:
    """Per-row squared error summed over features, averaged over rows."""
    diff = pred - target
    return reduce_sum(square(diff)) * (1.0 / pred.shape[0])


# optimisation -----------------------------------------------------------------------


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def adam_step(
    params: Sequence[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        p.step_count += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * p.grad
        p.v *= beta2
        p.v += (1.0 - beta2) * p.grad * p.grad
        m_hat = p.m / (1.0 - beta1**p.step_count)
        v_hat = p.v / (1.0 - beta2**p.step_count)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


class Adam:
    """Holds the hyper-parameters; moment state lives on each Parameter."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)


def reset_moments(params: Iterable[Parameter]) -> None:
    for p in params:
        p.m[...] = 0.0
        p.v[...] = 0.0
        p.step_count = 0
        p.zero_grad()


# initialisers -----------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Dense:
    """Affine layer owning its weight and bias parameters."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, name: str):
        self.W = Parameter(glorot_uniform(rng, n_in, n_out), f"{name}.W")
        self.b = Parameter(np.zeros(n_out), f"{name}.b")

    def __call__(self, x) -> Tensor:
        return affine(x, self.W, self.b)

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]
