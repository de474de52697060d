"""Parameter storage, a small array-level reverse-mode tape, AdamW and a
finite-difference gradient checker.

Everything runs in float64. Ops only record a backward closure when at least
one input requires a gradient, so teacher forwards through the same code
leave no graph behind.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp


class NonFiniteError(FloatingPointError):
    def __init__(self, name: str, what: str = "value"):
        super().__init__(f"non-finite {what} in array '{name}'")
        self.name = name


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or bool(parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.value.size != 1:
            raise ValueError("backward() needs a scalar output")
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(value, parents, backward)
    return Tensor(value)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _node(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a) -> Tensor:
    a = _wrap(a)
    return _node(a.value.T, (a,), lambda g: (g.T,))


def affine(x, w, b) -> Tensor:
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    return _node(x.value @ w.value + b.value, (x, w, b),
                 lambda g: (g @ w.value.T, x.value.T @ g, g.sum(axis=0)))


def spmm(m: sp.spmatrix, a) -> Tensor:
    """Constant sparse matrix times tensor."""
    a = _wrap(a)
    return _node(np.asarray(m @ a.value), (a,), lambda g: (np.asarray(m.T @ g),))


def relu(a) -> Tensor:
    a = _wrap(a)
    on = a.value > 0
    return _node(np.where(on, a.value, 0.0), (a,), lambda g: (g * on,))


def outer(c: np.ndarray, a) -> Tensor:
    """``c[:, None] * a[None, :]`` for a constant column ``c`` and vector ``a``."""
    a = _wrap(a)
    c = np.asarray(c, dtype=np.float64)
    return _node(np.outer(c, a.value), (a,), lambda g: (c @ g,))


def concat(parts, axis: int = 1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), back)


def take_rows(a, idx) -> Tensor:
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)

    unique = len(np.unique(idx)) == len(idx)

    def back(g):
        out = np.zeros_like(a.value)
        if unique:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(a.value[idx], (a,), back)


def normalize_rows(a, eps: float = 1e-12) -> Tensor:
    """L2-normalize rows; rows with norm <= eps map to zero."""
    a = _wrap(a)
    norm = np.sqrt(np.sum(a.value * a.value, axis=1, keepdims=True))
    live = norm > eps
    inv = np.where(live, 1.0 / np.where(live, norm, 1.0), 0.0)
    y = a.value * inv

    def back(g):
        return ((g - y * np.sum(y * g, axis=1, keepdims=True)) * inv,)

    return _node(y, (a,), back)


def log_softmax(a, axis: int) -> Tensor:
    a = _wrap(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _node(y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def row_dot(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _node(np.sum(a.value * b.value, axis=1), (a, b),
                 lambda g: (g[:, None] * b.value, g[:, None] * a.value))


def total(a) -> Tensor:
    a = _wrap(a)
    return _node(np.array(a.value.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def weighted_sum(a, w: np.ndarray) -> Tensor:
    """``sum(w * a)`` for a constant weight array; zero weights contribute
    exactly zero even where ``a`` is infinite."""
    a = _wrap(a)
    w = np.asarray(w, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        prod = np.where(w != 0, w * a.value, 0.0)
    return _node(np.array(np.sum(prod)), (a,), lambda g: (float(g) * w,))


# --------------------------------------------------------------------------
# parameters


@dataclass
class ParamStore:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> None:
        self.arrays[name] = np.array(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.arrays[name])

    def __getitem__(self, name):
        return self.arrays[name]

    def __contains__(self, name):
        return name in self.arrays

    def names(self) -> list[str]:
        return list(self.arrays)

    def layout(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.arrays.items()}

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.arrays.items()},
                          {k: v.copy() for k, v in self.grads.items()})

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def collect(self, tensors: dict[str, Tensor]) -> None:
        """Add leaf gradients from a finished backward pass into ``grads``."""
        for k, t in tensors.items():
            if t.grad is not None:
                self.grads[k] += t.grad

    def check_finite(self) -> None:
        for k, v in self.arrays.items():
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(k)

    def equals(self, other: "ParamStore") -> bool:
        return self.layout() == other.layout() and all(
            np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items())


def check_same_layout(a: ParamStore, b: ParamStore) -> None:
    for name in list(a.arrays) + list(b.arrays):
        if name not in a.arrays or name not in b.arrays or a[name].shape != b[name].shape:
            raise ValueError(f"parameter layout mismatch at '{name}'")


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamW:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    no_decay: tuple[str, ...] = ()
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def decays(self, name: str) -> bool:
        return not any(name.startswith(p) for p in self.no_decay)

    def step(self, params: ParamStore, grads: dict[str, np.ndarray] | None = None) -> None:
        grads = params.grads if grads is None else grads
        for name in params.names():
            if not np.all(np.isfinite(grads[name])):
                raise NonFiniteError(name, "gradient")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name in params.names():
            p, g = params.arrays[name], grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and self.decays(name):
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# gradient checking


def grad_check(loss_fn: Callable[[dict[str, Tensor]], Tensor], params: ParamStore,
               eps: float = 1e-6, names: Iterable[str] | None = None) -> dict[str, float]:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` maps a dict of leaf tensors (one per array in ``params``) to a
    scalar tensor. Denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaves = params.tensors(requires_grad=True)
    loss = loss_fn(leaves)
    if not np.isfinite(loss.value):
        raise NonFiniteError(next(iter(params.arrays), "<empty>"), "loss")
    loss.backward()
    report = {}
    for name in (params.names() if names is None else names):
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(params[name])
        arr = params.arrays[name]
        numeric = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), numeric.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + eps
            hi = float(loss_fn(params.tensors(False)).value)
            flat[j] = keep - eps
            lo = float(loss_fn(params.tensors(False)).value)
            flat[j] = keep
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteError(name, "loss")
            nflat[j] = (hi - lo) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        report[name] = float(np.max(np.abs(analytic - numeric) / denom)) if arr.size else 0.0
    return report
