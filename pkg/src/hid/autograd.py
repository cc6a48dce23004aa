"""Minimal reverse-mode differentiation over numpy arrays.

Every op records its parents and a closure that pushes the upstream
gradient back to them. ``Tensor.backward`` topologically sorts the graph
and runs the closures in reverse. Arrays are float64 throughout so that
finite-difference checks are meaningful.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that were broadcast in the forward pass
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- graph traversal ------------------------------------------------

    def _topo(self) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Populate ``.grad`` on every tensor reachable from this scalar.

        Gradients of all nodes in the graph are reset first, so calling
        ``backward`` twice on a rebuilt graph never double-counts.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.data.shape}")
        order = self._topo()
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other) -> Tensor:
        other = as_tensor(other)

        def _bw(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        return Tensor(self.data + other.data, _parents=(self, other), _backward=_bw)

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        def _bw(g):
            self._accumulate(-g)

        return Tensor(-self.data, _parents=(self,), _backward=_bw)

    def __sub__(self, other) -> Tensor:
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)

        def _bw(g):
            self._accumulate(_unbroadcast(g * other.data, self.shape))
            other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor(self.data * other.data, _parents=(self, other), _backward=_bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other)

        def _bw(g):
            self._accumulate(_unbroadcast(g / other.data, self.shape))
            other._accumulate(_unbroadcast(-g * self.data / other.data**2, other.shape))

        return Tensor(self.data / other.data, _parents=(self, other), _backward=_bw)

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> Tensor:
        def _bw(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor(self.data**exponent, _parents=(self,), _backward=_bw)

    def __matmul__(self, other) -> Tensor:
        other = as_tensor(other)

        def _bw(g):
            if self.requires_grad:
                if other.ndim == 1:
                    self._accumulate(np.multiply.outer(g, other.data))
                else:
                    self._accumulate(g @ other.data.T)
            if other.requires_grad:
                if self.ndim == 1:
                    other._accumulate(np.multiply.outer(self.data, g))
                elif other.ndim == 1:
                    other._accumulate(self.data.T @ g)
                else:
                    other._accumulate(self.data.T @ g)

        return Tensor(self.data @ other.data, _parents=(self, other), _backward=_bw)

    def __rmatmul__(self, other) -> Tensor:
        return as_tensor(other) @ self

    @property
    def T(self) -> Tensor:
        def _bw(g):
            self._accumulate(g.T)

        return Tensor(self.data.T, _parents=(self,), _backward=_bw)

    def __getitem__(self, index) -> Tensor:
        def _bw(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                if _is_basic(index):
                    full[index] += g
                else:
                    np.add.at(full, index, g)
                self._accumulate(full)

        return Tensor(self.data[index], _parents=(self,), _backward=_bw)

    # -- reductions -----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,), _backward=_bw)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / count

    def var(self, axis=None, keepdims: bool = False) -> Tensor:
        """Population variance (divides by the count, not count - 1)."""
        centered = self - self.mean(axis=axis, keepdims=True)
        return (centered * centered).mean(axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        def _bw(g):
            self._accumulate(g.reshape(self.shape))

        return Tensor(self.data.reshape(*shape), _parents=(self,), _backward=_bw)

    # -- elementwise ----------------------------------------------------

    def exp(self) -> Tensor:
        out = np.exp(self.data)

        def _bw(g):
            self._accumulate(g * out)

        return Tensor(out, _parents=(self,), _backward=_bw)

    def log(self) -> Tensor:
        def _bw(g):
            self._accumulate(g / self.data)

        return Tensor(np.log(self.data), _parents=(self,), _backward=_bw)

    def sqrt(self) -> Tensor:
        out = np.sqrt(self.data)

        def _bw(g):
            self._accumulate(g * 0.5 / out)

        return Tensor(out, _parents=(self,), _backward=_bw)

    def relu(self) -> Tensor:
        mask = self.data > 0

        def _bw(g):
            self._accumulate(g * mask)

        return Tensor(np.where(mask, self.data, 0.0), _parents=(self,), _backward=_bw)

    def clip(self, lo: float, hi: float) -> Tensor:
        # subgradient 0 at and beyond both kinks
        inside = (self.data > lo) & (self.data < hi)

        def _bw(g):
            self._accumulate(g * inside)

        return Tensor(np.clip(self.data, lo, hi), _parents=(self,), _backward=_bw)

    def sigmoid(self) -> Tensor:
        out = 0.5 * (1.0 + np.tanh(0.5 * self.data))

        def _bw(g):
            self._accumulate(g * out * (1.0 - out))

        return Tensor(out, _parents=(self,), _backward=_bw)

    def tanh(self) -> Tensor:
        out = np.tanh(self.data)

        def _bw(g):
            self._accumulate(g * (1.0 - out * out))

        return Tensor(out, _parents=(self,), _backward=_bw)


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice)) or p is None or p is Ellipsis for p in parts)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# -- composite ops ------------------------------------------------------

def gather_rows(table: Tensor, index) -> Tensor:
    """Rows of ``table`` selected by an integer index array (any shape)."""
    return table[np.asarray(index, dtype=np.intp)]


def dot(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    return (a * b).sum(axis=axis)


def norm(x: Tensor, axis: int = -1, keepdims: bool = False, floor: float = 0.0) -> Tensor:
    sq = (x * x).sum(axis=axis, keepdims=keepdims)
    if floor:
        sq = sq + floor
    return sq.sqrt()


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Project onto the unit sphere along ``axis``.

    Raises ``ValueError`` when any slice has norm <= ``eps``.
    """
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(n <= eps):
        raise ValueError("cannot normalize a (near-)zero vector")
    return x / norm(x, axis=axis, keepdims=True)


def cosine(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    return dot(l2_normalize(a, axis=axis), l2_normalize(b, axis=axis), axis=axis)


def logsumexp(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable log-sum-exp, optionally restricted to ``mask`` entries.

    Rows whose mask is all False return 0 (they contribute an empty sum
    that the caller is expected to zero out).
    """
    data = x.data if mask is None else np.where(mask, x.data, -np.inf)
    shift = np.max(data, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    e = (x - shift).exp()
    if mask is not None:
        e = e * mask.astype(np.float64)
        empty = ~mask.any(axis=axis, keepdims=True)
        e = e + empty.astype(np.float64)
        total = e.sum(axis=axis, keepdims=True).log() + shift
        return (total * (~empty).astype(np.float64)).sum(axis=axis)
    return (e.sum(axis=axis, keepdims=True).log() + shift).sum(axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x - logsumexp(x, axis=axis).reshape(*_keep(x.shape, axis))


def _keep(shape: tuple, axis: int) -> tuple:
    shape = list(shape)
    shape[axis] = 1
    return tuple(shape)


def stack_rows(rows: list[Tensor]) -> Tensor:
    data = np.stack([r.data for r in rows])

    def _bw(g):
        for i, r in enumerate(rows):
            r._accumulate(g[i])

    return Tensor(data, _parents=tuple(rows), _backward=_bw)


def numerical_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (mutated in place, restored)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad
