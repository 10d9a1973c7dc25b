"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable op records its parents and a closure that maps the
upstream gradient to per-parent gradients.  ``Tensor.backward`` orders the
recorded graph topologically and visits each node exactly once.

The one non-standard piece is :func:`apply_custom`: its forward applies an
elementwise map F while its backward multiplies the upstream gradient by a
*separate* map B evaluated at the original (pre-quantization) input.  That
decoupling is what lets a forward quantizer be paired with an arbitrary
backward quantizer.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tensor", "DimensionError", "CustomGradSpec", "no_grad", "is_grad_enabled",
    "matmul", "add", "mul", "sum", "mean", "reshape", "relu", "conv2d",
    "maxpool2d", "batch_norm", "softmax_cross_entropy", "apply_custom", "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        pending = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- basic ops

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.data, b.data

    def backward(g):
        return g @ bv.T, av.T @ g

    return _record(av @ bv, (a, b), backward, "matmul")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: {a.shape} and {b.shape} do not broadcast") from exc
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.data, b.data
    try:
        out = av * bv
    except ValueError as exc:
        raise DimensionError(f"mul: {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _record(out, (a, b), backward, "mul")


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(x.data.sum()), (x,), backward, "sum")


def mean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.size
    return mul(sum(x), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    orig = x.shape

    def backward(g):
        return (g.reshape(orig),)

    return _record(x.data.reshape(shape), (x,), backward, "reshape")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0.0), (x,), backward, "relu")


# ---------------------------------------------------------------- conv / pool / norm

def conv2d(x, k, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``k[O,C,kh,kw]``."""
    x, k = _as_tensor(x), _as_tensor(k)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {k.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = k.shape
    if kc != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input "
                             f"{h + 2 * padding}x{w + 2 * padding}")
    if stride < 1:
        raise DimensionError("conv2d: stride must be positive")
    oh = kernels.conv_out_size(h, kh, stride, padding)
    ow = kernels.conv_out_size(w, kw, stride, padding)
    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    kmat = k.data.reshape(o, -1)
    out = (cols @ kmat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    x_shape = x.shape

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dk = (g2.T @ cols).reshape(k.data.shape) if k.requires_grad else None
        dx = None
        if x.requires_grad:
            dx = kernels.col2im(g2 @ kmat, x_shape, kh, kw, stride, padding)
        return dx, dk

    return _record(np.ascontiguousarray(out), (x, k), backward, "conv2d")


def maxpool2d(x, k: int = 2) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d expects 4-D input, got {x.shape}")
    out, idx = kernels.maxpool_forward(x.data, k)
    shape = x.shape

    def backward(g):
        return (kernels.maxpool_backward(np.ascontiguousarray(g), idx, shape, k),)

    return _record(out, (x,), backward, "maxpool2d")


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over every axis except the channel axis 1.

    ``running_mean``/``running_var`` are updated in place when training.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.data.ndim == 2 else (1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // x.shape[1]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    gv = gamma.data.reshape(bshape)
    out = gv * xhat + beta.data.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * gv
        if training:
            m = x.data.size // x.shape[1]
            dx = (inv.reshape(bshape) / m) * (
                m * gx
                - gx.sum(axis=axes).reshape(bshape)
                - xhat * (gx * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = gx * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), backward, "batch_norm")


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    n, c = logits.shape
    if n and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean() if n else 0.0

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _record(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


# ---------------------------------------------------------------- custom gradients

@dataclass(frozen=True)
class CustomGradSpec:
    """Elementwise forward map paired with an independent backward multiplier.

    ``backward`` is evaluated at the original input, never at ``forward(x)``,
    and the analytic derivative of ``forward`` is never consulted.
    """
    forward: Callable[[np.ndarray], np.ndarray]
    backward: Callable[[np.ndarray], np.ndarray]


def apply_custom(x, spec: CustomGradSpec) -> Tensor:
    x = _as_tensor(x)
    xv = x.data
    out = np.asarray(spec.forward(xv), dtype=np.float64)

    def backward(g):
        return (g * spec.backward(xv),)

    return _record(np.broadcast_to(out, xv.shape).copy(), (x,), backward, "custom")


# ---------------------------------------------------------------- gradient check

def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-8) -> float:
    """Max relative error between autodiff and central differences.

    Step per coordinate is ``1e-5 * (1 + |x_i|)``; the relative error is
    ``|autodiff - fd| / (|fd| + eps)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    f(xt).backward()
    auto = xt.grad if xt.grad is not None else np.zeros_like(x0)
    fd = np.zeros_like(x0)
    flat = x0.ravel()
    with no_grad():
        for i in range(flat.size):
            h = 1e-5 * (1.0 + abs(flat[i]))
            xp, xm = flat.copy(), flat.copy()
            xp[i] += h
            xm[i] -= h
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            fd.flat[i] = (fp - fm) / (xp[i] - xm[i])
    if fd.size == 0:
        return 0.0
    return float(np.max(np.abs(auto - fd) / (np.abs(fd) + eps)))
