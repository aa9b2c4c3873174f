"""Dense float64 tensors with a small reverse-mode autodiff engine.

Only the handful of ops the mixed-precision networks need are provided. Every op
records a closure on the output tensor; ``Tensor.backward`` replays them in
reverse topological order, visiting each recorded op once.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64


class NumericalError(FloatingPointError):
    """Raised when an op produces a NaN or an infinity."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
        op: str = "",
    ):
        arr = np.asarray(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite values produced by {op or 'constructor'}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        self._accumulate(np.asarray(grad, dtype=DTYPE))
        for node in reversed(topo_order(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar kept minimal: same-shape arithmetic only
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_const(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul_const(self, -1.0)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, mul_const(other, -1.0))


def _raise_item(t: Tensor) -> float:
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def topo_order(root: Tensor) -> list:
    """Return the graph reachable from ``root`` in execution (topological) order."""
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


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def _result(data, parents, backward, op) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None, op=op)


# ---------------------------------------------------------------------------
# elementwise / reductions
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), backward, "mul")


def mul_const(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accumulate(g * c)

    return _result(a.data * c, (a,), backward, "mul_const")


def scale(a: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``a`` by the single-element tensor ``s``."""
    if s.size != 1:
        raise ValueError("scale: multiplier must hold exactly one value")
    sv = float(s.data.reshape(-1)[0])

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * sv)
        if s.requires_grad:
            s._accumulate(np.array(np.sum(g * a.data)).reshape(s.shape))

    return _result(a.data * sv, (a, s), backward, "scale")


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.broadcast_to(g.reshape(()), a.shape))

    return _result(np.array(a.data.sum()), (a,), backward, "sum")


def square(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(2.0 * a.data * g)

    return _result(a.data * a.data, (a,), backward, "square")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward, "reshape")


def softmax(logits: Tensor) -> Tensor:
    """Softmax over a 1-D tensor, stabilized by max subtraction."""
    z = logits.data - logits.data.max()
    e = np.exp(z)
    p = e / e.sum()

    def backward(g):
        logits._accumulate(p * (g - np.dot(g, p)))

    return _result(p, (logits,), backward, "softmax")


# ---------------------------------------------------------------------------
# convolution and dense layers
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    # floor semantics: trailing rows/cols that do not fill a window are dropped
    span = size + 2 * pad - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded input {size}+2*{pad}")
    return span // stride + 1


def im2col_array(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unroll NCHW ``x`` into columns of shape (N, C*kh*kw, OH*OW)."""
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im_array(cols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return out


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with an OIHW kernel, via im2col."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIHW weight")
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride={stride} / pad={pad}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ci}")
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    cols = im2col_array(x.data, kh, kw, stride, pad)
    wmat = weight.data.reshape(co, -1)
    out = np.matmul(wmat, cols).reshape(n, co, oh, ow)

    def backward(g):
        gm = g.reshape(n, co, oh * ow)
        if weight.requires_grad:
            gw = np.einsum("nol,nsl->os", gm, cols, optimize=True)
            weight._accumulate(gw.reshape(weight.shape))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gm)
            x._accumulate(col2im_array(gcols, x.shape, kh, kw, stride, pad))

    return _result(out, (x, weight), backward, "conv2d")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"dense: incompatible shapes {x.shape} and {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"dense: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _result(out, (x, weight, bias), backward, "dense")


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over NCHW input.

    In training mode the running statistics are updated in place (unbiased
    variance, PyTorch convention).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm: channel mismatch, input has {c}")
    count = n * h * w
    if training:
        if count == 0:
            raise ValueError("batchnorm: empty batch in training mode")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        unbiased = var * count / max(count - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx_hat = g * gamma.data[None, :, None, None]
            if training:
                m1 = gx_hat.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (gx_hat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gx_hat - m1 - xhat * m2) * inv_std[None, :, None, None]
            else:
                gx = gx_hat * inv_std[None, :, None, None]
            x._accumulate(gx)

    return _result(out, (x, gamma, beta), backward, "batchnorm")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))

    return _result(out, (x,), backward, "global_avg_pool")


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), labels]))

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        logits._accumulate(p * (float(g) / n))

    return _result(np.array(loss), (logits,), backward, "softmax_xent")


# ---------------------------------------------------------------------------
# parameters and optimizers
# ---------------------------------------------------------------------------

class Param(Tensor):
    """A trainable tensor that carries its own optimizer state."""

    __slots__ = ("opt_state", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, op="param")
        self.opt_state: dict = {}
        self.name = name

    @property
    def value(self) -> np.ndarray:
        return self.data


def _require_grad(p: Param) -> np.ndarray:
    if p.grad is None:
        raise ValueError(f"parameter {p.name or '<unnamed>'} has no gradient")
    return p.grad


def sgd_momentum_step(p: Param, lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> Param:
    if lr <= 0:
        raise ValueError("lr must be positive")
    g = _require_grad(p) + weight_decay * p.data
    v = p.opt_state.get("momentum")
    if v is None:
        v = np.zeros_like(p.data)
    v = momentum * v + g
    p.opt_state["momentum"] = v
    p.data = p.data - lr * v
    return p


def adam_step(
    p: Param, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
) -> Param:
    if lr <= 0:
        raise ValueError("lr must be positive")
    g = _require_grad(p)
    m = p.opt_state.get("m", np.zeros_like(p.data))
    v = p.opt_state.get("v", np.zeros_like(p.data))
    t = int(p.opt_state.get("step", 0)) + 1
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    p.opt_state.update(m=m, v=v, step=t)
    return p


class SGD:
    def __init__(self, params: Iterable[Param], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, no_decay: Iterable[Param] = ()):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._no_decay = {id(p) for p in no_decay}

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            wd = 0.0 if id(p) in self._no_decay else self.weight_decay
            sgd_momentum_step(p, self.lr, self.momentum, wd)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params: Iterable[Param], lr: float = 0.02, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                adam_step(p, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * min(step, total_steps) / total_steps))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(
    fn: Callable[[], Tensor],
    param: Tensor,
    h: float = 1e-4,
    coords: Optional[Sequence[int]] = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` rebuilds the graph from scratch on every call and returns a scalar.
    Relative error is ``|analytic - numeric| / (|numeric| + 1e-8)``.
    """
    out = fn()
    param.grad = None
    out.backward()
    analytic = np.zeros_like(param.data) if param.grad is None else param.grad.copy()
    flat = param.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        numeric = (fp - fm) / (2 * h)
        err = abs(analytic.reshape(-1)[i] - numeric) / (abs(numeric) + 1e-8)
        worst = max(worst, err)
    return worst
