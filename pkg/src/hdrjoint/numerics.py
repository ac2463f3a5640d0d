"""Small reverse-mode differentiation core on top of numpy.

Only the operations the enhancement graph needs are provided. A tensor
records how it was produced only when one of its inputs has
``requires_grad`` set, so inference runs without building a graph.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

_DTYPE: contextvars.ContextVar = contextvars.ContextVar("hdrjoint_dtype", default=np.float32)


def default_dtype():
    return _DTYPE.get()


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors.

    Used by gradient checks, where float32 round-off swamps a finite
    difference with h = 1e-3.
    """
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @classmethod
    def from_op(cls, data, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        """Wrap an op result; the graph edge is kept only if a parent needs grad."""
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        GradTape(self).backward(grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return affine(self, -1.0, 0.0) + other

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return affine(self, -1.0, 0.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Reverse-topological record of the ops that produced ``output``.

    ``ops`` lists every recorded (non-leaf) tensor exactly once, output
    first; ``backward`` walks it in that order, so each op's adjoint runs
    after all of its consumers have contributed.
    """

    def __init__(self, output: Tensor):
        self.output = output
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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
        self.ops = [t for t in reversed(order) if not t.is_leaf]

    def backward(self, grad: np.ndarray | None = None) -> None:
        out = self.output
        if not out.requires_grad:
            raise ValueError("output does not depend on any tensor with requires_grad")
        if grad is None:
            if out.data.size != 1:
                raise ValueError("a seed gradient is required for non-scalar outputs")
            grad = np.ones_like(out.data)
        pending: dict[int, np.ndarray] = {id(out): np.asarray(grad, dtype=out.data.dtype)}
        if out.is_leaf:
            _accumulate_leaf(out, pending[id(out)])
            return
        for node in self.ops:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p.is_leaf:
                    _accumulate_leaf(p, pg)
                elif id(p) in pending:
                    pending[id(p)] = pending[id(p)] + pg
                else:
                    pending[id(p)] = pg


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(output: Tensor, grad: np.ndarray | None = None) -> None:
    GradTape(output).backward(grad)


# --------------------------------------------------------------------------
# elementwise


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return affine(a, 1.0, float(b))
    a = as_tensor(a)
    _check_same_shape(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return affine(a, 1.0, -float(b))
    a = as_tensor(a)
    _check_same_shape(a, b, "sub")
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return affine(a, float(b), 0.0)
    a = as_tensor(a)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor.from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def affine(x: Tensor, scale: float, shift: float) -> Tensor:
    """scale * x + shift with constant scalars."""
    x = as_tensor(x)
    data = x.data * x.data.dtype.type(scale) + x.data.dtype.type(shift)
    return Tensor.from_op(data, (x,), lambda g: (g * g.dtype.type(scale),))


def activation(x: Tensor, kind: str) -> Tensor:
    x = as_tensor(x)
    if kind == "relu":
        out = np.maximum(x.data, 0)
        return Tensor.from_op(out, (x,), lambda g: (g * (out > 0),))
    if kind == "sigmoid":
        s = expit(x.data)
        return Tensor.from_op(s, (x,), lambda g: (g * (s * (1 - s)),))
    raise ValueError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


# --------------------------------------------------------------------------
# linear maps


def _colsum(m: np.ndarray) -> np.ndarray:
    # a GEMV is several times faster than sum(axis=0) on tall matrices
    return np.ones(m.shape[0], dtype=m.dtype) @ m


def pointwise_linear(x: Tensor, weight: Tensor, bias: Tensor, act: str | None = None) -> Tensor:
    """Per-location ``weight @ x + bias`` over the last axis (a 1x1 conv).

    ``act`` optionally fuses a following relu/sigmoid, which saves a pass
    over large activations; the result equals ``activation(pointwise_linear(...))``.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    cout, cin = weight.shape
    if x.shape[-1] != cin:
        raise ValueError(f"pointwise_linear: input has {x.shape[-1]} channels, weight expects {cin}")
    if bias.shape != (cout,):
        raise ValueError(f"pointwise_linear: bias shape {bias.shape}, expected ({cout},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, cin)
    w = weight.data
    out = x2 @ w.T
    out += bias.data
    if act == "relu":
        np.maximum(out, 0, out=out)
    elif act == "sigmoid":
        out = expit(out)
    elif act is not None:
        raise ValueError(f"unknown activation {act!r}")

    def bw(g):
        g2 = g.reshape(-1, cout)
        if act == "relu":
            g2 = g2 * (out > 0)
        elif act == "sigmoid":
            g2 = g2 * (out * (1 - out))
        gx = (g2 @ w).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = _colsum(g2) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor.from_op(out.reshape(*lead, cout), (x, weight, bias), bw)


def _apply_along(mat: np.ndarray, x: np.ndarray, axis: int) -> np.ndarray:
    y = np.tensordot(mat, x, axes=([1], [axis]))
    return np.ascontiguousarray(np.moveaxis(y, 0, axis))


def fixed_linear(x: Tensor, basis, axis: int = 0) -> Tensor:
    """Apply a constant matrix along ``axis``; the adjoint uses its transpose.

    ``basis`` is treated as data even if a Tensor is passed, so it never
    collects gradient.
    """
    x = as_tensor(x)
    b = np.asarray(basis.data if isinstance(basis, Tensor) else basis, dtype=x.data.dtype)
    if b.ndim != 2:
        raise ValueError("fixed_linear: basis must be a matrix")
    axis = axis % x.data.ndim
    if x.shape[axis] != b.shape[1]:
        raise ValueError(
            f"fixed_linear: axis {axis} has size {x.shape[axis]}, basis expects {b.shape[1]}")
    bt = np.ascontiguousarray(b.T)
    return Tensor.from_op(_apply_along(b, x.data, axis), (x,),
                          lambda g: (_apply_along(bt, g, axis),))


def modulate(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Feature-wise ``x * scale + shift`` with per-channel vectors."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    c = x.shape[-1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"modulate: expected ({c},) scale/shift, got {scale.shape}, {shift.shape}")
    xd, sd = x.data, scale.data

    def bw(g):
        g2 = g.reshape(-1, c)
        gx = g * sd if x.requires_grad else None
        gs = _colsum(g2 * xd.reshape(-1, c)) if scale.requires_grad else None
        gt = _colsum(g2) if shift.requires_grad else None
        return gx, gs, gt

    return Tensor.from_op(xd * sd + shift.data, (x, scale, shift), bw)


def conv3x3_stride2(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 2, zero padding 1, on an [H, W, Cin] map."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    h, w, cin = x.shape
    cout = weight.shape[0]
    if weight.shape != (cout, cin, 3, 3):
        raise ValueError(f"conv3x3_stride2: weight shape {weight.shape} incompatible with {cin} channels")
    ho, wo = (h + 1) // 2, (w + 1) // 2
    xp = np.zeros((h + 2, w + 2, cin), dtype=x.data.dtype)
    xp[1:-1, 1:-1] = x.data
    cols = np.empty((ho, wo, 3, 3, cin), dtype=x.data.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, dy, dx] = xp[dy:dy + 2 * ho:2, dx:dx + 2 * wo:2]
    cols2 = cols.reshape(ho * wo, 9 * cin)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, 9 * cin)
    out = (cols2 @ wmat.T + bias.data).reshape(ho, wo, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(ho, wo, 3, 3, cin)
            gxp = np.zeros_like(xp)
            for dy in range(3):
                for dx in range(3):
                    gxp[dy:dy + 2 * ho:2, dx:dx + 2 * wo:2] += gcols[:, :, dy, dx]
            gx = gxp[1:-1, 1:-1]
        if weight.requires_grad:
            gw = (g2.T @ cols2).reshape(cout, 3, 3, cin).transpose(0, 3, 1, 2)
        if bias.requires_grad:
            gb = _colsum(g2)
        return gx, gw, gb

    return Tensor.from_op(out, (x, weight, bias), bw)


# --------------------------------------------------------------------------
# reductions and reshapes


def spatial_mean(x: Tensor) -> Tensor:
    """Average over every axis but the last (global average pooling)."""
    x = as_tensor(x)
    n = x.data.size // x.shape[-1]
    out = x.data.reshape(-1, x.shape[-1]).mean(axis=0, dtype=np.float64).astype(x.data.dtype)
    return Tensor.from_op(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).astype(g.dtype),))


def total(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)
    return Tensor.from_op(out, (x,), lambda g: (np.full(x.shape, g, dtype=x.data.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def l1_loss(a: Tensor, b) -> Tensor:
    """Mean absolute difference; the subgradient at a tie is 0."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "l1_loss")
    diff = a.data.astype(np.float64) - b.data
    n = diff.size
    out = np.asarray(np.abs(diff).sum() / n, dtype=a.data.dtype)

    def bw(g):
        s = (np.sign(diff) * (float(g) / n)).astype(a.data.dtype)
        return (s if a.requires_grad else None), (-s if b.requires_grad else None)

    return Tensor.from_op(out, (a, b), bw)


def weighted_sum(terms: Iterable[tuple[float, Tensor]]) -> Tensor:
    """Sum of ``weight * scalar`` terms, accumulated in float64."""
    terms = [(float(w), as_tensor(t)) for w, t in terms]
    value = sum(w * float(t.data) for w, t in terms)
    parents = tuple(t for _, t in terms)

    def bw(g):
        return tuple(np.asarray(w * g, dtype=t.data.dtype) for w, t in terms)

    return Tensor.from_op(np.asarray(value), parents, bw)


# --------------------------------------------------------------------------
# optimizer


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``.

    Every gradient is checked before anything is touched, so a rejected
    step leaves parameters and moments as they were.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = (p.data - update).astype(p.data.dtype)
    return state
