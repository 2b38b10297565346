"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`GradientTape` is opened around a forward pass. Every primitive
applied while the tape is active, with at least one participating input (a
parameter or an earlier taped value), is appended to the tape together with
whatever it needs for its adjoint. :func:`backward` then walks the tape once in
reverse.

    with GradientTape():
        loss = model.loss(scene)
    grads = backward(loss, model.parameters())
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import ContractError, ShapeError, UnsupportedPrimitive

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_local = threading.local()


def _active_tape() -> "GradientTape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 value, optionally tracked on the active gradient tape."""

    __slots__ = ("data", "requires_grad", "name", "tape_id", "_tape")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the Tensor operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.tape_id: int | None = None
        self._tape: GradientTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return len(self.data)

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return apply_primitive("add", [self, other])

    def __radd__(self, other):
        return apply_primitive("add", [other, self])

    def __sub__(self, other):
        return apply_primitive("subtract", [self, other])

    def __rsub__(self, other):
        return apply_primitive("subtract", [other, self])

    def __mul__(self, other):
        return apply_primitive("multiply", [self, other])

    def __rmul__(self, other):
        return apply_primitive("multiply", [other, self])

    def __truediv__(self, other):
        return apply_primitive("divide", [self, other])

    def __rtruediv__(self, other):
        return apply_primitive("divide", [other, self])

    def __neg__(self):
        return apply_primitive("multiply", [self, -1.0])

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    def __rmatmul__(self, other):
        return apply_primitive("matmul", [other, self])

    @property
    def T(self):
        return apply_primitive("transpose", [self])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], shape=shape)

    def sum(self, axis=None, keepdims=False):
        return apply_primitive("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply_primitive("mean", [self], axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Trainable leaf tensor identified by a dotted name such as ``router.W_g``."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    kind: str
    inputs: list
    output: Tensor
    saved: object
    attrs: dict


@dataclass
class GradientTape:
    """Ordered record of primitive applications for one forward pass."""

    nodes: list = field(default_factory=list)

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def participates(self, t: Tensor) -> bool:
        return t.requires_grad or t._tape is self

    def record(self, kind, inputs, output, saved, attrs) -> None:
        output.tape_id = len(self.nodes)
        output._tape = self
        self.nodes.append(_Node(kind, inputs, output, saved, attrs))


# ---------------------------------------------------------------------------
# primitives: each entry maps kind -> (forward, backward)
#   forward(arrays, attrs) -> (out, saved)
#   backward(g, arrays, out, saved, attrs) -> list of input grads (None = no grad)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(a, b, kind):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _binary(kind, fn):
    def fwd(xs, attrs):
        a, b = xs
        _broadcast_shape(a, b, kind)
        return fn(a, b), None

    return fwd


def _add_bwd(g, xs, out, saved, attrs):
    a, b = xs
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def _sub_bwd(g, xs, out, saved, attrs):
    a, b = xs
    return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]


def _mul_bwd(g, xs, out, saved, attrs):
    a, b = xs
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _div_bwd(g, xs, out, saved, attrs):
    a, b = xs
    return [_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)]


def _matmul_fwd(xs, attrs):
    a, b = xs
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}") from None
    return a @ b, None


def _matmul_bwd(g, xs, out, saved, attrs):
    a, b = xs
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


def _concat_fwd(xs, attrs):
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ShapeError(f"concat: leading shapes differ, {xs[0].shape} vs {x.shape}")
    return np.concatenate(xs, axis=-1), None


def _concat_bwd(g, xs, out, saved, attrs):
    cuts = np.cumsum([x.shape[-1] for x in xs])[:-1]
    return list(np.split(g, cuts, axis=-1))


def _gelu_fwd(xs, attrs):
    (x,) = xs
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, cdf


def _gelu_bwd(g, xs, out, cdf, attrs):
    (x,) = xs
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return [g * (cdf + x * pdf)]


def _softplus_fwd(xs, attrs):
    (x,) = xs
    return np.logaddexp(0.0, x), None


def _softplus_bwd(g, xs, out, saved, attrs):
    return [g * expit(xs[0])]


def _softmax_fwd(xs, attrs):
    (x,) = xs
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True), None


def _softmax_bwd(g, xs, s, saved, attrs):
    return [s * (g - (g * s).sum(axis=-1, keepdims=True))]


def _layernorm_fwd(xs, attrs):
    (x,) = xs
    eps = attrs.get("eps", 1e-10)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat, inv


def _layernorm_bwd(g, xs, xhat, inv, attrs):
    gm = g.mean(axis=-1, keepdims=True)
    gxm = (g * xhat).mean(axis=-1, keepdims=True)
    return [inv * (g - gm - xhat * gxm)]


def _reduce_fwd(fn):
    def fwd(xs, attrs):
        return fn(xs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None

    return fwd


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _sum_bwd(g, xs, out, saved, attrs):
    x = xs[0]
    return [_expand_reduced(g, x.shape, attrs.get("axis"), attrs.get("keepdims", False)).copy()]


def _mean_bwd(g, xs, out, saved, attrs):
    x = xs[0]
    axis = attrs.get("axis")
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return [_expand_reduced(g, x.shape, axis, attrs.get("keepdims", False)) / count]


def _check_index(index, n, kind):
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeError(f"{kind}: index must be 1-d, got shape {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"{kind}: index out of range for {n} rows")
    return index


def _gather_fwd(xs, attrs):
    (x,) = xs
    idx = _check_index(attrs["index"], x.shape[0], "gather-rows")
    return x[idx], idx


def _gather_bwd(g, xs, out, idx, attrs):
    gx = np.zeros_like(xs[0])
    np.add.at(gx, idx, g)
    return [gx]


def _scatter_fwd(xs, attrs):
    (x,) = xs
    n_rows = int(attrs["n_rows"])
    idx = _check_index(attrs["index"], n_rows, "scatter-add-rows")
    if idx.shape[0] != x.shape[0]:
        raise ShapeError(f"scatter-add-rows: {idx.shape[0]} indices for {x.shape[0]} rows")
    out = np.zeros((n_rows,) + x.shape[1:])
    np.add.at(out, idx, x)
    return out, idx


def _scatter_bwd(g, xs, out, idx, attrs):
    return [g[idx]]


def _l2norm_fwd(xs, attrs):
    return np.sqrt((xs[0] ** 2).sum(axis=-1)), None


def _l2norm_bwd(g, xs, norm, saved, attrs):
    x = xs[0]
    safe = np.where(norm > 0.0, norm, 1.0)
    unit = np.where((norm > 0.0)[..., None], x / safe[..., None], 0.0)
    return [g[..., None] * unit]


def _reshape_fwd(xs, attrs):
    x = xs[0]
    try:
        return x.reshape(attrs["shape"]), None
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(attrs['shape'])}") from None


def _reshape_bwd(g, xs, out, saved, attrs):
    return [g.reshape(xs[0].shape)]


def _transpose_fwd(xs, attrs):
    if xs[0].ndim < 2:
        raise ShapeError(f"transpose: need at least 2 dims, got {xs[0].shape}")
    return np.swapaxes(xs[0], -1, -2), None


def _transpose_bwd(g, xs, out, saved, attrs):
    return [np.swapaxes(g, -1, -2)]


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_binary("add", np.add), _add_bwd),
    "subtract": (_binary("subtract", np.subtract), _sub_bwd),
    "multiply": (_binary("multiply", np.multiply), _mul_bwd),
    "divide": (_binary("divide", np.divide), _div_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "gelu": (_gelu_fwd, _gelu_bwd),
    "softplus": (_softplus_fwd, _softplus_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "layernorm": (_layernorm_fwd, _layernorm_bwd),
    "mean": (_reduce_fwd(np.mean), _mean_bwd),
    "sum": (_reduce_fwd(np.sum), _sum_bwd),
    "gather-rows": (_gather_fwd, _gather_bwd),
    "scatter-add-rows": (_scatter_fwd, _scatter_bwd),
    "l2-norm": (_l2norm_fwd, _l2norm_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
    "transpose": (_transpose_fwd, _transpose_bwd),
}


def apply_primitive(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Evaluate primitive ``kind`` and record it on the active tape if needed.

    Concatenation is along the last axis; softmax, layernorm and l2-norm act on
    the last axis; ``sum``/``mean`` take ``axis`` and ``keepdims`` attributes;
    ``gather-rows``/``scatter-add-rows`` take an integer ``index`` (and
    ``n_rows`` for scatter).
    """
    try:
        fwd, _ = PRIMITIVES[kind]
    except KeyError:
        raise UnsupportedPrimitive(kind) from None
    tensors = [as_tensor(x) for x in inputs]
    out_data, saved = fwd([t.data for t in tensors], attrs)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(out_data, dtype=np.float64)
    out.requires_grad = False
    out.name = None
    out.tape_id = None
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(tape.participates(t) for t in tensors):
        tape.record(kind, tensors, out, saved, attrs)
    return out


# convenience wrappers -------------------------------------------------------

def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def concat(xs):
    return apply_primitive("concat", list(xs))


def gelu(x):
    return apply_primitive("gelu", [x])


def softplus(x):
    return apply_primitive("softplus", [x])


def softmax(x):
    return apply_primitive("softmax", [x])


def layernorm(x, eps=1e-10):
    return apply_primitive("layernorm", [x], eps=eps)


def gather_rows(x, index):
    return apply_primitive("gather-rows", [x], index=np.asarray(index, dtype=np.int64))


def scatter_add_rows(x, index, n_rows):
    return apply_primitive("scatter-add-rows", [x], index=np.asarray(index, dtype=np.int64), n_rows=n_rows)


def l2_norm(x):
    return apply_primitive("l2-norm", [x])


# ---------------------------------------------------------------------------


def backward(loss: Tensor, params: Sequence[Tensor] | Mapping[str, Tensor] | None = None) -> dict:
    """Gradients of scalar ``loss`` for every parameter.

    ``params`` may be a sequence of named tensors or a name -> tensor mapping.
    When omitted, every named leaf reached from ``loss`` is reported.
    Parameters the loss does not depend on get zero gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if isinstance(params, Mapping):
        params = list(params.values())

    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    tape = loss._tape
    if tape is not None:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(tape.nodes[: loss.tape_id + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            _, bwd = PRIMITIVES[node.kind]
            in_grads = bwd(g, [t.data for t in node.inputs], node.output.data, node.saved, node.attrs)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not tape.participates(t):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = np.array(gi, dtype=np.float64)
                if t.requires_grad:
                    leaves[key] = t
    elif loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        leaves[id(loss)] = loss

    if params is None:
        return {t.name: grads[k] for k, t in leaves.items() if t.name is not None}
    out = {}
    for p in params:
        g = grads.get(id(p))
        out[p.name] = g if g is not None else np.zeros_like(p.data)
    return out


def finite_difference_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between the taped gradient of ``f`` at ``x`` and central differences.

    Error per coordinate is ``|analytic - central| / (|central| + 1e-8)``.
    """
    if not h > 0.0:
        raise ContractError(f"finite-difference step must be positive, got {h}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True, name="x")
    with GradientTape():
        y = f(leaf)
    analytic = backward(y, [leaf])["x"]

    central = np.empty_like(x0)
    flat = central.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        flat[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - central) / (np.abs(central) + 1e-8)
    return float(err.max()) if err.size else 0.0
