"""Dense float64 tensors with reverse-mode differentiation and Adam.

A deliberately small engine: numpy arrays, the handful of primitive ops the
model blocks need, and a tape derived from the op graph that supports one
backward pass per forward pass. Every op checks its output for NaN/Inf so
numeric blow-ups surface at the producing op instead of three layers later.

All randomness (parameter init, dropout masks, shuffling) is driven by
numpy Generators passed in explicitly; nothing in this module touches
global RNG state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor", "Tape", "backward", "zero_grads",
    "add", "sub", "mul", "div", "neg", "matmul", "power", "exp", "log",
    "tsum", "tmean", "concat", "transpose", "reshape", "gather", "narrow",
    "AdamState", "adam_step", "grad_check", "GradCheckResult",
]


def _as_array(value) -> np.ndarray:
    if isinstance(value, np.ndarray) and value.dtype == np.float64:
        return value
    return np.asarray(value, dtype=np.float64)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"op '{op}' produced a non-finite value")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-d float64 array recording how it was produced, for backward."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._done = False

    @classmethod
    def _result(cls, data: np.ndarray, op: str, parents: tuple["Tensor", ...],
                backward_fn: Callable) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._done = False
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return narrow(self, key)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from e
    a_shape, b_shape = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return Tensor._result(data, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from e
    a_shape, b_shape = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

    return Tensor._result(data, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from e
    a_data, b_data = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)

    return Tensor._result(data, "mul", (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            data = a.data / b.data
    except ValueError as e:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}") from e
    a_data, b_data = a.data, b.data

    def bwd(g):
        ga = g / b_data
        gb = -g * a_data / (b_data * b_data)
        return _unbroadcast(ga, a_data.shape), _unbroadcast(gb, b_data.shape)

    return Tensor._result(data, "div", (a, b), bwd)


def neg(a) -> Tensor:
    a = _wrap(a)
    return Tensor._result(-a.data, "neg", (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product; supports stacked (batched) operands via np.matmul."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires ndim >= 2, got {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from e
    a_data, b_data = a.data, b.data

    def bwd(g):
        ga = np.matmul(g, b_data.swapaxes(-1, -2))
        gb = np.matmul(a_data.swapaxes(-1, -2), g)
        return _unbroadcast(ga, a_data.shape), _unbroadcast(gb, b_data.shape)

    return Tensor._result(data, "matmul", (a, b), bwd)


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    p = float(exponent)
    with np.errstate(invalid="ignore", divide="ignore"):
        data = a.data ** p
    a_data = a.data

    def bwd(g):
        return (g * p * a_data ** (p - 1.0),)

    return Tensor._result(data, "power", (a,), bwd)


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def bwd(g):
        return (g * data,)

    return Tensor._result(data, "exp", (a,), bwd)


def log(a) -> Tensor:
    """Natural logarithm."""
    a = _wrap(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(a.data)
    a_data = a.data

    def bwd(g):
        return (g / a_data,)

    return Tensor._result(data, "log", (a,), bwd)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape),)

    return Tensor._result(np.asarray(data), "sum", (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    in_shape = a.data.shape
    count = a.data.size if axis is None else in_shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, in_shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, in_shape),)

    return Tensor._result(np.asarray(data), "mean", (a,), bwd)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    parts = tuple(_wrap(t) for t in tensors)
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from e
    widths = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(widths)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return Tensor._result(data, "concat", parts, bwd)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = _wrap(a)
    if axes is None:
        data = a.data.swapaxes(-1, -2)

        def bwd(g):
            return (g.swapaxes(-1, -2),)
    else:
        inverse = tuple(np.argsort(axes))
        data = a.data.transpose(axes)

        def bwd(g):
            return (g.transpose(inverse),)

    return Tensor._result(data, "transpose", (a,), bwd)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e
    in_shape = a.data.shape

    def bwd(g):
        return (g.reshape(in_shape),)

    return Tensor._result(data, "reshape", (a,), bwd)


def gather(table, ids) -> Tensor:
    """Embedding lookup: rows of a 2-d `table` selected by integer `ids`.

    Gradients flow only into the looked-up rows.
    """
    table = _wrap(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"gather expects a 2-d table, got shape {table.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("gather ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"gather id out of range [0, {table.shape[0]}): min {ids.min()}, max {ids.max()}")
    data = table.data[ids]
    table_shape = table.data.shape

    def bwd(g):
        gt = np.zeros(table_shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return Tensor._result(data, "gather", (table,), bwd)


def narrow(a, key) -> Tensor:
    """Basic slicing / integer indexing."""
    a = _wrap(a)
    data = a.data[key]
    in_shape = a.data.shape

    def bwd(g):
        ga = np.zeros(in_shape)
        ga[key] = g
        return (ga,)

    return Tensor._result(np.asarray(data), "slice", (a,), bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

class Tape:
    """Topologically ordered record of the ops reachable from one output.

    Creation-order-compatible: parents always precede their consumers, so a
    reverse walk visits each node exactly once.
    """

    def __init__(self, output: Tensor):
        nodes: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)


def backward(output: Tensor) -> None:
    """Populate `.grad` on every requires_grad tensor reachable from `output`.

    `output` must be a scalar (size 1). A second call on the same graph is an
    error; rebuild the graph with a fresh forward pass first.
    """
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if output._done:
        raise RuntimeError("backward already ran for this graph; run a new forward pass")
    tape = Tape(output)
    output.grad = np.ones_like(output.data)
    for node in reversed(tape.nodes):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if parent.requires_grad and g is not None:
                parent.grad = g if parent.grad is None else parent.grad + g
    output._done = True


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam moments and step counter for a fixed parameter list."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 0.001,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
                   m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray] | None,
              state: AdamState) -> AdamState:
    """One Adam update with bias correction, in place on `params`.

    `grads=None` reads each parameter's `.grad` (missing grads count as 0).
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ShapeError(
            f"adam_step: {len(params)} params vs {len(grads)} grads vs state of {len(state.m)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = 0.0
        elif np.shape(g) != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {np.shape(g)} != param shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    passed: bool
    n_checked: int
    max_rel_error: float
    failures: list

    def __bool__(self) -> bool:
        return self.passed


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
               tol: float = 1e-4, h: float = 1e-5, abs_floor: float = 1e-8,
               max_checks_per_input: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare reverse-mode gradients against central finite differences.

    `fn(*inputs)` must return a scalar Tensor and be deterministic (run
    dropout in eval mode). Checks every element of every requires_grad input,
    or a random subset of `max_checks_per_input` elements when set.
    """
    zero_grads(inputs)
    out = fn(*inputs)
    backward(out)
    analytic = [None if p.grad is None else p.grad.copy() for p in inputs]

    if rng is None:
        rng = np.random.default_rng(0)
    max_rel = 0.0
    n_checked = 0
    failures: list[str] = []
    for i, inp in enumerate(inputs):
        if not inp.requires_grad:
            continue
        n = inp.data.size
        if max_checks_per_input is not None and n > max_checks_per_input:
            flat_idx = rng.choice(n, size=max_checks_per_input, replace=False)
        else:
            flat_idx = np.arange(n)
        flat = inp.data.reshape(-1)
        grad_flat = (np.zeros(n) if analytic[i] is None else analytic[i].reshape(-1))
        for j in flat_idx:
            orig = flat[j]
            flat[j] = orig + h
            f_plus = fn(*inputs).item()
            flat[j] = orig - h
            f_minus = fn(*inputs).item()
            flat[j] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            ad = grad_flat[j]
            rel = abs(ad - fd) / max(abs(ad), abs(fd), abs_floor)
            max_rel = max(max_rel, rel)
            n_checked += 1
            if rel > tol:
                failures.append(f"input {i} element {j}: analytic {ad:.6e} vs fd {fd:.6e} (rel {rel:.2e})")
    return GradCheckResult(passed=not failures, n_checked=n_checked,
                           max_rel_error=max_rel, failures=failures)
