"""Reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tape` records every operation whose inputs live on it; tensors that
are not attached to a tape are plain immutable values. The tape is rebuilt for
each forward pass, so control flow (ablation switches, variable window widths)
needs no graph compilation.

Broadcasting is limited to the bias style: in a binary op one operand's shape
must equal a trailing suffix of the other's shape (a python scalar counts as
the empty suffix). Gradients of the broadcast operand are summed over the
leading axes.

``matmul`` accepts ``(..., m, k) @ (k, n)`` with a shared right operand, or two
operands of identical leading (batch) shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "DomainError",
    "ContractError",
    "Tensor",
    "Tape",
    "tensor",
    "matmul",
    "unary",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "binary",
    "add",
    "sub",
    "mul",
    "scale",
    "softmax",
    "concat",
    "stack",
    "slice_axis",
    "reshape",
    "transpose",
    "mean_pool",
    "sum_all",
    "mean_all",
    "backward",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an op."""


class ContractError(ValueError):
    """A caller-side precondition does not hold."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Node:
    op: str
    parents: tuple["int | None", ...]
    backward: BackwardFn | None


@dataclass
class Tape:
    """Ordered record of operations. Node ids are list indices, so parents always
    precede children."""

    nodes: list[_Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)

    def _record(self, op: str, parents, backward_fn) -> int:
        self.nodes.append(_Node(op, tuple(parents), backward_fn))
        return len(self.nodes) - 1

    def variable(self, data, name: str = "param") -> "Tensor":
        """Attach a leaf that gradients are requested for."""
        arr = np.array(data, dtype=np.float64)
        node_id = self._record(f"leaf:{name}", (), None)
        return Tensor(arr, requires_grad=True, node_id=node_id, tape=self)

    def grad(self, t: "Tensor") -> np.ndarray:
        """Gradient of the last ``backward`` call w.r.t. ``t``; zeros if unreached."""
        if t.tape is not self or t.node_id is None:
            return np.zeros(t.shape)
        g = self.gradients.get(t.node_id)
        return np.zeros(t.shape) if g is None else g


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False, node_id: int | None = None,
                 tape: Tape | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data) -> Tensor:
    """A constant (untracked) tensor."""
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError(f"{op}: operands recorded on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out)
    node_id = tape._record(op, [t.node_id if t.tape is tape else None for t in inputs], backward_fn)
    return Tensor(out, requires_grad=True, node_id=node_id, tape=tape)


def _checked(op: str, out: np.ndarray) -> np.ndarray:
    if __debug__ and not np.all(np.isfinite(out)):
        raise DomainError(f"{op}: non-finite output")
    return out


# ---------------------------------------------------------------- matmul

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {A.shape} and {B.shape}")
    shared = B.ndim == 2
    if A.shape[-1] != B.shape[-2] or (not shared and A.shape[:-2] != B.shape[:-2]):
        raise DimensionError(f"matmul: cannot multiply {A.shape} by {B.shape}")
    out = A @ B

    def bw(g):
        ga = g @ np.swapaxes(B, -1, -2)
        if shared:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _emit("matmul", out, (a, b), bw)


# ---------------------------------------------------------------- unary

def unary(kind: str, x) -> Tensor:
    x = _as_tensor(x)
    X = x.data
    if kind == "tanh":
        out = np.tanh(X)
        bw = lambda g: (g * (1.0 - out * out),)
    elif kind == "sigmoid":
        out = 0.5 * (1.0 + np.tanh(0.5 * X))
        bw = lambda g: (g * out * (1.0 - out),)
    elif kind == "relu":
        mask = X > 0
        out = np.where(mask, X, 0.0)
        bw = lambda g: (g * mask,)
    elif kind == "exp":
        out = _checked("exp", np.exp(X))
        bw = lambda g: (g * out,)
    elif kind == "log":
        if np.any(X <= 0):
            raise DomainError("log: all entries must be > 0")
        out = np.log(X)
        bw = lambda g: (g / X,)
    else:
        raise ValueError(f"unknown unary op {kind!r}")
    return _emit(kind, out, (x,), bw)


def tanh(x) -> Tensor:
    return unary("tanh", x)


def sigmoid(x) -> Tensor:
    return unary("sigmoid", x)


def relu(x) -> Tensor:
    return unary("relu", x)


def exp(x) -> Tensor:
    return unary("exp", x)


def log(x) -> Tensor:
    return unary("log", x)


# ---------------------------------------------------------------- binary

def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def binary(kind: str, a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    sa, sb = A.shape, B.shape
    if sa != sb:
        ok = (len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb) or (
            len(sa) <= len(sb) and sb[len(sb) - len(sa):] == sa)
        if not ok:
            raise DimensionError(f"{kind}: shapes {sa} and {sb} are not trailing-axis broadcastable")
    if kind == "add":
        out = A + B
        bw = lambda g: (_reduce_to(g, sa), _reduce_to(g, sb))
    elif kind == "sub":
        out = A - B
        bw = lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb))
    elif kind == "mul":
        out = A * B
        bw = lambda g: (_reduce_to(g * B, sa), _reduce_to(g * A, sb))
    else:
        raise ValueError(f"unknown binary op {kind!r}")
    return _emit(kind, out, (a, b), bw)


def add(a, b) -> Tensor:
    return binary("add", a, b)


def sub(a, b) -> Tensor:
    return binary("sub", a, b)


def mul(a, b) -> Tensor:
    return binary("mul", a, b)


def scale(x, c: float) -> Tensor:
    """Multiply by a python scalar."""
    x = _as_tensor(x)
    c = float(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


# ---------------------------------------------------------------- softmax

def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), bw)


# ---------------------------------------------------------------- shape ops

def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat: no parts")
    nd = parts[0].ndim
    ax = axis % nd
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != nd or any(p.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat: shape {p.shape} does not match {ref} off axis {axis}")
    if len(parts) == 1:
        return _emit("concat", parts[0].data.copy(), parts, lambda g: (g,))
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat", out, parts, bw)


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape != ref:
            raise DimensionError(f"stack: shape {p.shape} differs from {ref}")
    out = np.stack([p.data for p in parts], axis=axis)
    n = len(parts)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _emit("stack", out, parts, bw)


def slice_axis(x, axis: int, start: int, stop: int | None = None) -> Tensor:
    """``x[..., start:stop, ...]`` along ``axis``; an integer ``start`` with
    ``stop=None`` drops the axis (single index)."""
    x = _as_tensor(x)
    ax = axis % x.ndim
    idx: list = [slice(None)] * x.ndim
    idx[ax] = start if stop is None else slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx]
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _emit("slice", out, (x,), bw)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {src} -> {tuple(shape)}: {exc}") from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


# ---------------------------------------------------------------- reductions

def mean_pool(x, axis: int = 0) -> Tensor:
    x = _as_tensor(x)
    ax = axis % x.ndim
    n = x.shape[ax]
    if n < 1:
        raise DimensionError("mean_pool: empty axis")
    shape = x.shape
    out = x.data.mean(axis=ax)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),)

    return _emit("mean_pool", out, (x,), bw)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _emit("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.data.size
    return _emit("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


# ---------------------------------------------------------------- backward

def backward(tape: Tape, loss: Tensor | int) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns node_id -> gradient.

    Fan-in gradients are summed in node order, so repeated calls on the same
    tape produce bit-identical results.
    """
    if isinstance(loss, Tensor):
        if loss.tape is not tape or loss.node_id is None:
            raise ContractError("backward: loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
        loss_id = loss.node_id
        seed = np.ones_like(loss.data)
    else:
        loss_id = int(loss)
        seed = np.array(1.0)
    grads: dict[int, np.ndarray] = {loss_id: seed}
    for nid in range(loss_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward is None:
            continue
        for pid, pg in zip(node.parents, node.backward(g)):
            if pid is None or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    tape.gradients = grads
    return grads


# ---------------------------------------------------------------- grad check

def grad_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[np.ndarray],
               eps: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` maps a list of tensors (one per entry of ``params``) to a scalar tensor;
    it is called once on a tape and then repeatedly with plain constants.
    ``max_coords`` samples that many coordinates per parameter instead of all.
    Relative error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    base = [np.array(p, dtype=np.float64) for p in params]
    tape = Tape()
    leaves = [tape.variable(p) for p in base]
    backward(tape, f(leaves))
    analytic = [tape.grad(t) for t in leaves]
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for p, ga in zip(base, analytic):
        flat = p.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f([Tensor(q) for q in base]).item()
            flat[i] = orig - eps
            fm = f([Tensor(q) for q in base]).item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = ga.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
    return worst
