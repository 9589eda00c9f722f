"""Dense float64 tensors with a dynamic reverse-mode tape.

Operations are recorded onto the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape everything is plain
numpy arithmetic, which is how the key encoder and evaluation passes run.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, DegenerateInputWarning, DimensionError

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of primitive ops. Use as a context manager."""

    nodes: list[_Node] = field(default_factory=list)
    last_backward_visits: int = 0

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
        backward(loss, self, params)


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].nodes.append(_Node(out, inputs, vjp, op))
    return out


def backward(loss: Tensor, tape: Tape, params: Sequence[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves listed in ``params`` that the loss does not reach receive a zero
    gradient so optimizers can treat them uniformly.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    produced = {id(n.out) for n in tape.nodes}
    visits = 0
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        visits += 1
        for inp, ig in zip(node.inputs, node.vjp(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if key not in produced:
                leaves[key] = inp
    tape.last_backward_visits = visits
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), vjp, "matmul")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _record(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), vjp, "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    # np.maximum propagates NaN, so a diverged input stays visible downstream
    out = Tensor(np.maximum(x.data, 0.0))

    def vjp(g):
        return (g * mask,)

    return _record(out, (x,), vjp, "relu")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.T)

    def vjp(g):
        return (g.T,)

    return _record(out, (x,), vjp, "transpose")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def vjp(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), vjp, "reshape")


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), vjp, "sum")


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in ts]} along axis {axis}") from exc
    edges = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, edges, axis=axis))

    return _record(out, ts, vjp, "concat")


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale every trailing-axis vector to unit length.

    Vectors with norm below ``eps`` map to zero (with zero gradient) and a
    :class:`DegenerateInputWarning` is emitted.
    """
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    degenerate = norm < eps
    if degenerate.any():
        warnings.warn(
            f"l2_normalize: {int(degenerate.sum())} vector(s) with norm < {eps:g} mapped to zero",
            DegenerateInputWarning,
            stacklevel=2,
        )
    safe = np.where(degenerate, 1.0, norm)
    y = np.where(degenerate, 0.0, x.data / safe)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(degenerate, 0.0, (g - y * dot) / safe),)

    return _record(out, (x,), vjp, "l2_normalize")


def batch_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalise each column of a 2-D batch with its own batch statistics.

    ``(x - mean) / sqrt(var + eps)`` with the biased variance and no affine
    parameters; gradients flow through the mean and variance.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"batch_norm expects a 2-D batch, got shape {x.shape}")
    mu = x.data.mean(axis=0)
    inv = 1.0 / np.sqrt(x.data.var(axis=0) + eps)
    y = (x.data - mu) * inv
    out = Tensor(y)

    def vjp(g):
        return (inv * (g - g.mean(axis=0) - y * (g * y).mean(axis=0)),)

    return _record(out, (x,), vjp, "batch_norm")


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with the max shift (plain numpy helper)."""
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def soft_target_cross_entropy(logits, weights) -> Tensor:
    """``sum_ij w_ij * (-log softmax(logits)_ij)`` for a constant weight matrix.

    Every softmax-family loss in the lab reduces to this op: cross-entropy
    uses one-hot rows scaled by 1/B, the contrastive losses put their
    positive mass on the key columns.
    """
    logits = as_tensor(logits)
    w = np.asarray(weights, dtype=np.float64)
    if logits.data.ndim != 2 or w.shape != logits.shape:
        raise DimensionError(f"weights {w.shape} must match 2-D logits {logits.shape}")
    if logits.shape[1] == 0:
        raise DimensionError("logits have zero classes")
    logp = log_softmax(logits.data)
    out = Tensor(-(w * logp).sum())
    row_mass = w.sum(axis=1, keepdims=True)

    def vjp(g):
        return (g * (row_mass * np.exp(logp) - w),)

    return _record(out, (logits,), vjp, "soft_target_cross_entropy")


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Batch-mean of ``-log softmax(logits)[target]``."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be B x K, got {logits.shape}")
    b, k = logits.shape
    if k == 0:
        raise DimensionError("logits have zero classes")
    if b == 0:
        raise ContractError("empty batch")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != b:
        raise DimensionError(f"{t.shape[0]} targets for {b} logit rows")
    if (t < 0).any() or (t >= k).any():
        raise IndexError(f"target out of range [0, {k}): {t[(t < 0) | (t >= k)][:5].tolist()}")
    w = np.zeros((b, k))
    w[np.arange(b), t] = 1.0 / b
    return soft_target_cross_entropy(logits, w)


def linear(x, weight, bias=None) -> Tensor:
    """Fused ``x @ weight.T + bias`` with weight stored as (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is None:
        out = Tensor(y)

        def vjp(g):
            return g @ weight.data, g.T @ x.data

        return _record(out, (x, weight), vjp, "linear")
    bias = as_tensor(bias)
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias {bias.shape} does not match weight {weight.shape}")
    out = Tensor(y + bias.data)

    def vjp_b(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _record(out, (x, weight, bias), vjp_b, "linear")
