"""A small reverse-mode differentiation engine over dense float64 arrays.

Only the operations the point-cloud networks need are provided. Every op
returns a new :class:`Tensor` that remembers its parents and a closure that
pushes the output gradient back into them; :func:`backward` walks the graph
in reverse topological order.

Conventions
-----------
* Scalars are ``1x1`` tensors.
* ReLU has derivative 0 at exactly 0.
* Max operations route the gradient to the first operand / first argmax on ties.
* Gradients accumulate (``+=``) into leaves until :meth:`Tensor.zero_grad`.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import DimensionError, EmptyInputError, NonFiniteError

_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = np.nextafter(1.0, 0.0)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, *, name: str | None = None,
                 _parents: tuple = (), _op: str = ""):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor produced by {_op or 'input'!r}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = _parents
        self._backward: Callable[[], None] | None = None
        self.op = _op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{label})"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, _parents=parents if needs else (), _op=op)
    # intermediate gradients are allocated by backward()
    out.requires_grad = needs
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


def _require_2d(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise DimensionError(f"{op} expects a 2-D tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# kink monitoring (used by gradient checks to stay away from non-smooth points)


class KinkMonitor:
    """Smallest distance to a non-differentiable point seen during a forward pass."""

    def __init__(self) -> None:
        self.margin = np.inf

    def update(self, value: float) -> None:
        if value < self.margin:
            self.margin = float(value)


_monitor: KinkMonitor | None = None


@contextmanager
def track_kinks() -> Iterator[KinkMonitor]:
    global _monitor
    prev, _monitor = _monitor, KinkMonitor()
    try:
        yield _monitor
    finally:
        _monitor = prev


def _distinct_gap(values: np.ndarray, axis: int) -> float:
    # gap between the maximum and the largest strictly smaller value; exact
    # copies of the maximum move together and do not form a kink
    top = values.max(axis=axis, keepdims=True)
    below = np.where(values < top, values, -np.inf).max(axis=axis, keepdims=True)
    gap = top - below
    return float(gap.min()) if gap.size else np.inf


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = _result(a.data @ b.data, (a, b), "matmul")

    def _backward():
        _accumulate(a, out.grad @ b.data.T)
        _accumulate(b, a.data.T @ out.grad)

    out._backward = _backward
    return out


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    _require_2d(x, "transpose")
    out = _result(x.data.T, (x,), "transpose")

    def _backward():
        _accumulate(x, out.grad.T)

    out._backward = _backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = _result(a.data + b.data, (a, b), "add")

    def _backward():
        _accumulate(a, out.grad)
        _accumulate(b, out.grad)

    out._backward = _backward
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1xC row to every row of an NxC tensor."""
    x, b = _as_tensor(x), _as_tensor(b)
    _require_2d(x, "add_bias")
    if b.shape != (1, x.shape[1]):
        raise DimensionError(f"add_bias needs a 1x{x.shape[1]} bias, got {b.shape}")
    out = _result(x.data + b.data, (x, b), "add_bias")

    def _backward():
        _accumulate(x, out.grad)
        _accumulate(b, out.grad.sum(axis=0, keepdims=True))

    out._backward = _backward
    return out


def mul_scalar(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    out = _result(x.data * c, (x,), "mul_scalar")

    def _backward():
        _accumulate(x, out.grad * c)

    out._backward = _backward
    return out


def total(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = _result(np.array([[x.data.sum()]]), (x,), "total")

    def _backward():
        _accumulate(x, np.full_like(x.data, out.grad[0, 0]))

    out._backward = _backward
    return out


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if _monitor is not None and x.size:
        _monitor.update(float(np.abs(x.data).min()))
    mask = x.data > 0
    out = _result(np.where(mask, x.data, 0.0), (x,), "relu")

    def _backward():
        _accumulate(x, out.grad * mask)

    out._backward = _backward
    return out


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep gates strictly inside (0, 1) even where float64 saturates
    return np.clip(s, _SIG_LO, _SIG_HI)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _stable_sigmoid(x.data)
    out = _result(s, (x,), "sigmoid")

    def _backward():
        _accumulate(x, out.grad * s * (1.0 - s))

    out._backward = _backward
    return out


def column_mean(f: Tensor) -> Tensor:
    f = _as_tensor(f)
    _require_2d(f, "column_mean")
    n = f.shape[0]
    if n == 0:
        raise EmptyInputError("column_mean of a matrix with no rows")
    # summing each column in sorted order makes the result bitwise independent
    # of row order, so row permutations commute exactly with channel gating
    mean = np.sort(f.data, axis=0).sum(axis=0, keepdims=True) / n
    out = _result(mean, (f,), "column_mean")

    def _backward():
        _accumulate(f, np.repeat(out.grad / n, n, axis=0))

    out._backward = _backward
    return out


def scale_columns(f: Tensor, s: Tensor) -> Tensor:
    f, s = _as_tensor(f), _as_tensor(s)
    _require_2d(f, "scale_columns")
    if s.shape != (1, f.shape[1]):
        raise DimensionError(f"scale_columns width mismatch: F {f.shape}, s {s.shape}")
    out = _result(f.data * s.data, (f, s), "scale_columns")

    def _backward():
        _accumulate(f, out.grad * s.data)
        _accumulate(s, (out.grad * f.data).sum(axis=0, keepdims=True))

    out._backward = _backward
    return out


def scale_rows(f: Tensor, s: Tensor) -> Tensor:
    f, s = _as_tensor(f), _as_tensor(s)
    _require_2d(f, "scale_rows")
    if s.shape != (f.shape[0], 1):
        raise DimensionError(f"scale_rows height mismatch: F {f.shape}, s {s.shape}")
    out = _result(f.data * s.data, (f, s), "scale_rows")

    def _backward():
        _accumulate(f, out.grad * s.data)
        _accumulate(s, (out.grad * f.data).sum(axis=1, keepdims=True))

    out._backward = _backward
    return out


def elementwise_max(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"elementwise_max shape mismatch: {a.shape} vs {b.shape}")
    if _monitor is not None and a.size:
        diff = np.abs(a.data - b.data)
        diff = diff[diff > 0]
        if diff.size:
            _monitor.update(float(diff.min()))
    take_a = a.data >= b.data
    out = _result(np.where(take_a, a.data, b.data), (a, b), "elementwise_max")

    def _backward():
        _accumulate(a, np.where(take_a, out.grad, 0.0))
        _accumulate(b, np.where(take_a, 0.0, out.grad))

    out._backward = _backward
    return out


def max_over_group(g: Tensor, groups: int = 1) -> Tensor:
    """Column-wise max over consecutive row blocks.

    ``g`` holds ``groups`` blocks of equal height stacked vertically; the result
    has one row per block. With the default ``groups=1`` this is the plain
    per-column maximum of an ``m x C`` matrix.
    """
    g = _as_tensor(g)
    _require_2d(g, "max_over_group")
    rows, c = g.shape
    if rows == 0 or groups < 1:
        raise EmptyInputError("max_over_group of an empty group")
    if rows % groups:
        raise DimensionError(f"{rows} rows cannot be split into {groups} equal groups")
    k = rows // groups
    blocks = g.data.reshape(groups, k, c)
    if _monitor is not None and k > 1:
        _monitor.update(_distinct_gap(blocks, axis=1))
    arg = blocks.argmax(axis=1)  # first argmax on ties
    out = _result(np.take_along_axis(blocks, arg[:, None, :], axis=1)[:, 0, :], (g,), "max_over_group")

    def _backward():
        if not g.requires_grad:
            return
        gg = np.zeros((groups, k, c))
        np.put_along_axis(gg, arg[:, None, :], out.grad[:, None, :], axis=1)
        g.grad += gg.reshape(rows, c)

    out._backward = _backward
    return out


def gather_rows(f: Tensor, idx) -> Tensor:
    """Rows ``f[idx]``; the backward pass scatter-adds into repeated rows."""
    f = _as_tensor(f)
    _require_2d(f, "gather_rows")
    idx = np.ascontiguousarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= f.shape[0]):
        raise IndexError(f"gather index out of range for {f.shape[0]} rows")
    out = _result(f.data[idx], (f,), "gather_rows")

    def _backward():
        if f.requires_grad:
            kernels.scatter_add_rows(f.grad, idx, np.ascontiguousarray(out.grad))

    out._backward = _backward
    return out


def concat_columns(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_2d(a, "concat_columns")
    _require_2d(b, "concat_columns")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_columns height mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = _result(np.concatenate([a.data, b.data], axis=1), (a, b), "concat_columns")

    def _backward():
        _accumulate(a, out.grad[:, :ca])
        _accumulate(b, out.grad[:, ca:])

    out._backward = _backward
    return out


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    logits = _as_tensor(logits)
    if logits.data.ndim != 2 or logits.shape[0] != 1:
        raise DimensionError(f"softmax_cross_entropy expects 1xK logits, got {logits.shape}")
    k = logits.shape[1]
    if not 0 <= label < k:
        raise IndexError(f"label {label} out of range for {k} classes")
    z = logits.data[0]
    shift = z.max()
    lse = shift + np.log(np.exp(z - shift).sum())
    out = _result(np.array([[lse - z[label]]]), (logits,), "softmax_cross_entropy")

    def _backward():
        p = np.exp(z - lse)
        p[label] -= 1.0
        _accumulate(logits, out.grad[0, 0] * p[None, :])

    out._backward = _backward
    return out


def custom_op(value: np.ndarray, parents: Sequence[Tensor], grads: Callable[[np.ndarray], Sequence[np.ndarray]],
              op: str) -> Tensor:
    """Node with a hand-written backward.

    ``grads(out_grad)`` returns one gradient array per parent.
    """
    parents = tuple(parents)
    out = _result(np.asarray(value, dtype=np.float64), parents, op)

    def _backward():
        for p, gp in zip(parents, grads(out.grad)):
            _accumulate(p, gp)

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# backward pass


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = [n for n in _topological(loss) if n.requires_grad]
    for node in order:
        if not node.is_leaf:
            node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()
    for node in order:
        if node.is_leaf and not np.isfinite(node.grad).all():
            raise NonFiniteError(f"non-finite gradient in parameter {node.name or node}")


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradReport:
    errors: dict[str, float] = field(default_factory=dict)
    worst_index: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error < tol

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_error,
            "params": {
                name: {"max_rel_error": self.errors[name], "worst_index": list(self.worst_index[name])}
                for name in self.errors
            },
        }


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(build: Callable[[], Tensor], params: Mapping[str, Tensor] | Sequence[Tensor],
               eps: float = 1e-5, corrupt: float = 0.0) -> GradReport:
    """Compare analytic gradients of ``build()`` with central differences.

    ``build`` must construct the scalar loss from the current parameter values.
    ``corrupt`` scales the analytic gradients by ``1 + corrupt`` before the
    comparison; it exists so the checker's sensitivity can itself be tested.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.zero_grad()
    backward(build())
    analytic = {name: p.grad.copy() * (1.0 + corrupt) for name, p in params.items()}

    def _loss() -> float:
        try:
            return build().item()
        except NonFiniteError as exc:
            raise NonFiniteError(f"loss evaluation failed during perturbation: {exc}") from exc

    report = GradReport()
    for name, p in params.items():
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = _loss()
            flat[i] = orig - eps
            down = _loss()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * eps)
        err = relative_error(analytic[name], numeric)
        worst = int(np.argmax(err)) if err.size else 0
        report.errors[name] = float(err.reshape(-1)[worst]) if err.size else 0.0
        report.worst_index[name] = tuple(int(v) for v in np.unravel_index(worst, p.shape))
    return report


__all__ = [
    "GradReport",
    "KinkMonitor",
    "Tensor",
    "add",
    "add_bias",
    "backward",
    "column_mean",
    "concat_columns",
    "custom_op",
    "elementwise_max",
    "gather_rows",
    "grad_check",
    "matmul",
    "max_over_group",
    "mul_scalar",
    "parameter",
    "relative_error",
    "relu",
    "scale_columns",
    "scale_rows",
    "sigmoid",
    "softmax_cross_entropy",
    "total",
    "track_kinks",
    "transpose",
]
