"""Losses, metrics and the optimizer.

The Cox loss is the negative partial log-likelihood with Breslow risk sets
(every subject whose observed time is at least ``y_i`` is at risk at
``y_i``). Harrell's c-index counts pairs whose earlier time is an event;
tied risks earn half credit.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from . import tensor as T
from .errors import CountError, NonFiniteError, UndefinedMetricError
from .tensor import Tensor


@dataclass(frozen=True)
class SurvivalRecord:
    observed_time: float
    event: bool

    def __post_init__(self):
        if not self.observed_time > 0:
            raise ValueError(f"observed time must be positive, got {self.observed_time}")


def _times_events(records: Sequence[SurvivalRecord]) -> tuple[np.ndarray, np.ndarray]:
    times = np.array([r.observed_time for r in records], dtype=np.float64)
    events = np.array([bool(r.event) for r in records], dtype=np.bool_)
    return times, events


def _risk_array(risks) -> tuple[np.ndarray, list[Tensor]]:
    if isinstance(risks, Tensor):
        return risks.data.reshape(-1).copy(), [risks]
    items = list(risks)
    if items and all(isinstance(r, Tensor) for r in items):
        return np.array([r.item() for r in items]), items
    return np.asarray(items, dtype=np.float64).reshape(-1), []


def _cox_terms(h: np.ndarray, times: np.ndarray, events: np.ndarray):
    # log of the summed exp(h) over each subject's risk set
    desc = np.argsort(-times, kind="stable")
    acc = np.logaddexp.accumulate(h[desc])
    last = np.searchsorted(-times[desc], -times, side="right") - 1
    lse = acc[last]
    loss = -np.sum(np.where(events, h - lse, 0.0))

    # d loss / d h_k = -event_k + exp(h_k) * sum_{i event, y_i <= y_k} exp(-lse_i)
    asc = np.argsort(times, kind="stable")
    with np.errstate(divide="ignore"):
        terms = np.where(events[asc], -lse[asc], -np.inf)
    acc_up = np.logaddexp.accumulate(terms)
    last_up = np.searchsorted(times[asc], times, side="right") - 1
    grad = np.exp(h + acc_up[last_up]) - events
    return loss, grad


def cox_loss(risks, records: Sequence[SurvivalRecord]) -> Tensor:
    """Negative Cox partial log-likelihood as a ``1x1`` tensor.

    ``risks`` is a list of ``1x1`` tensors (one per subject), a single tensor
    holding all risks, or a plain array (then the result carries no graph).
    """
    h, parents = _risk_array(risks)
    if h.size == 0:
        raise CountError("cox_loss needs at least one subject")
    if len(records) != h.size:
        raise CountError(f"{h.size} risks but {len(records)} survival records")
    times, events = _times_events(records)
    if not events.any():
        loss, grad = 0.0, np.zeros_like(h)
    else:
        loss, grad = _cox_terms(h, times, events)
    if not parents:
        return Tensor(np.array([[loss]]))
    if len(parents) == 1:
        shape = parents[0].shape
        return T.custom_op(np.array([[loss]]), parents, lambda g: [g[0, 0] * grad.reshape(shape)], "cox_loss")
    return T.custom_op(np.array([[loss]]), parents,
                       lambda g: [np.array([[g[0, 0] * gk]]) for gk in grad], "cox_loss")


def concordance_index(risks, records: Sequence[SurvivalRecord]) -> float:
    h, _ = _risk_array(risks)
    if len(records) != h.size:
        raise CountError(f"{h.size} risks but {len(records)} survival records")
    times, events = _times_events(records)
    num, den = kernels.concordance(np.ascontiguousarray(h), times, events)
    if den == 0:
        raise UndefinedMetricError("no comparable pairs: the c-index is undefined")
    return float(num) / float(den)


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return asdict(self)


def classification_metrics(predictions, labels, n_classes: int) -> MetricReport:
    """Accuracy plus macro-averaged precision and recall; F1 is their harmonic mean."""
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.size != true.size:
        raise CountError(f"{pred.size} predictions but {true.size} labels")
    if pred.size == 0:
        raise CountError("classification metrics need at least one item")
    classes = np.arange(n_classes)
    hit = pred[:, None] == classes[None, :]
    is_true = true[:, None] == classes[None, :]
    tp = np.count_nonzero(hit & is_true, axis=0)
    n_pred = np.count_nonzero(hit, axis=0)
    n_true = np.count_nonzero(is_true, axis=0)
    precision = np.divide(tp, n_pred, out=np.zeros(n_classes), where=n_pred > 0).mean()
    recall = np.divide(tp, n_true, out=np.zeros(n_classes), where=n_true > 0).mean()
    pr = precision + recall
    f1 = 0.0 if pr == 0 else 2 * precision * recall / pr
    return MetricReport(float(np.mean(pred == true)), float(precision), float(recall), float(f1))


def step_decay_lr(base_lr: float, epoch: int, factor: float = 0.7, every: int = 20) -> float:
    return base_lr * factor ** (epoch // every)


class Adam:
    """Bias-corrected Adam over a name -> parameter mapping, updated in place."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.m, self.v, self.t + 1,
                  self.lr if lr is None else lr, self.beta1, self.beta2, self.eps)
        self.t += 1


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              m: dict[str, np.ndarray], v: dict[str, np.ndarray], t: int, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in params:
        if not np.isfinite(grads[name]).all():
            raise NonFiniteError(f"non-finite gradient for {name} at step {t}")
    for name, p in params.items():
        g = grads[name]
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
        p.data -= lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + eps)
