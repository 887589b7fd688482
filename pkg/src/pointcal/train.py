"""Training loop, evaluation and full-model gradient checks."""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import encoder as E
from . import synthdata
from . import tensor as T
from .errors import ConfigError, NonFiniteError, UndefinedMetricError
from .objectives import Adam, classification_metrics, concordance_index, cox_loss, step_decay_lr
from .recalibration import RecalibMode

log = logging.getLogger(__name__)


class TrainingError(NonFiniteError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 1e-3
    decay: float = 0.7
    decay_every: int = 20
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.decay_every < 1 or not self.lr > 0:
            raise ConfigError(f"invalid training settings: {asdict(self)}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"unknown training keys: {unknown}")
        return cls(**d)


class PlanCache:
    """Per-cloud sampling/grouping plans; geometry is independent of the weights."""

    def __init__(self, clouds, cfg: E.ModelConfig):
        self.clouds = clouds
        self.cfg = cfg
        self._plans: dict[int, list[E.LayerPlan]] = {}

    def __getitem__(self, i: int) -> list[E.LayerPlan]:
        plan = self._plans.get(i)
        if plan is None:
            plan = self._plans[i] = E.build_plan(self.clouds[i], self.cfg)
        return plan


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("POINTCAL_THREADS", "1")))
    except ValueError:
        return 1


def predict(ds: synthdata.Dataset, indices, cfg: E.ModelConfig, state: E.ModelState,
            plans: PlanCache | None = None) -> np.ndarray:
    """Model outputs for the given items, one row each, in index order."""
    plans = plans or PlanCache(ds.clouds, cfg)
    indices = list(indices)
    for i in indices:  # build plans up front so workers only read
        plans[i]

    def run(i):
        return E.forward(ds.clouds[i], cfg, state, plans[i]).data[0]

    workers = _threads()
    if workers == 1 or len(indices) < 2:
        rows = [run(i) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, indices))
    return np.array(rows).reshape(len(indices), cfg.out_dim)


def evaluate(ds: synthdata.Dataset, split: str, cfg: E.ModelConfig, state: E.ModelState,
             plans: PlanCache | None = None) -> dict:
    idx = ds.subset(split)
    out = predict(ds, idx, cfg, state, plans)
    if ds.task == "classify":
        pred = out.argmax(axis=1)
        return classification_metrics(pred, [ds.labels[i] for i in idx], cfg.n_classes).to_dict()
    return {"c_index": concordance_index(out[:, 0], [ds.records[i] for i in idx])}


def _val_score(ds, cfg, state, plans) -> float:
    try:
        m = evaluate(ds, "val", cfg, state, plans)
    except UndefinedMetricError:
        return float("nan")
    return m["accuracy"] if ds.task == "classify" else m["c_index"]


def _batch_loss(ds, batch, cfg, state, plans) -> float:
    if ds.task == "classify":
        total = 0.0
        for i in batch:
            loss = T.softmax_cross_entropy(E.forward(ds.clouds[i], cfg, state, plans[i]), ds.labels[i])
            T.backward(T.mul_scalar(loss, 1.0 / len(batch)))
            total += loss.item()
        return total / len(batch)
    risks = [E.forward(ds.clouds[i], cfg, state, plans[i]) for i in batch]
    records = [ds.records[i] for i in batch]
    n_events = max(1, sum(r.event for r in records))
    loss = T.mul_scalar(cox_loss(risks, records), 1.0 / n_events)
    T.backward(loss)
    return loss.item()


def train(ds: synthdata.Dataset, cfg: E.ModelConfig, tcfg: TrainConfig, out_dir=None):
    """Fit ``cfg`` on the train split; returns the best-validation state and per-epoch rows.

    When ``out_dir`` is given, ``metrics.csv`` and ``checkpoint.bin`` are
    written there (the checkpoint holds the best-validation weights).
    """
    state = E.init_state(cfg, tcfg.seed)
    opt = Adam(state.params, lr=tcfg.lr)
    plans = PlanCache(ds.clouds, cfg)
    train_idx = np.array(ds.subset("train"))
    metric_name = "val_accuracy" if ds.task == "classify" else "val_cindex"
    rows: list[dict] = []
    best_state, best_score, best_epoch = state.copy(), -np.inf, -1
    rng = np.random.default_rng([tcfg.seed, 17])
    for epoch in range(tcfg.epochs):
        lr = step_decay_lr(tcfg.lr, epoch, tcfg.decay, tcfg.decay_every)
        order = train_idx[rng.permutation(train_idx.size)]
        losses = []
        for step, start in enumerate(range(0, order.size, tcfg.batch_size)):
            batch = order[start:start + tcfg.batch_size].tolist()
            opt.zero_grad()
            try:
                losses.append(_batch_loss(ds, batch, cfg, state, plans))
                opt.step(lr)
            except NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch} step {step}: {exc}") from exc
        score = _val_score(ds, cfg, state, plans)
        rows.append({"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
                     metric_name: score})
        log.info("epoch %d lr %.2e loss %.5f %s %.4f", epoch, lr, rows[-1]["train_loss"], metric_name, score)
        if score >= best_score:
            best_state, best_score, best_epoch = state.copy(), score, epoch
    if out_dir is not None:
        out = Path(out_dir)
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", metric_name])
            for r in rows:
                w.writerow([r["epoch"], repr(r["train_loss"]), repr(r[metric_name])])
        E.save_checkpoint(out / "checkpoint.bin", cfg, best_state,
                          extra={"task": ds.task, "best_epoch": best_epoch,
                                 "best_val": None if best_epoch < 0 else best_score})
    return best_state, rows


# ---------------------------------------------------------------------------
# full-model gradient check


def _dead_tensors(state: E.ModelState) -> list[str]:
    return [name for name, p in state.params.items() if not np.any(p.grad)]


def _smallest_nonzero_grad(state: E.ModelState) -> float:
    g = np.abs(np.concatenate([p.grad.ravel() for p in state.params.values()]))
    g = g[g > 0]
    return float(g.min()) if g.size else np.inf


def gradcheck_model(cfg: E.ModelConfig, seed: int = 0, eps: float = 1e-5, kink_margin: float = 1e-4,
                    resolution: float = 3e-7, corrupt: float = 0.0, max_attempts: int = 500) -> dict:
    """Finite-difference check of every parameter on a random instance.

    Instances (cloud, weights, biases, label) are redrawn from ``seed``,
    ``seed + 1``, ... until the instance is well conditioned for central
    differences: no ReLU input or max-out gap lies within ``kink_margin`` of a
    kink, every parameter tensor receives some gradient (a network whose
    ReLUs are all off would pass trivially), and no gradient element is
    nonzero yet smaller than ``resolution``.
    With an O(1) loss and ``eps=1e-5`` the float64 noise of a central
    difference is around 1e-11, so smaller elements cannot be resolved to a
    1e-4 relative error. Elements that are exactly zero are still checked.
    """
    n_points = cfg.layers[0].n_centroids * 2
    for attempt in range(max_attempts):
        s = seed + attempt
        rng = np.random.default_rng([s, 29])
        kind = synthdata.SHAPES[s % len(synthdata.SHAPES)]
        cloud = synthdata.sample_shape(synthdata.ShapeSpec(kind, n_points, 0.02, int(rng.integers(2**31))))
        state = E.init_state(cfg, s)
        for name, p in state.params.items():
            if name.endswith(".bias"):
                p.data[...] = rng.uniform(-0.1, 0.1, p.shape)
        label = int(rng.integers(cfg.out_dim)) if cfg.head == "classify" else 0
        plan = E.build_plan(cloud, cfg)

        def build():
            out = E.forward(cloud, cfg, state, plan)
            if cfg.head == "classify":
                return T.softmax_cross_entropy(out, label)
            return T.mul_scalar(out, 1.0)

        with T.track_kinks() as km:
            loss = build()
        if km.margin < kink_margin:
            continue
        state.zero_grad()
        T.backward(loss)
        smallest = _smallest_nonzero_grad(state)
        if smallest >= resolution and not _dead_tensors(state):
            break
    else:
        raise NonFiniteError(f"no well-conditioned instance (kink margin >= {kink_margin}, "
                             f"no dead tensors, gradient resolution >= {resolution}) in {max_attempts} attempts")
    report = T.grad_check(build, state.params, eps=eps, corrupt=corrupt)
    return {"mode": cfg.recalib_mode.value, "instance_seed": s, "attempts": attempt + 1,
            "kink_margin": km.margin, "smallest_grad": smallest, "n_params": state.n_params(), **report.to_dict()}


def parameter_report(cfg: E.ModelConfig) -> dict:
    base = E.baseline_param_count(cfg)
    modes = {}
    for mode in RecalibMode:
        total = E.total_param_count(cfg.with_mode(mode))
        modes[mode.value] = {"total": total, "overhead": total - base,
                             "overhead_pct": 100.0 * (total - base) / base}
    return {"baseline": base, "spatial_placement": cfg.spatial_placement, "r": cfg.r, "modes": modes}
