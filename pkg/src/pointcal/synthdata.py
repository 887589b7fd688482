"""Seeded synthetic datasets: labeled shape clouds and censored survival cohorts.

Three surface families have closed-form membership tests (unit sphere, the
surface of the cube ``[-1, 1]^3``, a torus with radii 1 and 0.4), so the
samplers themselves can be verified. Survival subjects are spheres stretched
along ``z``; the stretch sets an exponential hazard, and uniform censoring
times are calibrated to a target censored fraction.

Randomness comes from numpy's PCG64 generator; every dataset is a pure
function of its seed.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .geometry import normalize_unit_sphere, read_cloud, write_cloud
from .objectives import SurvivalRecord

SHAPES = ("sphere", "cube", "torus")
TORUS_MAJOR = 1.0
TORUS_MINOR = 0.4


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    n_points: int
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHAPES:
            raise ValueError(f"unknown shape {self.kind!r}; expected one of {SHAPES}")
        if self.n_points < 4:
            raise ValueError("a shape needs at least 4 points")
        if not 0 <= self.jitter < 0.1:
            raise ValueError("jitter must lie in [0, 0.1)")


def sample_surface(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples from the raw (unnormalized) surface."""
    if kind == "sphere":
        g = rng.standard_normal((n, 3))
        return g / np.linalg.norm(g, axis=1, keepdims=True)
    if kind == "cube":
        # six faces of equal area: pick a face, then a uniform point on it
        face = rng.integers(0, 6, size=n)
        pts = rng.uniform(-1.0, 1.0, size=(n, 3))
        axis = face % 3
        pts[np.arange(n), axis] = np.where(face < 3, 1.0, -1.0)
        return pts
    if kind == "torus":
        out = np.empty((0, 3))
        while out.shape[0] < n:
            m = 2 * (n - out.shape[0]) + 16
            u = rng.uniform(0, 2 * np.pi, m)
            v = rng.uniform(0, 2 * np.pi, m)
            # area element is proportional to R + r cos v
            keep = rng.uniform(0, 1, m) < (TORUS_MAJOR + TORUS_MINOR * np.cos(v)) / (TORUS_MAJOR + TORUS_MINOR)
            u, v = u[keep], v[keep]
            ring = TORUS_MAJOR + TORUS_MINOR * np.cos(v)
            pts = np.column_stack([ring * np.cos(u), ring * np.sin(u), TORUS_MINOR * np.sin(v)])
            out = np.vstack([out, pts])
        return out[:n]
    raise ValueError(f"unknown shape {kind!r}")


def sample_shape(spec: ShapeSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    pts = sample_surface(spec.kind, spec.n_points, rng)
    if spec.jitter > 0:
        pts = pts + spec.jitter * rng.standard_normal(pts.shape)
    return normalize_unit_sphere(pts)


def _child_seeds(seed: int, n: int, stream: int) -> list[int]:
    ss = np.random.SeedSequence([seed, stream])
    return [int(c.generate_state(1)[0]) for c in ss.spawn(n)]


def make_classification_dataset(n_per_class: int, n_points: int, jitter: float,
                                seed: int) -> list[tuple[np.ndarray, int]]:
    """Balanced sphere/cube/torus set, class-major order (labels 0, 1, 2)."""
    seeds = _child_seeds(seed, n_per_class * len(SHAPES), stream=0)
    items = []
    for label, kind in enumerate(SHAPES):
        for i in range(n_per_class):
            s = seeds[label * n_per_class + i]
            items.append((sample_shape(ShapeSpec(kind, n_points, jitter, s)), label))
    return items


@dataclass(frozen=True)
class SurvivalSpec:
    n_subjects: int = 440
    censoring_fraction: float = 0.76
    risk_link: str = "exp"
    link_scale: float = 4.0
    stretch_low: float = 1.0
    stretch_high: float = 2.0
    n_points: int = 256
    jitter: float = 0.02
    seed: int = 11

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if not 0 <= self.censoring_fraction < 1:
            raise ValueError("censoring_fraction must lie in [0, 1)")
        if self.risk_link not in ("identity", "exp"):
            raise ValueError("risk_link must be 'identity' or 'exp'")
        if not 0 < self.stretch_low < self.stretch_high:
            raise ValueError("need 0 < stretch_low < stretch_high")
        if self.risk_link == "identity" and self.stretch_low <= 0:
            raise ValueError("identity link needs positive stretch")

    def hazard(self, stretch: np.ndarray) -> np.ndarray:
        if self.risk_link == "identity":
            return np.asarray(stretch, dtype=np.float64)
        mid = 0.5 * (self.stretch_low + self.stretch_high)
        return np.exp(self.link_scale * (np.asarray(stretch) - mid))


def _censoring_horizon(rates: np.ndarray, target: float) -> float:
    """Upper end ``c`` of ``Uniform(0, c)`` censoring giving the target expected censored fraction."""
    def expected(c):
        x = rates * c
        return float(np.mean(-np.expm1(-x) / x)) - target

    hi = 1.0 / rates.min()
    while expected(hi) > 0:
        hi *= 2.0
    lo = hi
    while expected(lo) < 0:
        lo /= 2.0
    return brentq(expected, lo, hi, xtol=1e-14, rtol=1e-14)


@dataclass
class SurvivalCohort:
    clouds: list[np.ndarray]
    records: list[SurvivalRecord]
    stretch: np.ndarray
    hazard: np.ndarray
    event_time: np.ndarray
    censor_time: np.ndarray

    @property
    def censored_fraction(self) -> float:
        return 1.0 - float(np.mean([r.event for r in self.records]))

    def verify(self) -> None:
        """Re-derive the observed records from the retained latent times."""
        for r, t, c in zip(self.records, self.event_time, self.censor_time):
            assert r.observed_time == min(t, c)
            assert r.event == (t <= c)


def make_survival_dataset(spec: SurvivalSpec) -> SurvivalCohort:
    rng = np.random.default_rng([spec.seed, 1])
    n = spec.n_subjects
    stretch = rng.uniform(spec.stretch_low, spec.stretch_high, n)
    rates = spec.hazard(stretch)
    # 1 - U lies in (0, 1], keeping every latent time strictly positive
    event_time = -np.log(1.0 - rng.random(n)) / rates
    u = 1.0 - rng.random(n)
    if spec.censoring_fraction == 0:
        censor_time = np.full(n, np.inf)
    else:
        censor_time = u * _censoring_horizon(rates, spec.censoring_fraction)
    records = [SurvivalRecord(float(min(t, c)), bool(t <= c)) for t, c in zip(event_time, censor_time)]
    seeds = _child_seeds(spec.seed, n, stream=2)
    clouds = []
    for s, k in zip(seeds, stretch):
        r = np.random.default_rng(s)
        pts = sample_surface("sphere", spec.n_points, r)
        pts[:, 2] *= k
        if spec.jitter > 0:
            pts = pts + spec.jitter * r.standard_normal(pts.shape)
        clouds.append(normalize_unit_sphere(pts))
    return SurvivalCohort(clouds, records, stretch, rates, event_time, censor_time)


def split_dataset(n_items: int, fractions=(0.7, 0.15, 0.15), strata=None,
                  seed: int = 0) -> tuple[list[int], list[int], list[int]]:
    """Disjoint, exhaustive, optionally stratified train/val/test index lists."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng([seed, 3])
    if strata is None:
        groups = {0: np.arange(n_items)}
    else:
        strata = np.asarray(strata)
        if strata.shape[0] != n_items:
            raise ValueError("one stratum label per item is required")
        keys = sorted(set(strata.tolist()))
        groups = {k: np.flatnonzero(strata == k) for k in keys}
        small = [k for k, g in groups.items() if g.size < 3]
        if small:
            warnings.warn(f"strata {small} have fewer than 3 items; falling back to an unstratified split",
                          stacklevel=2)
            groups = {0: np.arange(n_items)}
    train, val, test = [], [], []
    for members in groups.values():
        perm = members[rng.permutation(members.size)]
        n_train = int(round(fractions[0] * members.size))
        n_val = int(round(fractions[1] * members.size))
        n_val = min(n_val, members.size - n_train)
        train.extend(perm[:n_train].tolist())
        val.extend(perm[n_train:n_train + n_val].tolist())
        test.extend(perm[n_train + n_val:].tolist())
    return sorted(train), sorted(val), sorted(test)


# ---------------------------------------------------------------------------
# on-disk datasets


@dataclass
class Dataset:
    task: str
    clouds: list[np.ndarray]
    splits: dict[str, list[int]]
    labels: list[int] | None = None
    records: list[SurvivalRecord] | None = None
    latent: dict[str, list[float]] | None = None
    meta: dict = field(default_factory=dict)

    def subset(self, split: str) -> list[int]:
        if split not in self.splits:
            raise KeyError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return self.splits[split]


def generate(spec: dict) -> Dataset:
    """Build a dataset from a generator spec (the ``data.generator`` config block)."""
    spec = dict(spec)
    kind = spec.pop("kind")
    fractions = tuple(spec.pop("fractions", (0.7, 0.15, 0.15)))
    if kind == "classification":
        n_per_class = int(spec.pop("n_per_class"))
        n_points = int(spec.pop("n_points", 256))
        jitter = float(spec.pop("jitter", 0.02))
        seed = int(spec.pop("seed", 0))
        if spec:
            raise ValueError(f"unknown classification generator keys: {sorted(spec)}")
        items = make_classification_dataset(n_per_class, n_points, jitter, seed)
        labels = [lab for _, lab in items]
        tr, va, te = split_dataset(len(items), fractions, labels, seed)
        meta = {"seed": seed, "spec": {"kind": kind, "n_per_class": n_per_class, "n_points": n_points,
                                       "jitter": jitter, "seed": seed, "fractions": list(fractions)},
                "n_classes": len(SHAPES), "class_names": list(SHAPES)}
        return Dataset("classify", [c for c, _ in items], {"train": tr, "val": va, "test": te},
                       labels=labels, meta=meta)
    if kind == "survival":
        sspec = SurvivalSpec(**spec)
        cohort = make_survival_dataset(sspec)
        events = [r.event for r in cohort.records]
        tr, va, te = split_dataset(len(events), fractions, events, sspec.seed)
        meta = {"seed": sspec.seed, "spec": {"kind": kind, **asdict(sspec), "fractions": list(fractions)},
                "realized_censoring": cohort.censored_fraction}
        latent = {"stretch": cohort.stretch.tolist(), "hazard": cohort.hazard.tolist(),
                  "event_time": cohort.event_time.tolist(),
                  "censor_time": [None if np.isinf(c) else float(c) for c in cohort.censor_time]}
        return Dataset("survival", cohort.clouds, {"train": tr, "val": va, "test": te},
                       records=cohort.records, latent=latent, meta=meta)
    raise ValueError(f"unknown generator kind {kind!r}")


def write_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    items = []
    for i, cloud in enumerate(ds.clouds):
        rel = f"clouds/{i:05d}.xyz"
        write_cloud(out / rel, cloud)
        item: dict = {"cloud": rel}
        if ds.labels is not None:
            item["label"] = int(ds.labels[i])
        if ds.records is not None:
            item["time"] = ds.records[i].observed_time
            item["event"] = ds.records[i].event
        if ds.latent is not None:
            item["latent"] = {k: v[i] for k, v in ds.latent.items()}
        items.append(item)
    manifest = {"task": ds.task, **ds.meta, "items": items, "splits": ds.splits}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_dataset(manifest_path) -> Dataset:
    path = Path(manifest_path)
    manifest = json.loads(path.read_text())
    base = path.parent
    items = manifest["items"]
    clouds = [read_cloud(base / it["cloud"]) for it in items]
    meta = {k: v for k, v in manifest.items() if k not in ("task", "items", "splits")}
    ds = Dataset(manifest["task"], clouds, {k: list(v) for k, v in manifest["splits"].items()}, meta=meta)
    if manifest["task"] == "classify":
        ds.labels = [int(it["label"]) for it in items]
    else:
        ds.records = [SurvivalRecord(float(it["time"]), bool(it["event"])) for it in items]
        if all("latent" in it for it in items):
            keys = items[0]["latent"].keys()
            ds.latent = {k: [it["latent"][k] for it in items] for k in keys}
    return ds
