"""Command-line interface.

Verbs: ``gen-data``, ``train``, ``eval``, ``gradcheck``, ``export-activations``
and ``params``. Configs are single JSON documents; reports go to stdout as
JSON (and to ``--out`` when given), per-epoch and per-point streams as CSV.

Exit codes: 0 success, 1 validation/config error, 2 numerical failure
(non-finite values or a failed gradient check), 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import encoder as E
from . import synthdata
from .errors import ConfigError, NonFiniteError, PointcalError
from .geometry import read_cloud
from .recalibration import RecalibMode
from .train import TrainConfig, evaluate, gradcheck_model, parameter_report, train

log = logging.getLogger("pointcal")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

TASK_HEADS = {"classify": "classify", "survival": "risk"}
SURVIVAL_BATCH = 32


def default_generator(task: str) -> dict:
    if task == "classify":
        return {"kind": "classification", "n_per_class": 50, "n_points": 256, "jitter": 0.02,
                "seed": 7, "fractions": [0.6, 0.2, 0.2]}
    return {"kind": "survival", **asdict(synthdata.SurvivalSpec()), "fractions": [0.7, 0.15, 0.15]}


@dataclass
class RunConfig:
    task: str = "classify"
    model: E.ModelConfig = field(default_factory=E.ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: dict = field(default_factory=dict)
    out: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = sorted(set(d) - {"task", "model", "training", "data", "out"})
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        task = d.get("task", "classify")
        if task not in TASK_HEADS:
            raise ConfigError(f"task must be one of {sorted(TASK_HEADS)}")
        model = dict(d.get("model", {}))
        head = model.setdefault("head", TASK_HEADS[task])
        if head != TASK_HEADS[task]:
            raise ConfigError(f"task {task!r} needs head {TASK_HEADS[task]!r}, config says {head!r}")
        data = dict(d.get("data", {}))
        unknown = sorted(set(data) - {"manifest", "generator"})
        if unknown:
            raise ConfigError(f"unknown data keys: {unknown}")
        if "manifest" not in data:
            gen = default_generator(task)
            given = data.get("generator", {})
            if given.get("kind", gen["kind"]) != gen["kind"]:
                gen = {"kind": given["kind"]}
            gen.update(given)
            data["generator"] = gen
        training = dict(d.get("training", {}))
        if task == "survival":
            # risk sets need several events per batch for a useful Cox gradient
            training.setdefault("batch_size", SURVIVAL_BATCH)
        try:
            return cls(task, E.ModelConfig.from_dict(model), TrainConfig.from_dict(training),
                       data, d.get("out"))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return {"task": self.task, "model": self.model.to_dict(), "training": asdict(self.training),
                "data": self.data, "out": self.out}


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: the config must be a JSON object")
    return RunConfig.from_dict(raw)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _echo_config(out: Path, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(_dump(cfg.to_dict()) + "\n")


def _out_dir(args, cfg: RunConfig) -> Path | None:
    out = args.out or cfg.out
    if out is not None:
        cfg.out = str(out)
        return Path(out)
    return None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if "generator" not in cfg.data:
        raise ConfigError("gen-data needs a data.generator block, not a manifest")
    if args.seed is not None:
        cfg.data["generator"]["seed"] = args.seed
    out = _out_dir(args, cfg)
    if out is None:
        raise ConfigError("gen-data needs --out (or 'out' in the config)")
    _echo_config(out, cfg)
    ds = synthdata.generate(cfg.data["generator"])
    path = synthdata.write_dataset(ds, out)
    if ds.task == "survival":
        log.info("realized censored fraction %.4f", ds.meta["realized_censoring"])
    print(path)
    return EXIT_OK


def _load_dataset(cfg: RunConfig, out: Path | None) -> synthdata.Dataset:
    if "manifest" in cfg.data:
        ds = synthdata.read_dataset(cfg.data["manifest"])
    else:
        ds = synthdata.generate(cfg.data["generator"])
        if out is not None:
            synthdata.write_dataset(ds, out / "data")
    if ds.task != cfg.task:
        raise ConfigError(f"dataset task {ds.task!r} does not match config task {cfg.task!r}")
    if ds.task == "classify" and ds.meta.get("n_classes", cfg.model.n_classes) != cfg.model.n_classes:
        raise ConfigError(f"dataset has {ds.meta['n_classes']} classes, model expects {cfg.model.n_classes}")
    return ds


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.training.seed = args.seed
    out = _out_dir(args, cfg)
    if out is None:
        raise ConfigError("train needs --out (or 'out' in the config)")
    _echo_config(out, cfg)
    ds = _load_dataset(cfg, out)
    _, rows = train(ds, cfg.model, cfg.training, out)
    summary = {"epochs": len(rows), "checkpoint": str(out / "checkpoint.bin"),
               "metrics": str(out / "metrics.csv")}
    if rows:
        key = [k for k in rows[0] if k.startswith("val_")][0]
        summary["final_" + key] = rows[-1][key]
    print(_dump(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint or not args.manifest:
        raise ConfigError("eval needs --checkpoint and --manifest")
    model_cfg, state, extra = E.load_checkpoint(args.checkpoint)
    ds = synthdata.read_dataset(args.manifest)
    if TASK_HEADS[ds.task] != model_cfg.head:
        raise ConfigError(f"checkpoint head {model_cfg.head!r} cannot evaluate a {ds.task!r} dataset")
    report = evaluate(ds, args.split, model_cfg, state)
    text = _dump(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(_dump({"checkpoint": str(args.checkpoint),
                                                "manifest": str(args.manifest), "split": args.split}) + "\n")
        (out / f"eval_{args.split}.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.config:
        base = load_config(args.config).model
    else:
        base = E.miniature_config()
    modes = [RecalibMode.parse(args.mode)] if args.mode else list(RecalibMode)
    seed = 0 if args.seed is None else args.seed
    results = {}
    for mode in modes:
        results[mode.value] = gradcheck_model(base.with_mode(mode), seed=seed, eps=args.eps,
                                              kink_margin=args.kink_margin, resolution=args.resolution,
                                              corrupt=0.05 if args.corrupt else 0.0)
    worst = max(r["max_rel_error"] for r in results.values())
    report = {"tolerance": args.tol, "eps": args.eps, "max_rel_error": worst,
              "passed": worst < args.tol, "modes": results}
    text = _dump(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(_dump({"model": base.to_dict(), "seed": seed, "eps": args.eps,
                                                "tol": args.tol, "kink_margin": args.kink_margin,
                                                "resolution": args.resolution,
                                                "corrupt": args.corrupt}) + "\n")
        (out / "gradcheck.json").write_text(text + "\n")
    print(text)
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


def cmd_export_activations(args) -> int:
    if not args.checkpoint or not args.cloud:
        raise ConfigError("export-activations needs --checkpoint and --cloud")
    model_cfg, state, _ = E.load_checkpoint(args.checkpoint)
    rows = E.export_activations(read_cloud(args.cloud), model_cfg, state, args.layer)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "z", "gate"])
    for r in rows.tolist():
        w.writerow([repr(v) for v in r])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(_dump({"checkpoint": str(args.checkpoint), "cloud": str(args.cloud),
                                                "layer": E.spatial_layer(model_cfg, args.layer)}) + "\n")
        (out / "activations.csv").write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = load_config(args.config)
    report = parameter_report(cfg.model)
    text = _dump(report)
    out = _out_dir(args, cfg)
    if out is not None:
        _echo_config(out, cfg)
        (out / "params.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "export-activations": cmd_export_activations,
    "params": cmd_params,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointcal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        return p

    add("gen-data", "generate a synthetic dataset and its manifest")
    add("train", "train a model; writes checkpoint.bin and metrics.csv")
    p = add("eval", "evaluate a checkpoint on one split of a dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p = add("gradcheck", "finite-difference check of every model parameter")
    p.add_argument("--mode", choices=[m.value for m in RecalibMode], help="check a single mode")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--kink-margin", type=float, default=1e-4)
    p.add_argument("--resolution", type=float, default=3e-7,
                   help="redraw instances with a nonzero gradient element below this magnitude")
    p.add_argument("--corrupt", action="store_true",
                   help="scale analytic gradients by 1.05 (the check must then fail)")
    p = add("export-activations", "write per-centroid spatial gates as CSV x,y,z,gate")
    p.add_argument("--checkpoint")
    p.add_argument("--cloud", help="point cloud text file, one 'x y z' per line")
    p.add_argument("--layer", type=int, help="encoder layer (default: last layer with a spatial block)")
    add("params", "parameter counts and recalibration overhead per mode")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PointcalError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
