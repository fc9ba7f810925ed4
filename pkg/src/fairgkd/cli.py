"""``fairgkd`` command-line entry point.

Subcommands: ``prepare``, ``synth``, ``baseline``, ``train`` and ``evaluate``.
Settings are resolved as command-line flags over a config file over the
built-in defaults. The environment variable ``FAIRGKD_OUT`` overrides the
default output root.

Exit codes: 0 success, 1 usage, 2 data error, 3 training failure. Failures
also print one JSON line ``{"error": <category>, "message": ...}`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import yaml

from . import __version__
from .config import TrainConfig, describe_defaults
from .graph import (
    DataError,
    DatasetMeta,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    load_dataset_dir,
    synthetic_meta,
    write_dataset,
)
from .losses import BalancerError
from .metrics import MetricsReport, evaluate_multi_sensitive
from .models import classifier_from_spec, load_checkpoint
from .pipeline import STRATEGIES, TrainingError, build_views, run_experiment

OUT_ENV = "FAIRGKD_OUT"
DEFAULT_OUT = "runs"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3

# keys a config file may carry besides the TrainConfig fields
FILE_KEYS = {"dataset", "edges", "attributes", "meta", "out", "synthetic", "seed"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


_DEFAULTS = {name: (default, prov) for name, default, prov, _ in describe_defaults()}


def _h(text: str, field_name: str | None = None, default=None, provenance: str = "repo") -> str:
    if field_name is not None:
        default, provenance = _DEFAULTS[field_name]
    return f"{text} (default: {default}; source: {provenance})"


def _add_data_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--dataset", metavar="DIR", help=_h("directory with edges.txt, attributes.csv, meta.json"))
    g.add_argument("--edges", metavar="PATH", help=_h("edge list file (with --attributes and --meta)"))
    g.add_argument("--attributes", metavar="PATH", help=_h("attribute table"))
    g.add_argument("--meta", metavar="PATH", help=_h("dataset descriptor (JSON or YAML)"))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help=_h("JSON or YAML config file"))
    p.add_argument(
        "--out",
        metavar="DIR",
        help=_h(f"output directory; ${OUT_ENV} overrides the default root", default=DEFAULT_OUT),
    )


def _add_train_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--seed", type=int, help=_h("single seed (same as --seeds N)", "seeds"))
    g.add_argument("--seeds", metavar="LIST", help=_h("comma-separated seed list", "seeds"))
    g.add_argument("--runs", type=int, help=_h("seeds 0..runs-1 when no list is given", "runs"))
    g.add_argument("--backbone", choices=("gcn", "gin"), help=_h("convolution", "backbone"))
    g.add_argument("--with-sensitive", action="store_true", default=None, help=_h("keep the sensitive column", "with_sensitive"))
    g.add_argument("--soft-loss", choices=("ntxent", "mse"), help=_h("distillation loss", "soft_loss"))
    g.add_argument("--hidden", type=int, help=_h("hidden width", "hidden"))
    g.add_argument("--lr", type=float, help=_h("Adam step size", "lr"))
    g.add_argument("--weight-decay", type=float, help=_h("coupled weight decay", "weight_decay"))
    g.add_argument("--epochs", type=int, help=_h("epochs per stage", "epochs"))
    g.add_argument("--tau", type=float, help=_h("contrastive temperature", "tau"))
    g.add_argument("--gamma", type=float, help=_h("balancer exponent", "gamma"))
    g.add_argument("--balancer-lr", type=float, help=_h("balancer smoothing rate", "balancer_lr"))
    g.add_argument("--fixed-alpha", type=float, help=_h("pin the hard-loss weight", "fixed_alpha"))
    g.add_argument("--sim-head", action="store_true", default=None, help=_h("learnable similarity head", "sim_head"))
    g.add_argument("--no-standardize", dest="standardize", action="store_false", default=None, help=_h("skip attribute standardization", "standardize"))
    g.add_argument("--sensitive-column", help=_h("attribute stripped from inputs", "sensitive_column"))
    g.add_argument("--split-ratios", metavar="A,B,C", help=_h("train/val/test fractions", "split_ratios"))
    g.add_argument("--workers", type=int, help=_h("parallel seed processes", "workers"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fairgkd", description="Fair node classification by distilling partial-data experts.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("prepare", help="validate a dataset and print its summary")
    _add_common(p)
    _add_data_args(p)

    p = sub.add_parser("synth", help="generate a synthetic biased graph")
    _add_common(p)
    p.add_argument("--seed", type=int, help=_h("generator seed", default=0))
    for f in fields(SynthConfig):
        if f.name in ("split_ratios", "include_sensitive_column"):
            continue
        p.add_argument(
            f"--{f.name.replace('_', '-')}",
            type=type(f.default),
            dest=f"synth_{f.name}",
            metavar=f.name.upper(),
            help=_h(f.name.replace("_", " "), default=f.default),
        )

    p = sub.add_parser("baseline", help="train the plain classifier on one data view")
    _add_common(p)
    _add_data_args(p)
    p.add_argument("--strategy", choices=STRATEGIES + ("vanilla", "all"), default="all", help=_h("data view", default="all"))
    _add_train_args(p)

    p = sub.add_parser("train", help="run the full distillation pipeline")
    _add_common(p)
    _add_data_args(p)
    _add_train_args(p)

    p = sub.add_parser("evaluate", help="re-evaluate stored checkpoints")
    _add_common(p)
    _add_data_args(p)
    p.add_argument("--run", metavar="DIR", required=True, help=_h("run directory written by train or baseline"))
    p.add_argument("--split", default="test", choices=("train", "val", "test"), help=_h("evaluation split", default="test"))
    return parser


# ---------------------------------------------------------------------------
# settings


def _load_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    text = p.read_text()
    try:
        if p.suffix in (".yaml", ".yml"):
            doc = yaml.safe_load(text) or {}
        else:
            doc = json.loads(text)
    except (ValueError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot parse config file {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a mapping")
    known = FILE_KEYS | {f.name for f in fields(TrainConfig)}
    unknown = set(doc) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return doc


def _parse_list(text: str, kind, what: str) -> list:
    try:
        return [kind(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse {what}: {text!r}") from None


def resolve_train_config(args: argparse.Namespace, file_cfg: dict) -> TrainConfig:
    d = {k: v for k, v in file_cfg.items() if k not in FILE_KEYS}
    if "seed" in file_cfg:
        d["seeds"] = [int(file_cfg["seed"])]
    for f in fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is None:
            continue
        if f.name == "seeds":
            value = _parse_list(value, int, "--seeds")
        elif f.name == "split_ratios":
            value = _parse_list(value, float, "--split-ratios")
        d[f.name] = value
    if getattr(args, "seed", None) is not None:
        d["seeds"] = [args.seed]
    if getattr(args, "runs", None) is not None and getattr(args, "seeds", None) is None and getattr(args, "seed", None) is None:
        d.pop("seeds", None)
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def resolve_out(args: argparse.Namespace, file_cfg: dict) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return Path(file_cfg.get("out", DEFAULT_OUT))


def _data_source(args, file_cfg) -> dict:
    src = {}
    for key in ("dataset", "edges", "attributes", "meta"):
        value = getattr(args, key, None) or file_cfg.get(key)
        if value:
            src[key] = value
    return src


def load_graph(args, file_cfg):
    src = _data_source(args, file_cfg)
    if "dataset" in src:
        d = Path(src["dataset"])
        if not d.is_dir():
            raise DataError(f"dataset directory not found: {d}")
        return load_dataset_dir(d)
    if {"edges", "attributes", "meta"} <= set(src):
        return load_dataset(src["edges"], src["attributes"], DatasetMeta.load(src["meta"]))
    raise UsageError("no dataset: pass --dataset DIR or --edges/--attributes/--meta")


# ---------------------------------------------------------------------------
# commands


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_prepare(args, file_cfg) -> int:
    g = load_graph(args, file_cfg)
    summary = g.summary()
    if args.out or file_cfg.get("out"):
        src = _data_source(args, file_cfg)
        meta_path = Path(src["dataset"]) / "meta.json" if "dataset" in src else Path(src["meta"])
        meta = DatasetMeta.load(meta_path)
        out = resolve_out(args, file_cfg)
        write_dataset(g, out, meta)
        summary["written"] = str(out)
    _emit(summary)
    return EXIT_OK


def cmd_synth(args, file_cfg) -> int:
    params = dict(file_cfg.get("synthetic", {}))
    for f in fields(SynthConfig):
        value = getattr(args, f"synth_{f.name}", None)
        if value is not None:
            params[f.name] = value
    try:
        synth = SynthConfig.from_dict(params)
        synth.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synthetic config: {exc}") from None
    seed = args.seed if args.seed is not None else int(file_cfg.get("seed", 0))
    g = generate_synthetic(synth, seed)
    out = resolve_out(args, file_cfg)
    write_dataset(g, out, synthetic_meta(synth, seed))
    (out / "generator.json").write_text(json.dumps({"seed": seed, **synth.to_dict()}, indent=2, sort_keys=True) + "\n")
    _emit({**g.summary(), "written": str(out)})
    return EXIT_OK


def _run_and_report(g, cfg, strategy, out) -> dict:
    meta = {"dataset": g.name}
    report, _ = run_experiment(cfg, g, strategy, out, extra_meta=meta)
    return report.to_dict()["aggregate"]


def cmd_baseline(args, file_cfg) -> int:
    cfg = resolve_train_config(args, file_cfg)
    g = load_graph(args, file_cfg)
    out = resolve_out(args, file_cfg)
    strategies = STRATEGIES if args.strategy == "all" else ("full" if args.strategy == "vanilla" else args.strategy,)
    _emit({s: _run_and_report(g, cfg, s, out / s) for s in strategies})
    return EXIT_OK


def cmd_train(args, file_cfg) -> int:
    cfg = resolve_train_config(args, file_cfg)
    g = load_graph(args, file_cfg)
    out = resolve_out(args, file_cfg)
    _emit({"fairgkd": _run_and_report(g, cfg, "fairgkd", out)})
    return EXIT_OK


def evaluate_run(run_dir: str | Path, g, split: str = "test") -> MetricsReport:
    """Rebuild every seed's evaluated model from its checkpoint and config
    snapshot and recompute the metrics on ``split``."""
    run_dir = Path(run_dir)
    snap_path = run_dir / "config.json"
    if not snap_path.is_file():
        raise DataError(f"{run_dir}: no config.json; not a run directory")
    snapshot = json.loads(snap_path.read_text())
    cfg = TrainConfig.from_dict(snapshot["train"])
    views = build_views(g, cfg)
    runs = []
    for seed in cfg.seed_list:
        ckpt_dir = run_dir / f"seed_{seed}" / "checkpoints"
        name = "f_s" if (ckpt_dir / "f_s.json").is_file() else "classifier"
        path = ckpt_dir / name
        if not path.with_suffix(".json").is_file():
            raise DataError(f"missing checkpoint {path}.json")
        manifest = json.loads(path.with_suffix(".json").read_text())
        model = classifier_from_spec(manifest["spec"])
        load_checkpoint(model, path)
        view = views.by_strategy(manifest["view"]["kind"])
        runs.append(
            evaluate_multi_sensitive(
                model,
                view,
                split=split,
                seed=seed,
                strategy=manifest["strategy"],
                config_hash=manifest["config_hash"],
            )
        )
    report = json.loads((run_dir / "report.json").read_text())
    return MetricsReport(runs=runs, meta=report["meta"])


def cmd_evaluate(args, file_cfg) -> int:
    g = load_graph(args, file_cfg)
    report = evaluate_run(args.run, g, args.split)
    out = Path(args.out) if args.out else Path(args.run)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"evaluation_{args.split}.json").write_text(report.to_json())
    stored = json.loads((Path(args.run) / "report.json").read_text())
    doc = report.to_dict()
    if args.split == "test":
        doc["matches_stored"] = stored["runs"] == doc["runs"]
    _emit({k: doc[k] for k in ("aggregate", "matches_stored") if k in doc})
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "synth": cmd_synth,
    "baseline": cmd_baseline,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
}


def _fail(category: str, code: int, exc: BaseException) -> int:
    print(json.dumps({"error": category, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        file_cfg = _load_file(args.config)
        return COMMANDS[args.command](args, file_cfg)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except (DataError, FileNotFoundError) as exc:
        return _fail("data", EXIT_DATA, exc)
    except (TrainingError, BalancerError, FloatingPointError) as exc:
        return _fail("training", EXIT_TRAINING, exc)
    except ValueError as exc:
        return _fail("data", EXIT_DATA, exc)


if __name__ == "__main__":
    sys.exit(main())
