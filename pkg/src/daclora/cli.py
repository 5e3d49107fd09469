"""``daclora`` command line: train, eval, compare and ablate.

Configs are JSON documents with sections ``dataset``, ``generator``,
``model``, ``pretrain``, ``train``, ``eval``, ``arms`` and ``ablation``.
Anything missing takes its default, and the fully resolved config is
written into every run manifest.

Exit codes: 0 success, 1 usage or config error, 2 runtime/numerical error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .attack import EVAL_EPSILON, EVAL_ITERS
from .data import GeneratorParams, evaluate, make_dataset
from .experiment import ABLATION_EPS, ABLATION_SHOTS, ARMS, ModelConfig, PretrainConfig, ablation_sweep, \
    pretrained_backbone, run_experiment
from .io import CheckpointError, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .model import frozen_hash
from .trainer import StepReport, TrainConfig, train

log = logging.getLogger("daclora")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


def _dataset_defaults() -> dict:
    return {"num_classes": 8, "shots": 4, "difficulty": 1.0, "test_per_class": 64, "pretrain_per_class": 512,
            "side": 16}


def default_config() -> dict:
    train_cfg = TrainConfig().to_dict()
    train_cfg.pop("seed")
    # derived defaults stay open until overrides are applied, then get materialized
    train_cfg["t_prime"] = None
    train_cfg["attack"]["alpha"] = None
    return {
        "seed": 0,
        "dataset": _dataset_defaults(),
        "generator": asdict(GeneratorParams()),
        "model": {**asdict(ModelConfig()), "hidden": list(ModelConfig().hidden)},
        "pretrain": asdict(PretrainConfig()),
        "train": train_cfg,
        "eval": {"epsilon": EVAL_EPSILON, "iters": EVAL_ITERS},
        "arms": list(ARMS),
        "ablation": {"shots": list(ABLATION_SHOTS), "train_eps": list(ABLATION_EPS), "eval_eps": list(ABLATION_EPS)},
    }


# ---------------------------------------------------------------- config handling


def _merge(base, update, path: str):
    if not isinstance(base, dict):
        return update
    if not isinstance(update, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(update).__name__}")
    out = dict(base)
    for key, val in update.items():
        full = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {full!r}")
        out[key] = _merge(base[key], val, full)
    return out


def _check_type(full: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{full}: expected true/false, got {value!r}")
    elif isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{full}: expected a number, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool) and not float(value).is_integer():
            raise ConfigError(f"{full}: expected an integer, got {value!r}")
        return type(default)(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{full}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{full}: expected a list, got {value!r}")
        if default:
            return [_check_type(f"{full}[{i}]", default[0], v) for i, v in enumerate(value)]
    return value


def _typed(cfg: dict, defaults: dict, path: str = "") -> dict:
    out = {}
    for key, val in cfg.items():
        full = f"{path}.{key}" if path else key
        if isinstance(defaults.get(key), dict):
            out[key] = _typed(val, defaults[key], full)
        else:
            out[key] = _check_type(full, defaults.get(key), val)
    return out


def _parse_override(item: str, cfg: dict) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if len(parts) == 1 and parts[0] not in cfg:
        # bare key: resolve it if exactly one section has it
        hits = [s for s, sec in cfg.items() if isinstance(sec, dict) and parts[0] in sec]
        if len(hits) != 1:
            raise ConfigError(f"override key {key!r} is {'ambiguous' if hits else 'unknown'}")
        parts = [hits[0], parts[0]]
    return parts, value


def load_config(path: str | None, overrides: list[str] = (), seed: int | None = None) -> dict:
    """Defaults <- config file <- ``--set`` overrides <- ``--seed``; validated."""
    base = default_config()
    cfg = base
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: not valid JSON ({exc})") from None
        cfg = _merge(base, user, "")
    for item in overrides:
        parts, value = _parse_override(item, cfg)
        nested: object = value
        for part in reversed(parts):
            nested = {part: nested}
        cfg = _merge(cfg, nested, "")
    if seed is not None:
        cfg["seed"] = seed
    cfg = _typed(cfg, base)
    objs = build(cfg)  # surfaces invariant violations now, before any work
    cfg["train"]["t_prime"] = objs["train"].t_prime
    cfg["train"]["attack"]["alpha"] = objs["attack"].alpha
    return cfg


def build(cfg: dict) -> dict:
    """Turn a resolved config dict into library objects, naming the section on failure."""
    out = {}
    for section, ctor in (("generator", lambda c: GeneratorParams(**c)),
                          ("model", lambda c: ModelConfig(**c)),
                          ("pretrain", lambda c: PretrainConfig(**c)),
                          ("train", lambda c: TrainConfig(**c, seed=cfg["seed"]))):
        try:
            out[section] = ctor(cfg[section])
        except (ValueError, TypeError) as exc:
            key = _guess_key(str(exc), cfg[section])
            raise ConfigError(f"{section}{'.' + key if key else ''}: {exc}") from None
    ds = cfg["dataset"]
    if ds["num_classes"] < 2 or ds["shots"] < 1 or ds["side"] < 1 or ds["test_per_class"] < 1:
        bad = next(k for k in ("num_classes", "shots", "side", "test_per_class")
                   if ds[k] < (2 if k == "num_classes" else 1))
        raise ConfigError(f"dataset.{bad}: value {ds[bad]} is out of range")
    if cfg["eval"]["epsilon"] < 0 or cfg["eval"]["iters"] < 1:
        raise ConfigError("eval.epsilon must be >= 0" if cfg["eval"]["epsilon"] < 0 else "eval.iters must be >= 1")
    unknown = [a for a in cfg["arms"] if a not in ARMS]
    if unknown or not cfg["arms"]:
        raise ConfigError(f"arms: must be a non-empty subset of {list(ARMS)}, got {cfg['arms']}")
    out["attack"] = out["train"].attack
    return out


def _guess_key(message: str, section: dict) -> str:
    if "alpha" in message or "epsilon" in message or "max_iters" in message:
        return "attack"
    hits = [k for k in section if k in message]
    return max(hits, key=len) if hits else ""


# ---------------------------------------------------------------- file writers


SERIES_FIELDS = [f.name for f in fields(StepReport)]


def _series_columns(mode: str) -> list[str]:
    return [c for c in SERIES_FIELDS if not (c == "c_t" and mode != "dac")]


class SeriesWriter:
    """Per-step CSV, flushed after every row so a crash leaves a usable prefix."""

    def __init__(self, path: Path, mode: str):
        self.path = path
        self.columns = _series_columns(mode)
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(self.columns)
        self._fh.flush()

    def __call__(self, report: StepReport):
        row = asdict(report)
        self._w.writerow([_fmt(row[c]) for c in self.columns])
        self._fh.flush()

    def close(self):
        self._fh.close()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_table(path: Path, header: list[str], rows: list[list]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _write_atomic(path, buf.getvalue())
    return path


def read_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _manifest(out: Path, command: str, cfg: dict, artifacts: dict, started: float, results: dict) -> Path:
    doc = {
        "command": command,
        "tool_version": __version__,
        "seed": cfg["seed"],
        "config": cfg,
        "artifacts": {k: str(v.name if isinstance(v, Path) else v) for k, v in artifacts.items()},
        "results": results,
        "duration_s": round(time.time() - started, 3),
    }
    path = out / "manifest.json"
    _write_atomic(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _dataset(cfg: dict):
    d = cfg["dataset"]
    return make_dataset(d["num_classes"], d["shots"], cfg["seed"], d["difficulty"], d["test_per_class"],
                        d["pretrain_per_class"], d["side"], GeneratorParams(**cfg["generator"]))


def _eval_dict(rep) -> dict:
    return {"clean_accuracy": rep.clean_accuracy, "adv_accuracy": rep.adv_accuracy, "epsilon": rep.epsilon,
            "per_class_accuracy": rep.per_class_accuracy}


# ---------------------------------------------------------------- commands


def cmd_train(cfg: dict, out: Path) -> Path:
    started = time.time()
    objs = build(cfg)
    ds = _dataset(cfg)
    model = pretrained_backbone(ds, objs["model"], objs["pretrain"], cfg["seed"])
    start_hash = frozen_hash(model)
    tc = objs["train"]
    artifacts = {"dataset": save_dataset(ds, out / "dataset.npz", cfg["generator"]),
                 "series": out / "series.csv"}
    series = SeriesWriter(artifacts["series"], tc.mode)
    try:
        log.info("training %s for %d steps", tc.mode, tc.total_iters)
        train(model, ds.x_train, ds.y_train, tc, callback=series)
    finally:
        series.close()
    artifacts["checkpoint"] = save_checkpoint(model, out / "checkpoint.npz", extra={"seed": cfg["seed"]})
    rep = evaluate(model, ds.x_test, ds.y_test, cfg["eval"]["epsilon"], cfg["eval"]["iters"])
    artifacts["summary"] = write_table(out / "summary.csv", ["mode", "seed", "clean_accuracy", "adv_accuracy", "epsilon"],
                                       [[tc.mode, cfg["seed"], rep.clean_accuracy, rep.adv_accuracy, rep.epsilon]])
    results = {"eval": _eval_dict(rep), "frozen_hash": start_hash, "frozen_unchanged": frozen_hash(model) == start_hash}
    return _manifest(out, "train", cfg, artifacts, started, results)


def cmd_eval(cfg: dict, out: Path, checkpoint: str, dataset: str | None, eps: float | None) -> Path:
    started = time.time()
    try:
        model = load_checkpoint(checkpoint)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    ds = load_dataset(dataset) if dataset else _dataset(cfg)
    if (model.d_pixels, model.num_classes) != (ds.d_pixels, ds.num_classes):
        raise ConfigError(f"checkpoint {checkpoint} expects {model.d_pixels} pixels / {model.num_classes} classes "
                          f"but the dataset has {ds.d_pixels} / {ds.num_classes}")
    eps = cfg["eval"]["epsilon"] if eps is None else eps
    if eps < 0:
        raise ConfigError("--eps must be >= 0")
    rep = evaluate(model, ds.x_test, ds.y_test, eps, cfg["eval"]["iters"])
    artifacts = {"summary": write_table(out / "summary.csv", ["checkpoint", "clean_accuracy", "adv_accuracy", "epsilon"],
                                        [[Path(checkpoint).name, rep.clean_accuracy, rep.adv_accuracy, eps]]),
                 "checkpoint": str(checkpoint)}
    if dataset:
        artifacts["dataset"] = str(dataset)
    return _manifest(out, "eval", cfg, artifacts, started, {"eval": _eval_dict(rep)})


def compare_header(arms) -> list[str]:
    return ["dataset", "seed"] + [f"{a}_{m}" for a in arms for m in ("clean", "adv")]


def cmd_compare(cfg: dict, out: Path) -> Path:
    started = time.time()
    objs = build(cfg)
    ds = _dataset(cfg)
    artifacts: dict = {"dataset": save_dataset(ds, out / "dataset.npz", cfg["generator"])}
    writers = {a: SeriesWriter(out / f"series_{a}.csv", ARMS[a]) for a in cfg["arms"]}
    artifacts.update({f"series_{a}": w.path for a, w in writers.items()})
    try:
        res = run_experiment(ds, cfg["arms"], cfg["seed"], objs["train"], objs["model"], objs["pretrain"],
                             cfg["eval"]["epsilon"], cfg["eval"]["iters"], callback=lambda a, r: writers[a](r))
    finally:
        for w in writers.values():
            w.close()
    row = [f"synthetic-C{ds.num_classes}-k{ds.shots}", cfg["seed"]]
    results = {}
    for r in res:
        artifacts[f"checkpoint_{r.arm}"] = save_checkpoint(r.model, out / f"checkpoint_{r.arm}.npz")
        row += [r.eval.clean_accuracy, r.eval.adv_accuracy]
        results[r.arm] = {**_eval_dict(r.eval), "collapsed": r.collapsed, "frozen_hash": r.start_hash,
                          "mean_iters_used": float(np.mean([s.mean_iters_used for s in r.reports]))}
    artifacts["summary"] = write_table(out / "summary.csv", compare_header(cfg["arms"]), [row])
    return _manifest(out, "compare", cfg, artifacts, started, results)


def ablation_tables(cells) -> tuple[list[str], list[list], list[str], list[list]]:
    """Long matrix (one row per trained cell x eval budget) and the per-shots summary.

    The summary's clean column comes from the model trained at the smallest budget.
    """
    long_rows = [[c.shots, c.train_epsilon, e, c.clean_accuracy, a] for c in cells for e, a in c.adv_accuracy.items()]
    train_eps = sorted({c.train_epsilon for c in cells})
    eval_eps = sorted({e for c in cells for e in c.adv_accuracy})
    pair_cols = [(t, e) for t in train_eps for e in eval_eps]
    header = ["shots", "clean_accuracy"] + [f"adv_train{t * 255:g}_eval{e * 255:g}" for t, e in pair_cols]
    rows = []
    for k in sorted({c.shots for c in cells}):
        by_eps = {c.train_epsilon: c for c in cells if c.shots == k}
        rows.append([k, by_eps[min(by_eps)].clean_accuracy] + [by_eps[t].adv_accuracy[e] for t, e in pair_cols])
    return ["shots", "train_epsilon", "eval_epsilon", "clean_accuracy", "adv_accuracy"], long_rows, header, rows


def cmd_ablate(cfg: dict, out: Path) -> Path:
    started = time.time()
    objs = build(cfg)
    grid = cfg["ablation"]
    empty = [k for k in ("shots", "train_eps", "eval_eps") if not grid[k]]
    if empty:
        raise ConfigError(f"ablation.{empty[0]}: grid is empty, nothing to run")
    if any(k < 1 for k in grid["shots"]) or any(e <= 0 for e in grid["train_eps"]) or any(e < 0 for e in grid["eval_eps"]):
        raise ConfigError("ablation: shots must be >= 1, train_eps > 0 and eval_eps >= 0")

    def factory(k):
        d = cfg["dataset"]
        return make_dataset(d["num_classes"], k, cfg["seed"], d["difficulty"], d["test_per_class"],
                            d["pretrain_per_class"], d["side"], GeneratorParams(**cfg["generator"]))

    cells = ablation_sweep(factory, grid["shots"], grid["train_eps"], grid["eval_eps"], cfg["seed"], objs["train"],
                           objs["model"], objs["pretrain"], cfg["eval"]["iters"])
    long_header, long_rows, header, rows = ablation_tables(cells)
    artifacts = {"matrix": write_table(out / "ablation.csv", long_header, long_rows),
                 "summary": write_table(out / "summary.csv", header, rows)}
    results = {"cells": [asdict(c) | {"adv_accuracy": {repr(e): a for e, a in c.adv_accuracy.items()}} for c in cells]}
    return _manifest(out, "ablate", cfg, artifacts, started, results)


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.lr=0.2 (repeatable)")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out-dir", default="runs/latest", help="directory for all artifacts")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="daclora", description="Curriculum adversarial LoRA fine-tuning experiments.")
    p.add_argument("--version", action="version", version=f"daclora {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="fine-tune adapters in one mode")
    ev = sub.add_parser("eval", parents=[common], help="clean and adversarial accuracy of a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", help="dataset snapshot (.npz); default regenerates it from the config")
    ev.add_argument("--eps", type=float, help="attack budget (default eval.epsilon)")
    sub.add_parser("compare", parents=[common], help="three-arm comparison")
    sub.add_parser("ablate", parents=[common], help="shots x training budget grid")
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        if args.command == "show-config":
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return EXIT_OK
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "train":
            path = cmd_train(cfg, out)
        elif args.command == "eval":
            path = cmd_eval(cfg, out, args.checkpoint, args.dataset, args.eps)
        elif args.command == "compare":
            path = cmd_compare(cfg, out)
        else:
            path = cmd_ablate(cfg, out)
    except (ConfigError, CheckpointError) as exc:
        print(f"daclora: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"daclora: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(path)
    return EXIT_OK


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
