"""Command-line entry point.

    tdcrl [--config PATH] [--seed N] [--out DIR] [--set key=value ...] COMMAND ...

Every command is a pure function of (config, seed, input files); outputs go
under --out and are overwritten with identical bytes on a rerun.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import yaml

from . import benchmark as bm
from .causal_oracle import run_trials
from .config import ConfigError, RunConfig, config_from_dict, load_config
from .encoder_io import EmbeddingTable, FormatError, read_table
from .eval_metrics import evaluate, export_features, style_probe
from .nn_core import DimensionError
from .trainer import NonFiniteLossError, load_checkpoint, save_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 2  # argparse
EXIT_MISSING_FILE = 3
EXIT_SCHEMA = 4  # config or file-format violation
EXIT_NON_FINITE = 5
EXIT_ORACLE_FAIL = 6
EXIT_DATA = 7  # inputs valid but unusable, e.g. an empty eval set

CHECKPOINT = "checkpoint.tdeb"
METRICS = "metrics.jsonl"
REPORT = "report.json"

log = logging.getLogger("tdcrl")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True), flush=True)


def _require(path: Path) -> Path:
    if not path.exists():
        raise CliError(f"missing file: {path}", EXIT_MISSING_FILE)
    return path


def _parse_value(raw: str):
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads "1e-3" as a string
        try:
            return float(value)
        except ValueError:
            pass
    return value


def resolve_config(args) -> RunConfig:
    """Config file, then --set overrides, then --seed / --out."""
    cfg = load_config(_require(Path(args.config))) if args.config else RunConfig()
    data = cfg.to_dict()
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        node, parts = data, key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config key '{key}'")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key '{key}'")
        node[parts[-1]] = _parse_value(raw)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out"] = args.out
    return config_from_dict(data)


def _load_images(paths: List[str]) -> EmbeddingTable:
    tables = [read_table(_require(Path(p))) for p in paths]
    return tables[0] if len(tables) == 1 else EmbeddingTable.concat(tables)


def cmd_gen_synthetic(cfg: RunConfig, args) -> int:
    bench = bm.make_benchmark(cfg.seed, cfg.encoder, cfg.benchmark)
    paths = bm.save_benchmark(bench, cfg.out, cfg.benchmark.images_per_cell)
    _emit({"command": "gen-synthetic", "seed": cfg.seed, "classes": len(bench.classes),
           "train_styles": bench.n_train, "heldout_styles": len(bench.heldout_ids),
           "images_per_cell": cfg.benchmark.images_per_cell,
           "files": {k: str(v) for k, v in paths.items()}})
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    data = Path(args.data or cfg.out)
    _require(data / bm.ENCODER_FILE)
    _require(data / bm.STYLES_FILE)
    bench = bm.load_benchmark(data)
    held_path = data / bm.HELDOUT_IMAGES
    held = read_table(held_path) if held_path.exists() else None
    tc = cfg.train_config()
    if args.mode:
        tc.mode = args.mode
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    state, history = train(tc, bench.encoder, bench.basis, eval_images=held)
    with open(out / METRICS, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    config = cfg.to_dict()
    config["train"]["mode"] = tc.mode
    save_checkpoint(state, out / CHECKPOINT, config=config)
    last = history[-1] if history else {}
    _emit({"command": "train", "mode": tc.mode, "epochs": len(history), "eval_acc": last.get("eval_acc"),
           "checkpoint": str(out / CHECKPOINT), "seconds": round(time.perf_counter() - t0, 3)})
    return EXIT_OK


def _default_images(cfg: RunConfig, args) -> List[str]:
    return args.images or [str(Path(args.data or cfg.out) / bm.HELDOUT_IMAGES)]


def cmd_eval(cfg: RunConfig, args) -> int:
    state = load_checkpoint(_require(Path(args.checkpoint or Path(cfg.out) / CHECKPOINT)))
    images = _load_images(_default_images(cfg, args))
    if len(images) == 0:
        raise CliError("evaluation set is empty (no held-out styles?)", EXIT_DATA)
    rep = evaluate(state, images, diagnostics=not args.no_diagnostics, bandwidth=cfg.eval.mmd_bandwidth,
                   probe_epochs=cfg.eval.probe_epochs, probe_lr=cfg.eval.probe_lr, seed=cfg.seed)
    report = {"command": "eval", **rep.to_dict()}
    path = Path(args.report or Path(cfg.out) / REPORT)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _emit(report)
    return EXIT_OK


def cmd_probe(cfg: RunConfig, args) -> int:
    images = _load_images(_default_images(cfg, args))
    if len(set(images.domain_ids.tolist())) < 2:
        raise CliError("style probe needs at least two domains", EXIT_DATA)
    X = images.vectors.astype("float64")
    out = {"command": "probe", "probe_ce_pre": style_probe(
        X, images.domain_ids, cfg.eval.probe_epochs, cfg.eval.probe_lr, cfg.seed)}
    if args.checkpoint:
        state = load_checkpoint(_require(Path(args.checkpoint)))
        out["probe_ce_post"] = style_probe(state.features(X), images.domain_ids,
                                           cfg.eval.probe_epochs, cfg.eval.probe_lr, cfg.seed)
    _emit(out)
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    worst = run_trials(args.trials, args.max_size, seed=cfg.seed)
    ok = worst <= args.tolerance
    _emit({"command": "oracle", "trials": args.trials, "max_size": args.max_size,
           "max_deviation": worst, "tolerance": args.tolerance, "result": "PASS" if ok else "FAIL",
           "seconds": round(time.perf_counter() - t0, 3)})
    return EXIT_OK if ok else EXIT_ORACLE_FAIL


def cmd_export(cfg: RunConfig, args) -> int:
    state = load_checkpoint(_require(Path(args.checkpoint or Path(cfg.out) / CHECKPOINT)))
    images = _load_images(_default_images(cfg, args))
    path = Path(args.output or Path(cfg.out) / f"features_{args.stage}.tdeb")
    path.parent.mkdir(parents=True, exist_ok=True)
    table = export_features(state, images, path, args.stage)
    _emit({"command": "export-features", "stage": args.stage, "rows": len(table), "path": str(path)})
    return EXIT_OK


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic, "train": cmd_train, "eval": cmd_eval,
    "probe": cmd_probe, "oracle": cmd_oracle, "export-features": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS so flags work both before and after the subcommand
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML run config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (u64)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                        help="override a config key, e.g. train.epochs=10")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    ap = argparse.ArgumentParser(prog="tdcrl", parents=[common], description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-synthetic", parents=[common], help="write the synthetic benchmark")

    p = sub.add_parser("train", parents=[common], help="train g and C")
    p.add_argument("--data", help="benchmark directory (default: --out)")
    p.add_argument("--mode", choices=["tdcrl", "no_ci"], help="overrides train.mode")

    for name, text in (("eval", "accuracy and diagnostics"), ("probe", "style-classification probe"),
                       ("export-features", "write raw or intervened features")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", help="benchmark directory (default: --out)")
        p.add_argument("--images", nargs="+", help="image tables (default: held-out images)")
        p.add_argument("--checkpoint", help=f"default: OUT/{CHECKPOINT}")
        if name == "eval":
            p.add_argument("--report", help=f"default: OUT/{REPORT}")
            p.add_argument("--no-diagnostics", action="store_true", help="skip MMD and probe")
        if name == "export-features":
            p.add_argument("--stage", choices=["raw", "intervened"], default="intervened")
            p.add_argument("--output", help="default: OUT/features_STAGE.tdeb")

    p = sub.add_parser("oracle", parents=[common], help="check the backdoor identity on random tables")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--max-size", type=int, default=6)
    p.add_argument("--tolerance", type=float, default=1e-12)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("config", "seed", "out", "set"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (ConfigError, FormatError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NON_FINITE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
