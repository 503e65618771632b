"""Command line for quadratic adapter experiments.

Every run is driven by one JSON config (validated against
``schemas/run_config.schema.json``); flags only pick files.  Exit status is
0 on success, 1 on validation / IO failure, 2 on numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import secrets
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .adapter import AdapterConfig, merge_report
from .checkpoint import AdapterBundle, load_checkpoint, read_manifest, save_checkpoint
from .errors import NonFinite, QuadAdaptError
from .harness import (
    TrainConfig, adapt, compare, evaluate, pretrain, scratch_vs_adapt,
)
from .shiftbench import BenchConfig, ShiftBenchmark, generate, linear_floor_oracle, realizability_oracle

log = logging.getLogger("quadadapt")

TRAIN_CSV_HEADER = ("epoch", "train_loss", "test_loss")
EVAL_CSV_HEADER = ("split", "mse")
SAVINGS_CSV_HEADER = ("scratch_updates", "scratch_params", "adapt_updates", "adapt_params",
                      "scratch_param_steps", "adapt_param_steps", "ratio", "target",
                      "scratch_final_loss", "adapt_final_loss")


class UsageError(QuadAdaptError):
    pass


def load_schema(name: str) -> dict:
    return json.loads(resources.files("quadadapt").joinpath("schemas", f"{name}.schema.json")
                      .read_text())


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        jsonschema.validate(cfg, load_schema("run_config"))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"config {path}: {where}: {exc.message}") from exc
    return cfg


def _apply_seed(cfg: dict, seed_flag: str | None) -> dict:
    if seed_flag is None:
        return cfg
    seed = secrets.randbits(32) if seed_flag == "auto" else int(seed_flag)
    log.info("seed override: %d", seed)
    for section in ("bench", "pretrain", "train", "scratch_train"):
        if section in cfg:
            cfg[section]["seed"] = seed
    return cfg


def _section(cfg: dict, name: str) -> dict:
    if name not in cfg:
        raise UsageError(f"config lacks required section {name!r}")
    return cfg[name]


def _bench(cfg: dict, bench_path=None) -> ShiftBenchmark:
    if bench_path is not None:
        bench = load_checkpoint(bench_path)
        if not isinstance(bench, ShiftBenchmark):
            raise UsageError(f"{bench_path} is not a benchmark file")
        return bench
    return generate(BenchConfig.from_dict(cfg.get("bench", {})))


def _train_cfg(cfg: dict, name: str, required=True) -> TrainConfig | None:
    if name not in cfg:
        if required:
            raise UsageError(f"config lacks required section {name!r}")
        return None
    return TrainConfig.from_dict(cfg[name])


def _adapter_cfg(d: dict) -> tuple[str | None, AdapterConfig]:
    d = dict(d)
    label = d.pop("label", None)
    return label, AdapterConfig.from_dict(d)


def _base_kwargs(cfg: dict) -> dict:
    base = cfg.get("base", {})
    return {"hidden": tuple(base.get("hidden", ())), "activation": base.get("activation", "gelu")}


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_report(path, payload: dict, schema: str, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".json":
        doc = _jsonable(payload)
        jsonschema.validate(doc, load_schema(schema))
        path.write_text(json.dumps(doc, indent=2) + "\n")
    elif path.suffix == ".csv":
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
    else:
        raise UsageError(f"report path must end in .json or .csv: {path}")
    log.info("wrote %s", path)


def _train_rows(report):
    return [(i + 1, a, b) for i, (a, b) in enumerate(zip(report.train_curve, report.test_curve))]


# ---------------------------------------------------------------- commands

def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(args.probes, args.seed, log=print)
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"GRADCHECK FAILED ({len(failed)} of {len(results)} ops)")
        return 2
    print(f"ALL GRADCHECKS PASSED ({len(results)} ops)")
    return 0


def cmd_genbench(args) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    bench = _bench(cfg)
    save_checkpoint(bench, args.out)
    print(f"benchmark written to {args.out} (floor={linear_floor_oracle(bench):.6g})")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    bench = _bench(cfg, args.bench)
    base, report = pretrain(bench, _train_cfg(cfg, "pretrain"), **_base_kwargs(cfg))
    save_checkpoint(base, args.out)
    print(f"pretrained base: test mse {report.final_test_loss:.6g} -> {args.out}")
    if args.report:
        write_report(args.report, report.to_dict(), "train_report", TRAIN_CSV_HEADER,
                     _train_rows(report))
    return 0


def cmd_adapt(args) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    bench = _bench(cfg, args.bench)
    _, acfg = _adapter_cfg(_section(cfg, "adapter"))
    report, model = adapt(args.base, bench, acfg, _train_cfg(cfg, "train"))
    save_checkpoint(model, args.out)
    eff = merge_report(model)
    print(f"adapter {acfg.label()}: test mse {report.final_test_loss:.6g}, "
          f"trainable {eff.adapter_params} ({100 * eff.trainable_fraction:.2f}%) -> {args.out}")
    payload = report.to_dict()
    payload["efficiency"] = eff.to_dict()
    write_report(args.report, payload, "train_report", TRAIN_CSV_HEADER, _train_rows(report))
    return 0


def cmd_eval(args) -> int:
    from .basemodel import init_primary_from_checkpoint

    base = init_primary_from_checkpoint(args.base)
    model = base
    if args.adapter:
        bundle = load_checkpoint(args.adapter)
        if not isinstance(bundle, AdapterBundle):
            raise UsageError(f"{args.adapter} is not an adapter checkpoint")
        model = bundle.attach(base)
    bench = _bench({}, args.bench)
    splits = {name: evaluate(model, x, y) for name, (x, y) in bench.splits.items()}
    payload = {"splits": splits, "efficiency": merge_report(model).to_dict(),
               "linear_floor": linear_floor_oracle(bench),
               "realizable": realizability_oracle(bench, bench.config.shift_rank)}
    for name, v in splits.items():
        print(f"{name:<18} mse={v:.6g}")
    write_report(args.report, payload, "eval", EVAL_CSV_HEADER, list(splits.items()))
    return 0


def cmd_compare(args) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    bench = _bench(cfg, args.bench)
    pairs = [_adapter_cfg(d) for d in _section(cfg, "adapters")]
    labels = [lab or c.label() for lab, c in pairs]
    base, _ = pretrain(bench, _train_cfg(cfg, "pretrain"), **_base_kwargs(cfg))
    table = compare(bench, [c for _, c in pairs], _train_cfg(cfg, "train"), base=base,
                    seeds=cfg.get("seeds", [1, 2, 3]), labels=labels)
    for row in table.rows:
        print(f"{row.label:<24} params={row.params:<6} mse={row.final_test_loss:.6g} "
              f"updates_to_target={row.updates_to_target}")
    write_report(args.report, table.to_dict(), "comparison", table.CSV_HEADER, table.csv_rows())
    return 0


def cmd_savings(args) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    bench = _bench(cfg, args.bench)
    acfg = _adapter_cfg(cfg["adapter"])[1] if "adapter" in cfg else None
    base, _ = pretrain(bench, _train_cfg(cfg, "pretrain"), **_base_kwargs(cfg))
    rep = scratch_vs_adapt(bench, _train_cfg(cfg, "train"), base=base, adapter_cfg=acfg,
                           scratch_cfg=_train_cfg(cfg, "scratch_train", required=False))
    flag = " (TARGET UNREACHED: " + ", ".join(rep.target_unreached) + ")" if rep.target_unreached else ""
    print(f"parameter-step ratio adapt/scratch = {rep.ratio:.4g}{flag}")
    write_report(args.report, rep.to_dict(), "savings", SAVINGS_CSV_HEADER,
                 [[getattr(rep, k) for k in SAVINGS_CSV_HEADER]])
    return 0


def cmd_inspect(args) -> int:
    manifest = read_manifest(args.ckpt)
    print(json.dumps(manifest, indent=2))
    return 0


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quadadapt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="run the finite-difference suite")
    g.add_argument("--probes", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    def seeded(sp):
        sp.add_argument("--seed", default=None,
                        help="override every seed in the config; 'auto' draws from system entropy")

    s = sub.add_parser("genbench", help="generate and export a benchmark")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    seeded(s)
    s.set_defaults(func=cmd_genbench)

    s = sub.add_parser("pretrain", help="train a base on the pretrain split")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bench", help="benchmark directory (default: generate from config)")
    s.add_argument("--report")
    seeded(s)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("adapt", help="train an adapter over a frozen base")
    s.add_argument("--base", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--bench")
    seeded(s)
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("eval", help="evaluate a base (plus optional adapter) on a benchmark")
    s.add_argument("--base", required=True)
    s.add_argument("--adapter")
    s.add_argument("--bench", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", help="head-to-head adapter comparison")
    s.add_argument("--config", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--bench")
    seeded(s)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("savings", help="scratch vs. adapt parameter-step ratio")
    s.add_argument("--config", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--bench")
    seeded(s)
    s.set_defaults(func=cmd_savings)

    s = sub.add_parser("inspect", help="print a checkpoint manifest")
    s.add_argument("ckpt")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NonFinite as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (QuadAdaptError, jsonschema.ValidationError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
