"""Command-line surface: one subcommand per protocol stage.

Every command writes under ``--out`` and prints a single JSON line. Exit codes:
0 ok, 2 usage/config, 3 data or policy violation, 4 divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .baselines import BASELINE_LABELS, BaselineKind
from .config import RunConfig, load_run_config
from .errors import ConfigError, WeightedExpertsError
from .fusion import MODES
from .metrics import read_metrics_csv
from .pipeline import Run, run_incremental_pipeline
from .reports import attention_report, efficiency_report

log = logging.getLogger("weighted_experts")

BASELINE_CHOICES = ("maxlogit", "msp", "routing", "oracle", "ft-constant", "ft-expand")


def _config(args) -> RunConfig | None:
    cfg = None
    if args.config:
        cfg = load_run_config(args.config)
    elif (Path(args.out) / "run_config.json").exists():
        cfg = load_run_config(Path(args.out) / "run_config.json")
    if args.seed is not None:
        cfg = cfg or RunConfig()
        cfg.scenario.seed = args.seed
        cfg.train.seed = args.seed
    return cfg


def _run(args) -> Run:
    return Run(args.out, _config(args))


def cmd_gen_data(args) -> dict:
    run = _run(args)
    checksum = run.gen_data(args.seed)
    return {"checksum": checksum, "sites": run.internal_ids + run.external_ids}


def cmd_train_base(args) -> dict:
    run = _run(args)
    expert = run.train_base()
    return {"expert": expert.expert_id, "best_val_acc": expert.logs[-1].best_val_acc}


def cmd_step(args) -> dict:
    run = _run(args)
    expert = run.step(args.step)
    return {"step": run.completed_steps(), "expert": expert.expert_id, "best_val_acc": expert.logs[-1].best_val_acc,
            "transfers": len(run.log.records)}


def cmd_train_fusion(args) -> dict:
    run = _run(args)
    model = run.train_fusion(args.mode, args.step)
    return {"mode": args.mode, "experts": model.roster, "best_val_acc": model.log["best_val_acc"]}


def cmd_baseline(args) -> dict:
    run = _run(args)
    if args.kind == "oracle":
        step = run.completed_steps() if args.step is None else args.step
        model = run.run_oracle(step)
        return {"kind": args.kind, "step": step, "best_val_acc": model.logs[-1].best_val_acc}
    if args.kind.startswith("ft-"):
        model = run.run_naive(args.kind[3:])
        return {"kind": args.kind, "classes": len(model.classes)}
    kind = {"maxlogit": BaselineKind.MAX_LOGIT, "msp": BaselineKind.MSP,
            "routing": BaselineKind.CONFIDENCE_ROUTING}[args.kind]
    reports = run.evaluate("internal", modes=[], inference_timing=False)
    rep = next(r for r in reports if r.method == BASELINE_LABELS[kind])
    return {"kind": args.kind, "acc": rep.average[0], "f1": rep.average[1]}


def cmd_evaluate(args) -> dict:
    run = _run(args)
    reports = run.evaluate(args.split)
    return {"split": args.split, "csv": str(run.out / f"metrics_{args.split}.csv"),
            "average_acc": {r.method: round(r.average[0], 4) for r in reports}}


def cmd_report(args) -> dict:
    if not (args.attention or args.efficiency):
        raise ConfigError("report needs --attention and/or --efficiency")
    out = {}
    if args.attention:
        stats = attention_report(args.out, args.split)
        out["entropy"] = {m: float(np.mean([s["entropy"] for s in per.values()])) for m, per in stats.items()}
    if args.efficiency:
        res = efficiency_report([args.out])
        curves = next(iter(res["training"].values()))
        out["cumulative_seconds"] = {m: rows[-1][2] for m, rows in curves.items()}
    return out


def cmd_run(args) -> dict:
    out = run_incremental_pipeline(args.out, _config(args), args.seed)
    table = read_metrics_csv(out / "metrics_internal.csv")
    return {"out": str(out), "average_acc": {m: v["Average"][0] for m, v in table.items()}}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, help="override scenario and training seeds")
    common.add_argument("--out", default="runs/default", help="run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="weighted-experts", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common]).set_defaults(fn=cmd_gen_data)
    sub.add_parser("train-base", parents=[common]).set_defaults(fn=cmd_train_base)
    s = sub.add_parser("step", parents=[common])
    s.add_argument("--step", type=int, help="default: next step")
    s.set_defaults(fn=cmd_step)
    s = sub.add_parser("train-fusion", parents=[common])
    s.add_argument("--mode", choices=MODES, required=True)
    s.add_argument("--step", type=int, help="default: latest step")
    s.set_defaults(fn=cmd_train_fusion)
    s = sub.add_parser("baseline", parents=[common])
    s.add_argument("--kind", choices=BASELINE_CHOICES, required=True)
    s.add_argument("--step", type=int)
    s.set_defaults(fn=cmd_baseline)
    s = sub.add_parser("evaluate", parents=[common])
    s.add_argument("--split", choices=("internal", "external"), default="internal")
    s.set_defaults(fn=cmd_evaluate)
    s = sub.add_parser("report", parents=[common])
    s.add_argument("--attention", action="store_true")
    s.add_argument("--efficiency", action="store_true")
    s.add_argument("--split", choices=("internal", "external"), default="internal")
    s.set_defaults(fn=cmd_report)
    sub.add_parser("run", parents=[common], help="whole pipeline plus baselines and evaluation").set_defaults(
        fn=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.fn(args)
    except WeightedExpertsError as e:
        print(json.dumps({"command": args.command, "ok": False, "error": str(e)}))
        return e.exit_code
    except OSError as e:
        print(json.dumps({"command": args.command, "ok": False, "error": str(e)}))
        return 3
    print(json.dumps({"command": args.command, "ok": True, **result}, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
