"""Run the full incremental pipeline (data, experts, bundles, fusion, baselines,
evaluation) and write the attention and efficiency reports.

    python3 scripts/run_pipeline.py --out runs/seed7 --seed 7
"""
import argparse
import json
import logging
import time

from weighted_experts.config import RunConfig, load_run_config
from weighted_experts.metrics import read_metrics_csv
from weighted_experts.pipeline import run_incremental_pipeline
from weighted_experts.reports import attention_report, efficiency_report


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--config", help="JSON run configuration (defaults otherwise)")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    cfg = load_run_config(args.config) if args.config else RunConfig()
    t0 = time.perf_counter()
    out = run_incremental_pipeline(args.out, cfg, seed=args.seed)
    attention_report(out, "internal")
    efficiency_report([out])
    print(f"finished in {time.perf_counter() - t0:.1f}s -> {out}")
    for split in ("internal", "external"):
        table = read_metrics_csv(out / f"metrics_{split}.csv")
        print(f"\n{split} (acc / macro-F1, %)")
        datasets = list(next(iter(table.values())))
        print(f"{'method':32s}" + "".join(f"{d:>16s}" for d in datasets))
        for method, rows in table.items():
            print(f"{method:32s}" + "".join(f"{rows[d][0]:8.1f}{rows[d][1]:8.1f}" for d in datasets))
    ent = json.loads((out / "reports" / "attention_entropy_internal.json").read_text())
    print("\nmean attention entropy:", json.dumps(ent))


if __name__ == "__main__":
    main()
