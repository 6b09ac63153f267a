"""Attention histograms and efficiency curves (CSV first, SVG for convenience)."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError

N_BINS = 20


def entropy(A: np.ndarray) -> np.ndarray:
    """Row-wise Shannon entropy (nats) with 0 log 0 = 0."""
    A = np.asarray(A, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(A > 0, A * np.log(np.where(A > 0, A, 1.0)), 0.0)
    return -terms.sum(axis=1)


def attention_histogram(A: np.ndarray, bins: int = N_BINS) -> np.ndarray:
    """(D, bins) counts of A[:, e] over [0, 1]; A = 1.0 lands in the last bin."""
    A = np.asarray(A)
    if A.ndim != 2:
        raise DataError(f"attention scores must be (N, D), got {A.shape}")
    return np.stack([np.histogram(A[:, e], bins=bins, range=(0.0, 1.0))[0] for e in range(A.shape[1])])


def attention_stats(scores: Mapping[str, np.ndarray]) -> dict[str, dict]:
    """dataset -> {"hist": (D, bins), "entropy": mean entropy, "n": test-set size}."""
    return {name: {"hist": attention_histogram(A), "entropy": float(entropy(A).mean()), "n": len(A)}
            for name, A in scores.items()}


def attention_scores(fusion, test_sets: Mapping[str, tuple[np.ndarray, np.ndarray | None]]) -> dict[str, np.ndarray]:
    """A for every (h, g) test set under a trained wSF model."""
    if fusion.mode == "sf" or fusion.attention is None:
        raise DataError("SF has no attention scores to report")
    return {name: fusion.predict_features(h, g)[2] for name, (h, g) in test_sets.items()}


def write_attention_csv(stats: Mapping[str, dict], roster: Sequence[str], mode: str, path: str | Path) -> None:
    edges = np.linspace(0.0, 1.0, N_BINS + 1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "dataset", "expert", "bin_lo", "bin_hi", "count", "mean_entropy"])
        for name, st in stats.items():
            for e, eid in enumerate(roster):
                for b in range(N_BINS):
                    w.writerow([mode, name, eid, f"{edges[b]:.2f}", f"{edges[b + 1]:.2f}",
                                int(st["hist"][e, b]), f"{st['entropy']:.6f}"])


def plot_attention(stats_by_mode: Mapping[str, Mapping[str, dict]], roster: Sequence[str], path: str | Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    modes = list(stats_by_mode)
    datasets = list(next(iter(stats_by_mode.values())))
    fig, axes = plt.subplots(len(modes), len(datasets), figsize=(3 * len(datasets), 2.4 * len(modes)),
                             squeeze=False, sharex=True)
    centres = (np.arange(N_BINS) + 0.5) / N_BINS
    for r, mode in enumerate(modes):
        for c, name in enumerate(datasets):
            st = stats_by_mode[mode][name]
            ax = axes[r][c]
            for e, eid in enumerate(roster):
                ax.step(centres, st["hist"][e] / max(st["n"], 1), where="mid", label=eid)
            ax.set_title(f"{mode} / {name}  H={st['entropy']:.2f}", fontsize=8)
    axes[0][0].legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def attention_report(run_dir: str | Path, split: str = "internal", modes: Sequence[str] = ("attn", "nmd"),
                     out: str | Path | None = None) -> dict[str, dict[str, dict]]:
    """Histograms and mean entropies from a run's saved attention scores."""
    run_dir = Path(run_dir)
    src = run_dir / f"attention_{split}.npz"
    if not src.exists():
        raise DataError(f"{src} is missing; run evaluate first")
    if any(m == "sf" for m in modes):
        raise DataError("SF has no attention scores to report")
    out = Path(out) if out is not None else run_dir / "reports"
    out.mkdir(parents=True, exist_ok=True)
    with np.load(src) as z:
        roster = [str(r) for r in z["roster"]]
        stats = {}
        for m in modes:
            scores = {k.split("/", 1)[1]: z[k] for k in z.files if k.startswith(f"{m}/")}
            if not scores:
                raise DataError(f"no {m} attention scores in {src}")
            stats[m] = attention_stats(scores)
            write_attention_csv(stats[m], roster, m, out / f"attention_{m}_{split}.csv")
    summary = {m: {name: st["entropy"] for name, st in s.items()} for m, s in stats.items()}
    (out / f"attention_entropy_{split}.json").write_text(json.dumps(summary, indent=2))
    plot_attention(stats, roster, out / f"attention_{split}.svg")
    return stats


# ---------------------------------------------------------------- efficiency


def cumulative_training(timings: Mapping) -> dict[str, list[tuple[int, float, float]]]:
    """method -> [(step, step seconds, cumulative seconds)].

    The incremental pipeline pays for one fine-tune, the bundle exports and one
    fusion fit per step; combine-&-retrain pays for a full retrain on all data so far.
    """
    steps = sorted(timings["steps"], key=int)
    if not steps:
        raise DataError("timing log has no steps")
    modes = sorted({m for s in steps for m in timings["steps"][s].get("fusion_seconds", {})})
    curves: dict[str, list[tuple[int, float, float]]] = {}
    for m in modes:
        total, rows = 0.0, []
        for s in steps:
            t = timings["steps"][s]
            inc = t["expert_seconds"] + t.get("bundle_seconds", 0.0) + t.get("fusion_seconds", {}).get(m, 0.0)
            total += inc
            rows.append((int(s), inc, total))
        curves[f"pipeline_{m}"] = rows
    if all("oracle_seconds" in timings["steps"][s] for s in steps):
        total, rows = 0.0, []
        for s in steps:
            inc = timings["steps"][s]["oracle_seconds"]
            total += inc
            rows.append((int(s), inc, total))
        curves["combine_retrain"] = rows
    return curves


def efficiency_report(run_dirs: Sequence[str | Path], out: str | Path | None = None) -> dict:
    """Cumulative training curves and per-example inference times, one CSV each."""
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise DataError("efficiency report needs at least one run directory")
    out = Path(out) if out is not None else run_dirs[0] / "reports"
    out.mkdir(parents=True, exist_ok=True)
    training, inference = {}, {}
    for d in run_dirs:
        for name in ("timings.json", "inference.json"):
            if not (d / name).exists():
                raise DataError(f"{d / name} is missing")
        training[d.name] = cumulative_training(json.loads((d / "timings.json").read_text()))
        inference[d.name] = json.loads((d / "inference.json").read_text())
    with open(out / "training_time.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run", "method", "step", "step_seconds", "cumulative_seconds"])
        for run, curves in training.items():
            for method, rows in curves.items():
                for step, inc, tot in rows:
                    w.writerow([run, method, step, f"{inc:.6f}", f"{tot:.6f}"])
    with open(out / "inference_time.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run", "method", "seconds_per_example"])
        for run, res in inference.items():
            for method, sec in res.items():
                w.writerow([run, method, f"{sec:.9f}"])
    _plot_efficiency(training, inference, out / "efficiency.svg")
    return {"training": training, "inference": inference}


def _plot_efficiency(training, inference, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.2))
    for run, curves in training.items():
        for method, rows in curves.items():
            a.plot([r[0] for r in rows], [r[2] for r in rows], marker="o", label=f"{method}" if len(training) == 1
                   else f"{run}:{method}")
    a.set_xlabel("step")
    a.set_ylabel("cumulative training s")
    a.legend(fontsize=6)
    run, res = next(iter(inference.items()))
    b.bar(range(len(res)), [v * 1e3 for v in res.values()])
    b.set_xticks(range(len(res)), list(res), rotation=45, ha="right", fontsize=6)
    b.set_ylabel("ms per example")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
