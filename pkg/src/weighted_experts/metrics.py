"""Accuracy / macro-F1 and the metrics table."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

CSV_COLUMNS = ("method", "experts", "transfer", "dataset", "acc", "f1")


def accuracy(pred, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("cannot evaluate on an empty test set")
    return 100.0 * float(np.mean(np.asarray(pred) == labels))


def macro_f1(pred, labels) -> float:
    """Mean per-class F1 over the classes present in ``labels``, in percent."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    if labels.size == 0:
        raise DataError("cannot evaluate on an empty test set")
    scores = []
    for c in np.unique(labels):
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return 100.0 * float(np.mean(scores))


@dataclass
class MetricsReport:
    method: str
    experts: int
    transfer: str  # None | Features | Images
    per_dataset: dict[str, tuple[float, float]] = field(default_factory=dict)

    def add(self, dataset: str, pred, labels) -> None:
        self.per_dataset[dataset] = (accuracy(pred, labels), macro_f1(pred, labels))

    @property
    def average(self) -> tuple[float, float]:
        vals = np.array(list(self.per_dataset.values()))
        return float(vals[:, 0].mean()), float(vals[:, 1].mean())

    def rows(self) -> list[dict]:
        out = [dict(method=self.method, experts=self.experts, transfer=self.transfer, dataset=d,
                    acc=round(a, 4), f1=round(f, 4)) for d, (a, f) in self.per_dataset.items()]
        a, f = self.average
        out.append(dict(method=self.method, experts=self.experts, transfer=self.transfer, dataset="Average",
                        acc=round(a, 4), f1=round(f, 4)))
        return out


def evaluate(predictor, images, labels, report: MetricsReport, dataset: str) -> MetricsReport:
    """Score ``predictor(images) -> global ids`` and add a row for ``dataset``."""
    report.add(dataset, predictor(images), labels)
    return report


def write_metrics_csv(reports: Sequence[MetricsReport], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerows(r.rows())


def read_metrics_csv(path: str | Path) -> dict[str, dict[str, tuple[float, float]]]:
    """method -> dataset -> (acc, f1)"""
    out: dict[str, dict[str, tuple[float, float]]] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise DataError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            out.setdefault(row["method"], {})[row["dataset"]] = (float(row["acc"]), float(row["f1"]))
    return out
