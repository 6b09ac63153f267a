"""Confidence-based expert selection baselines and the combine-and-retrain oracle.

The confidence baselines only use each expert's own head; they never see
cross weights, so they need no feature transfer.
"""
from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from . import nn
from .config import TrainConfig
from .data import SiteDataset
from .experts import Classifier, fit, make_encoder, seed_for
from .nn import softmax_array


class BaselineKind(enum.Enum):
    MAX_LOGIT = "maxlogit"
    MSP = "msp"
    CONFIDENCE_ROUTING = "routing"
    COMBINE_RETRAIN = "oracle"


def _scatter_max(scores: Sequence[np.ndarray], label_sets: Sequence[Sequence[int]], n_classes: int) -> np.ndarray:
    n = len(scores[0])
    out = np.full((n, n_classes), -np.inf)
    for s, labels in zip(scores, label_sets):
        cols = np.asarray(labels)
        out[:, cols] = np.maximum(out[:, cols], s)
    return out


def _n_classes(label_sets) -> int:
    return max(max(ls) for ls in label_sets) + 1


def max_logit_from_logits(logits: Sequence[np.ndarray], label_sets: Sequence[Sequence[int]]) -> np.ndarray:
    """Per global class, the max own-head logit over experts that know it; argmax."""
    return _scatter_max(logits, label_sets, _n_classes(label_sets)).argmax(axis=1)


def msp_from_logits(logits: Sequence[np.ndarray], label_sets: Sequence[Sequence[int]]) -> np.ndarray:
    probs = [softmax_array(z) for z in logits]
    return _scatter_max(probs, label_sets, _n_classes(label_sets)).argmax(axis=1)


def confidence_route_from_logits(logits: Sequence[np.ndarray], label_sets: Sequence[Sequence[int]]) -> np.ndarray:
    """Pick the expert with the largest max-softmax (lowest index on ties), use its argmax."""
    probs = [softmax_array(z) for z in logits]
    conf = np.stack([p.max(axis=1) for p in probs], axis=1)
    winner = conf.argmax(axis=1)
    local = [np.asarray(ls)[p.argmax(axis=1)] for p, ls in zip(probs, label_sets)]
    return np.stack(local, axis=1)[np.arange(len(winner)), winner]


def _own_logits(experts: Sequence[Classifier], images: np.ndarray) -> list[np.ndarray]:
    return [e.local_logits(images) for e in experts]


def max_logit_predict(experts: Sequence[Classifier], images: np.ndarray) -> np.ndarray:
    return max_logit_from_logits(_own_logits(experts, images), [e.classes for e in experts])


def msp_predict(experts: Sequence[Classifier], images: np.ndarray) -> np.ndarray:
    return msp_from_logits(_own_logits(experts, images), [e.classes for e in experts])


def confidence_route_predict(experts: Sequence[Classifier], images: np.ndarray) -> np.ndarray:
    return confidence_route_from_logits(_own_logits(experts, images), [e.classes for e in experts])


PREDICTORS = {
    BaselineKind.MAX_LOGIT: max_logit_predict,
    BaselineKind.MSP: msp_predict,
    BaselineKind.CONFIDENCE_ROUTING: confidence_route_predict,
}

BASELINE_LABELS = {
    BaselineKind.MAX_LOGIT: "Max Logit",
    BaselineKind.MSP: "MSP",
    BaselineKind.CONFIDENCE_ROUTING: "Confidence Routing",
    BaselineKind.COMBINE_RETRAIN: "Combine & Retrain (oracle)",
}


def _union(datasets: Sequence[SiteDataset]) -> SiteDataset:
    labels = sorted({c for ds in datasets for c in ds.label_set})
    return SiteDataset(
        "+".join(ds.site_id for ds in datasets), "union", -1, labels,
        np.concatenate([ds.images for ds in datasets]),
        np.concatenate([ds.labels for ds in datasets]),
        np.concatenate([ds.patients for ds in datasets]),
    )


def combine_retrain(trains: Sequence[SiteDataset], vals: Sequence[SiteDataset], cfg: TrainConfig,
                    step: int = 0) -> Classifier:
    """Train one classifier from scratch on the pooled data of every site so far."""
    train, val = _union(trains), _union(vals)
    rng = np.random.default_rng(seed_for(cfg.seed, "oracle", step))
    enc = make_encoder(rng, train.images.shape[1], cfg.feature_dim)
    head = nn.Dense(cfg.feature_dim, len(train.label_set), rng, name="head")
    model = Classifier(enc, head, train.label_set)
    fit(model, train.images, train.labels, val.images, val.labels, cfg.epochs, cfg,
        seed_for(cfg.seed, "fit-oracle", step))
    return model
