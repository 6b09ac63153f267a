"""Multi-site protocol: models travel to sites, only feature bundles come back.

A :class:`SiteVault` owns one site's images. Everything that touches pixels
runs inside a vault method, and the only things a vault hands out are EFW1
weight blobs, EFB1 bundle bytes, or predictions. Each training-protocol
crossing is appended to a :class:`TransferLog`.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bundle import FeatureBundle
from .config import AugmentConfig, TrainConfig
from .data import SiteDataset, augment_batch
from .errors import PolicyError
from .experts import Expert, finetune_expert, seed_for, train_base
from .nmd import channel_means, nmd_from_means, reference_mean
from . import bundle as bundle_mod
from .nn import serialize

ALLOWED_KINDS = {"model": serialize.MAGIC, "bundle": bundle_mod.MAGIC}
LOG_COLUMNS = ("step", "direction", "kind", "bytes", "seconds")


@dataclass
class TransferRecord:
    step: int
    direction: str  # to-site | from-site
    kind: str  # model | bundle
    bytes: int
    seconds: float
    site: str = ""


@dataclass
class TransferLog:
    records: list[TransferRecord] = field(default_factory=list)

    def record(self, step: int, direction: str, kind: str, payload: bytes, site: str = "",
               seconds: float = 0.0) -> None:
        if kind not in ALLOWED_KINDS:
            raise PolicyError(f"payload kind {kind!r} may not cross a site boundary")
        if not isinstance(payload, (bytes, bytearray)) or payload[:4] != ALLOWED_KINDS[kind]:
            raise PolicyError(f"{kind} payload does not carry the {ALLOWED_KINDS[kind]!r} header")
        if direction not in ("to-site", "from-site"):
            raise ValueError(f"direction must be to-site or from-site, got {direction!r}")
        self.records.append(TransferRecord(step, direction, kind, len(payload), seconds, site))

    def count(self, direction: str | None = None, kind: str | None = None, step: int | None = None) -> int:
        return sum((direction is None or r.direction == direction) and (kind is None or r.kind == kind)
                   and (step is None or r.step == step) for r in self.records)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([r.step, r.direction, r.kind, r.bytes, f"{r.seconds:.6f}"])

    @classmethod
    def read_csv(cls, path: str | Path) -> "TransferLog":
        out = cls()
        if Path(path).exists():
            with open(path, newline="") as f:
                for row in csv.DictReader(f):
                    out.records.append(TransferRecord(int(row["step"]), row["direction"], row["kind"],
                                                      int(row["bytes"]), float(row["seconds"])))
        return out


def _pack(blobs: dict[str, bytes]) -> bytes:
    """Several expert blobs shipped together; the roster travels as one model payload."""
    arrays = {}
    for eid, blob in blobs.items():
        for name, arr in serialize.loads(blob).items():
            arrays[f"{eid}/{name}"] = arr
    return serialize.dumps(arrays)


class SiteVault:
    """Holds a site's (train, val, test) splits; pixels never leave."""

    def __init__(self, site: SiteDataset, splits: tuple[SiteDataset, SiteDataset, SiteDataset],
                 log: TransferLog, image_size: int = 16):
        self.site_id = site.site_id
        self.role = site.role
        self.step = site.step
        self.label_set = list(site.label_set)
        self.image_size = image_size
        self._splits = dict(zip(("train", "val", "test"), splits))
        self._log = log
        self._models: dict[str, bytes] = {}
        self.seconds: dict[str, float] = {}
        self.train_logs: dict[str, list[dict]] = {}

    def __repr__(self) -> str:
        return f"SiteVault({self.site_id!r}, role={self.role!r})"

    def split_size(self, split: str) -> int:
        return len(self._splits[split])

    def _require_training_site(self) -> None:
        if self.role == "external":
            raise PolicyError(f"external site {self.site_id} is held out from every training operation")

    # ------------------------------------------------------------ model traffic
    def receive(self, blobs: dict[str, bytes], step: int) -> None:
        """Ship expert blobs to this site (one logged model transfer)."""
        self._require_training_site()
        payload = _pack(blobs)
        self._log.record(step, "to-site", "model", payload, self.site_id)
        self._models.update(blobs)

    def _send_model(self, blob: bytes, step: int, seconds: float) -> bytes:
        self._log.record(step, "from-site", "model", blob, self.site_id, seconds)
        return blob

    def train_base(self, cfg: TrainConfig, expert_id: str) -> bytes:
        self._require_training_site()
        expert = train_base(self._splits["train"], self._splits["val"], cfg, expert_id, self.image_size)
        return self._finish(expert)

    def _finish(self, expert: Expert) -> bytes:
        reference_mean(expert, self._splits["train"].images)
        self.seconds["train"] = expert.logs[-1].seconds
        self.train_logs[expert.expert_id] = [lg.to_dict() for lg in expert.logs]
        self._models[expert.expert_id] = expert.to_blob()
        return self._send_model(self._models[expert.expert_id], self.step, expert.logs[-1].seconds)

    def remote_finetune(self, base_id: str, cfg: TrainConfig, expert_id: str) -> bytes:
        """Fine-tune a clone of a previously received blob on this site's data."""
        self._require_training_site()
        if base_id not in self._models:
            raise PolicyError(f"{base_id} was never shipped to {self.site_id}")
        base = Expert.from_blob(base_id, self._models[base_id], self.image_size)
        expert = finetune_expert(base, self._splits["train"], self._splits["val"], cfg, expert_id)
        return self._finish(expert)

    # ------------------------------------------------------------ features
    def _experts(self, roster: Sequence[str]) -> list[Expert]:
        missing = [e for e in roster if e not in self._models]
        if missing:
            raise PolicyError(f"site {self.site_id} lacks expert blobs {missing}")
        return [Expert.from_blob(e, self._models[e], self.image_size) for e in roster]

    def _vectors(self, experts: Sequence[Expert], images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        hs, gs = [], []
        for e in experts:
            h, taps = e.features_and_taps(images)
            hs.append(h)
            gs.append(nmd_from_means(e, channel_means(taps)))
        return np.stack(hs, axis=1), np.stack(gs, axis=1)

    def export_feature_bundle(self, roster: Sequence[str], split: str, n_aug: int, seed: int,
                              aug_cfg: AugmentConfig, step: int) -> bytes:
        """``n_aug`` augmented forward passes of every expert over one split."""
        self._require_training_site()
        if split not in ("train", "val"):
            raise PolicyError("only train/val bundles are part of the training protocol")
        t0 = time.perf_counter()
        data = self._splits[split]
        experts = self._experts(roster)
        rng = np.random.default_rng(seed_for(seed, "bundle", self.site_id, split, *roster))
        hs, gs, ex, aug = [], [], [], []
        n = len(data)
        for a in range(n_aug):
            images = augment_batch(data.images, rng, aug_cfg)
            h, g = self._vectors(experts, images)
            hs.append(h)
            gs.append(g)
            ex.append(np.arange(n))
            aug.append(np.full(n, a))
        b = FeatureBundle(self.site_id, list(roster), split, n_aug, np.concatenate(ex), np.concatenate(aug),
                          np.tile(data.labels, n_aug), np.tile(data.patients, n_aug),
                          np.concatenate(hs), np.concatenate(gs))
        payload = b.to_bytes()
        seconds = time.perf_counter() - t0
        self.seconds[f"bundle_{split}"] = seconds
        self._log.record(step, "from-site", "bundle", payload, self.site_id, seconds)
        return payload

    # ------------------------------------------------------------ evaluation at the site
    def evaluate(self, fn: Callable[[np.ndarray], object], split: str = "test"):
        """Run ``fn`` on this split's images inside the vault and return
        (fn output, ground-truth labels). ``fn`` must not hand images back."""
        data = self._splits[split]
        out = fn(data.images)
        for arr in out if isinstance(out, tuple) else (out,):
            if isinstance(arr, np.ndarray) and (np.shares_memory(arr, data.images)
                                                or arr.shape == data.images.shape):
                raise PolicyError("evaluation output looks like pixel data")
        return out, data.labels.copy()

    def test_vectors(self, experts: Sequence[Expert]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Un-augmented (h, g, labels) for the test split, computed on site."""
        (h, g), labels = self.evaluate(lambda im: self._vectors(experts, im))
        return h, g, labels


def make_vaults(corpus, log: TransferLog) -> dict[str, SiteVault]:
    size = corpus.config.image_size
    return {ds.site_id: SiteVault(ds, corpus.splits[ds.site_id], log, size)
            for ds in corpus.sites + corpus.external}


def bundle_nbytes(n_examples: int, n_experts: int, k: int, p: int, n_aug: int = 5) -> int:
    """Vector payload size (f64) of a bundle, excluding headers and metadata columns."""
    return n_aug * n_examples * n_experts * (k + p) * 8


def image_nbytes(n_examples: int, image_size: int = 16) -> int:
    return n_examples * image_size * image_size * 8
