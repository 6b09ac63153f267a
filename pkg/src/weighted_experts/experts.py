"""Expert classifiers: base training, clone-and-fine-tune, naive sequential fine-tuning."""
from __future__ import annotations

import copy
import json
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .config import TrainConfig
from .errors import DataError, DivergenceError, NonFiniteError
from .nn import serialize

log = logging.getLogger(__name__)

# indices of the post-ReLU conv outputs inside the encoder
CONV_TAPS = (1, 4)


def make_encoder(rng: np.random.Generator, image_size: int = 16, k: int = 32) -> nn.Sequential:
    flat = 16 * (((image_size - 2) // 2 - 2) // 2) ** 2
    return nn.Sequential(
        [
            nn.Conv2d(1, 8, 3, rng, name="conv1"), nn.ReLU(), nn.MaxPool2(),
            nn.Conv2d(8, 16, 3, rng, name="conv2"), nn.ReLU(), nn.MaxPool2(),
            nn.Flatten(), nn.Dense(flat, k, rng, name="fc"), nn.ReLU(),
        ],
        input_shape=(1, image_size, image_size),
    )


def seed_for(*parts) -> int:
    """Stable seed from mixed str/int parts (``hash()`` is salted per process)."""
    return zlib.crc32("/".join(map(str, parts)).encode())


def as_batch(images: np.ndarray) -> nn.Tensor:
    return nn.Tensor(images[:, None, :, :])


@dataclass
class TrainLog:
    loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = -1.0
    seconds: float = 0.0
    n_train: int = 0
    epochs: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class Classifier:
    """Encoder plus a dense head whose columns are the global ids in ``classes``."""

    def __init__(self, encoder: nn.Sequential, head: nn.Dense, classes: list[int]):
        if head.n_out != len(classes):
            raise DataError(f"head width {head.n_out} != {len(classes)} classes")
        self.encoder = encoder
        self.head = head
        self.classes = list(classes)
        self.logs: list[TrainLog] = []

    @property
    def feature_dim(self) -> int:
        return self.head.n_in

    def parameters(self) -> list[nn.Parameter]:
        return self.encoder.parameters() + self.head.parameters()

    def named_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return ([(f"encoder.{n}", p) for n, p in self.encoder.named_parameters()]
                + [("head.weight", self.head.weight), ("head.bias", self.head.bias)])

    def freeze(self) -> None:
        for p in self.parameters():
            p.trainable = False

    def features(self, images: np.ndarray) -> np.ndarray:
        return self.encoder(as_batch(images)).data

    def features_and_taps(self, images: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        h, taps = self.encoder(as_batch(images), capture=CONV_TAPS)
        return h.data, [t.data for t in taps]

    def local_logits(self, images: np.ndarray) -> np.ndarray:
        return self.head(nn.Tensor(self.features(images))).data

    def head_logits(self, h: np.ndarray) -> np.ndarray:
        return h @ self.head.weight.data + self.head.bias.data

    def predict(self, images: np.ndarray, batch: int = 512) -> np.ndarray:
        classes = np.asarray(self.classes)
        out = [classes[self.local_logits(images[i:i + batch]).argmax(axis=1)]
               for i in range(0, len(images), batch)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def local_index(self, labels: np.ndarray) -> np.ndarray:
        pos = {c: i for i, c in enumerate(self.classes)}
        try:
            return np.array([pos[int(c)] for c in labels], dtype=np.int64)
        except KeyError as e:
            raise DataError(f"label {e.args[0]} is outside this model's classes {self.classes}") from None

    def clone(self) -> "Classifier":
        return copy.deepcopy(self)


class Expert(Classifier):
    def __init__(self, expert_id: str, encoder, head, classes, ref_mean: np.ndarray | None = None):
        super().__init__(encoder, head, classes)
        self.expert_id = expert_id
        self.ref_mean = ref_mean

    # -- blob: weights plus the metadata needed to rebuild, in one EFW1 payload
    def to_blob(self) -> bytes:
        arrays = serialize.state_dict(self.named_parameters())
        arrays["meta.classes"] = np.asarray(self.classes, dtype=np.float64)
        if self.ref_mean is not None:
            arrays["meta.ref_mean"] = self.ref_mean
        return serialize.dumps(arrays)

    @classmethod
    def from_blob(cls, expert_id: str, blob: bytes, image_size: int = 16) -> "Expert":
        arrays = serialize.loads(blob)
        classes = [int(c) for c in arrays.pop("meta.classes")]
        ref = arrays.pop("meta.ref_mean", None)
        k = arrays["head.weight"].shape[0]
        enc = make_encoder(np.random.default_rng(0), image_size, k)
        head = nn.Dense(k, len(classes), name="head")
        e = cls(expert_id, enc, head, classes, ref)
        serialize.load_state_dict(e.named_parameters(), arrays)
        return e

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"expert_{self.expert_id}.efw").write_bytes(self.to_blob())
        sidecar = {
            "expert_id": self.expert_id, "label_set": self.classes, "k": self.feature_dim,
            "p": None if self.ref_mean is None else int(self.ref_mean.size),
            "ref_mean": None if self.ref_mean is None else self.ref_mean.tolist(),
            "training": [lg.to_dict() for lg in self.logs],
        }
        (d / f"expert_{self.expert_id}.json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, directory: str | Path, expert_id: str, image_size: int = 16) -> "Expert":
        d = Path(directory)
        e = cls.from_blob(expert_id, (d / f"expert_{expert_id}.efw").read_bytes(), image_size)
        meta_path = d / f"expert_{expert_id}.json"
        if meta_path.exists():
            e.logs = [TrainLog(**lg) for lg in json.loads(meta_path.read_text())["training"]]
        return e


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(pred == labels)) if len(labels) else 0.0


def fit(model: Classifier, train_x: np.ndarray, train_y: np.ndarray, val_x: np.ndarray, val_y: np.ndarray,
        epochs: int, cfg: TrainConfig, seed: int) -> TrainLog:
    """Adam on cross-entropy; restores the weights of the best-validation epoch."""
    if len(train_y) == 0 or len(val_y) == 0:
        raise DataError("training and validation splits must be non-empty")
    y = model.local_index(train_y)
    params = model.parameters()
    opt = nn.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(seed)
    lg = TrainLog(n_train=len(y), epochs=epochs)
    best = None
    t0 = time.perf_counter()
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for i in range(0, len(y), cfg.batch_size):
            b = order[i:i + cfg.batch_size]
            opt.zero_grad()
            try:
                out, tape = nn.forward(model.encoder, as_batch(train_x[b]))
                with tape:
                    loss = nn.cross_entropy(model.head(out), y[b])
                if not np.isfinite(loss.data):
                    raise DivergenceError(f"loss became {loss.data} at epoch {epoch}")
                nn.backward(tape, loss)
                opt.step()
            except NonFiniteError as e:
                raise DivergenceError(f"training diverged at epoch {epoch}: {e}") from e
            total += float(loss.data) * len(b)
        acc = accuracy(model.predict(val_x), val_y)
        lg.loss.append(total / len(y))
        lg.val_acc.append(acc)
        if acc > lg.best_val_acc:
            lg.best_val_acc, lg.best_epoch = acc, epoch
            best = [p.data.copy() for p in params]
    for p, v in zip(params, best):
        p.data = v
    lg.seconds = time.perf_counter() - t0
    model.logs.append(lg)
    log.info("trained %d epochs on %d examples: best val acc %.3f at epoch %d (%.1fs)",
             epochs, len(y), lg.best_val_acc, lg.best_epoch, lg.seconds)
    return lg


def train_base(train, val, cfg: TrainConfig, expert_id: str = "b", image_size: int | None = None) -> Expert:
    image_size = image_size or train.images.shape[1]
    rng = np.random.default_rng(seed_for(cfg.seed, "base", expert_id))
    enc = make_encoder(rng, image_size, cfg.feature_dim)
    head = nn.Dense(cfg.feature_dim, len(train.label_set), rng, name="head")
    expert = Expert(expert_id, enc, head, list(train.label_set))
    fit(expert, train.images, train.labels, val.images, val.labels, cfg.epochs, cfg,
        seed_for(cfg.seed, "fit", expert_id))
    return expert


def finetune_expert(base: Expert, train, val, cfg: TrainConfig, expert_id: str) -> Expert:
    """Clone ``base``, give it a fresh head over the new label set, train all layers."""
    if not train.label_set:
        raise DataError("incremental label set is empty")
    rng = np.random.default_rng(seed_for(cfg.seed, "head", expert_id))
    enc = copy.deepcopy(base.encoder)
    enc.set_trainable(True)
    head = nn.Dense(base.feature_dim, len(train.label_set), rng, name="head")
    expert = Expert(expert_id, enc, head, list(train.label_set))
    fit(expert, train.images, train.labels, val.images, val.labels, cfg.finetune_epochs, cfg,
        seed_for(cfg.seed, "fit", expert_id))
    return expert


def finetune_naive(model: Classifier, train, val, head_mode: str, cfg: TrainConfig, step_tag: str = "") -> Classifier:
    """Sequential fine-tuning baseline. ``constant`` swaps in a head over the
    new label set; ``expand`` appends columns for unseen classes."""
    if head_mode not in ("constant", "expand"):
        raise ValueError(f"head_mode must be 'constant' or 'expand', got {head_mode!r}")
    rng = np.random.default_rng(seed_for(cfg.seed, "naive", head_mode, step_tag))
    k = model.feature_dim
    if head_mode == "constant":
        classes = list(train.label_set)
        head = nn.Dense(k, len(classes), rng, name="head")
    else:
        novel = [c for c in train.label_set if c not in model.classes]
        classes = model.classes + novel
        head = nn.Dense(k, len(classes), rng, name="head")
        head.weight.data[:, : len(model.classes)] = model.head.weight.data
        head.bias.data[: len(model.classes)] = model.head.bias.data
    out = Classifier(copy.deepcopy(model.encoder), head, classes)
    out.encoder.set_trainable(True)
    out.logs = list(model.logs)
    fit(out, train.images, train.labels, val.images, val.labels, cfg.finetune_epochs, cfg,
        seed_for(cfg.seed, "fit-naive", head_mode, step_tag))
    return out
