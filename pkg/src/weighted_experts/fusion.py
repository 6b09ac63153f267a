"""Score fusion over frozen experts, with optional in-distribution weighting.

Every expert ``s`` emits logits for every branch ``d`` through a weight block
``W[s -> d]``; the diagonal blocks are the experts' own frozen heads. Branch
``d`` sums the contributions, each scaled by the contributing expert's
attention score ``A[s]``:

    z_d = sum_s A[s] * (h_s @ W[s -> d] + b[s -> d])

SF fixes ``A`` to all-ones. attn-wSF feeds the concatenated features ``h`` to
a small softmax network; nmd-wSF feeds the concatenated NMD vectors ``g``.
The branch logits are concatenated and max-pooled per global class.
"""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .bundle import FeatureBundle
from .config import TrainConfig
from .errors import DataError, DivergenceError, NonFiniteError
from .experts import Expert, seed_for
from .nn import autograd as ag
from .nn import serialize

log = logging.getLogger(__name__)

MODES = ("sf", "attn", "nmd")
MODE_LABELS = {"sf": "SF", "attn": "attn-wSF", "nmd": "nmd-wSF"}


def pooling_map(label_sets: Sequence[Sequence[int]]) -> tuple[list[int], list[list[int]]]:
    """Return (global classes in ascending order, positions of each class in z_a)."""
    positions: dict[int, list[int]] = {}
    pos = 0
    for labels in label_sets:
        for c in labels:
            positions.setdefault(int(c), []).append(pos)
            pos += 1
    classes = sorted(positions)
    return classes, [positions[c] for c in classes]


def knowledge_pool(z_a: np.ndarray, segments: Sequence[Sequence[int]]) -> np.ndarray:
    """Per-class max over the class's positions in the concatenated logits."""
    z_a = np.asarray(z_a, dtype=np.float64)
    total = sum(len(s) for s in segments)
    if z_a.shape[-1] != total or sorted(p for s in segments for p in s) != list(range(total)):
        raise DataError(f"pooling map covers {total} positions but z_a has {z_a.shape[-1]}")
    squeeze = z_a.ndim == 1
    out = ag.segment_max(nn.Tensor(np.atleast_2d(z_a)), segments).data
    return out[0] if squeeze else out


class FusionModel:
    def __init__(self, experts: Sequence[Expert], mode: str = "sf", hidden: int = 64, seed: int = 0):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if not experts:
            raise DataError("fusion needs at least one expert")
        self.experts = list(experts)
        self.mode = mode
        for e in self.experts:
            e.freeze()
        self.roster = [e.expert_id for e in self.experts]
        self.classes, self.segments = pooling_map([e.classes for e in self.experts])
        self.k = self.experts[0].feature_dim
        self.p = 0 if self.experts[0].ref_mean is None else int(self.experts[0].ref_mean.size)
        if mode == "nmd" and any(e.ref_mean is None for e in self.experts):
            raise DataError("nmd-wSF needs a reference neural mean on every expert")
        # cross[s][d]: weight block from expert s into branch d
        self.cross: list[list[nn.Dense]] = []
        for s, src in enumerate(self.experts):
            row = []
            for d, dst in enumerate(self.experts):
                if s == d:
                    row.append(src.head)
                else:
                    blk = nn.Dense(self.k, len(dst.classes), name=f"cross.{src.expert_id}.{dst.expert_id}")
                    blk.weight.data[:] = 0.0
                    row.append(blk)
            self.cross.append(row)
        self.attention: nn.Sequential | None = None
        if mode != "sf":
            rng = np.random.default_rng(seed_for(seed, "attention", mode, *self.roster))
            n_in = len(self.experts) * (self.k if mode == "attn" else self.p)
            # att0 is a frozen per-feature standardisation, fitted once from the training bundle
            norm = nn.Dense(n_in, n_in, name="att0")
            norm.weight.data = np.eye(n_in)
            norm.weight.trainable = norm.bias.trainable = False
            self.attention = nn.Sequential(
                [norm, nn.Dense(n_in, hidden, rng, name="att1"), nn.ReLU(),
                 nn.Dense(hidden, hidden, rng, name="att2"), nn.ReLU(),
                 nn.Dense(hidden, len(self.experts), rng, name="att3"), nn.Softmax()],
                input_shape=(n_in,),
            )
        self.trained = False
        self.log: dict = {}

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def input_dim(self) -> int:
        return 0 if self.attention is None else self.attention.input_shape[0]

    def fit_input_scaling(self, inputs: np.ndarray) -> None:
        """Set att0 to (x - mean) / std over the rows of ``inputs``."""
        if self.attention is None:
            return
        mu, sd = inputs.mean(axis=0), inputs.std(axis=0)
        sd = np.where(sd > 1e-8, sd, 1.0)
        norm = self.attention.layers[0]
        norm.weight.data = np.diag(1.0 / sd)
        norm.bias.data = -mu / sd

    def trainable_parameters(self) -> list[nn.Parameter]:
        params = [p for s, row in enumerate(self.cross) for d, blk in enumerate(row) if s != d
                  for p in blk.parameters()]
        if self.attention is not None:
            params += [p for p in self.attention.parameters() if p.trainable]
        return params

    def named_trainable(self) -> list[tuple[str, nn.Parameter]]:
        out = [(p.name, p) for s, row in enumerate(self.cross) for d, blk in enumerate(row) if s != d
               for p in blk.parameters()]
        if self.attention is not None:
            out += [(f"attention.{n}", p) for n, p in self.attention.named_parameters()]
        return out

    # ------------------------------------------------------------ forward pieces
    def attention_input(self, h: np.ndarray, g: np.ndarray | None) -> np.ndarray:
        src = h if self.mode == "attn" else g
        if src is None:
            raise DataError(f"{MODE_LABELS[self.mode]} needs {'h' if self.mode == 'attn' else 'g'} vectors")
        return src.reshape(len(src), -1)

    def attention_scores(self, inputs) -> nn.Tensor:
        """A for a batch of concatenated h (attn) or g (nmd) vectors."""
        if self.attention is None:
            raise DataError("SF mode has no attention network")
        x = ag.as_tensor(inputs)
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise DataError(f"{MODE_LABELS[self.mode]} expects inputs of width {self.input_dim}, got {x.shape}")
        return self.attention(x)

    def branch_logits(self, h, A=None) -> list[nn.Tensor]:
        """z_d for every branch. ``h`` is (N, D, k); ``A`` is (N, D) or None for all-ones."""
        z_a = self._concat_logits(self._check_h(h), A)
        bounds = np.cumsum([0] + [len(e.classes) for e in self.experts])
        return [nn.Tensor(z_a.data[:, lo:hi]) for lo, hi in zip(bounds[:-1], bounds[1:])]

    def _check_h(self, h) -> np.ndarray:
        h = np.asarray(h)
        if h.ndim != 3 or h.shape[1:] != (self.n_experts, self.k):
            raise DataError(f"expected (N, {self.n_experts}, {self.k}) expert features, got {h.shape}")
        return h

    def _concat_logits(self, h: np.ndarray, A) -> nn.Tensor:
        terms = []
        for s, row in enumerate(self.cross):
            w = ag.concat([blk.weight for blk in row], axis=1)
            b = ag.concat([blk.bias for blk in row], axis=0)
            y = ag.add(ag.matmul(nn.Tensor(h[:, s]), w), b)
            if A is not None:
                y = ag.mul(ag.column(ag.as_tensor(A), s), y)
            terms.append(y)
        return ag.add_n(terms) if len(terms) > 1 else terms[0]

    def forward(self, h: np.ndarray, g: np.ndarray | None = None, force_uniform: bool = False):
        """Return (pooled logits z~_a, A). ``force_uniform`` replaces A with 1/D."""
        h = self._check_h(h)
        n = len(h)
        if self.mode == "sf":
            A = nn.Tensor(np.ones((n, self.n_experts)))
            z_a = self._concat_logits(h, None)
        else:
            if force_uniform:
                A = nn.Tensor(np.full((n, self.n_experts), 1.0 / self.n_experts))
            else:
                A = self.attention_scores(self.attention_input(h, g))
            z_a = self._concat_logits(h, A)
        return ag.segment_max(z_a, self.segments), A

    def predict_features(self, h: np.ndarray, g: np.ndarray | None = None, force_uniform: bool = False,
                         batch: int = 1024):
        if not self.trained:
            raise DataError("fusion model has not been trained")
        classes = np.asarray(self.classes)
        zs, As = [], []
        for i in range(0, len(h), batch):
            z, A = self.forward(h[i:i + batch], None if g is None else g[i:i + batch], force_uniform)
            zs.append(z.data)
            As.append(A.data)
        z = np.concatenate(zs) if zs else np.zeros((0, len(classes)))
        A = np.concatenate(As) if As else np.zeros((0, self.n_experts))
        return classes[z.argmax(axis=1)] if len(z) else np.zeros(0, dtype=np.int64), z, A

    def predict(self, bundle: FeatureBundle, force_uniform: bool = False):
        """(global class, z~_a, A) for every row of a feature bundle."""
        b = bundle.select(self.roster)
        return self.predict_features(b.h, b.g if self.mode == "nmd" else None, force_uniform)

    def with_mode(self, mode: str) -> "FusionModel":
        """Same experts and cross weights, different weighting mode (no attention net for SF)."""
        other = FusionModel.__new__(FusionModel)
        other.__dict__.update(self.__dict__)
        other.mode = mode
        if mode == "sf":
            other.attention = None
        return other

    # ------------------------------------------------------------ persistence
    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        serialize.save(d / "fusion.efw", serialize.state_dict(self.named_trainable()))
        meta = {
            "mode": self.mode, "experts": self.roster, "classes": self.classes,
            "pooling_map": self.segments, "k": self.k, "p": self.p, "input_dim": self.input_dim,
            "hidden": None if self.attention is None else self.attention.layers[1].n_out,
            "training": self.log,
        }
        (d / "fusion.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory: str | Path, experts: Sequence[Expert]) -> "FusionModel":
        d = Path(directory)
        meta = json.loads((d / "fusion.json").read_text())
        by_id = {e.expert_id: e for e in experts}
        model = cls([by_id[i] for i in meta["experts"]], meta["mode"], hidden=meta["hidden"] or 64)
        serialize.load_state_dict(model.named_trainable(), serialize.load(d / "fusion.efw"))
        model.log = meta.get("training", {})
        model.trained = True
        return model


def train_fusion(train: FeatureBundle, val: FeatureBundle, experts: Sequence[Expert], mode: str,
                 cfg: TrainConfig) -> FusionModel:
    """Fit the off-diagonal blocks (and the attention net) on transferred bundles only."""
    if not isinstance(train, FeatureBundle) or not isinstance(val, FeatureBundle):
        raise TypeError("fusion trains on FeatureBundle inputs only")
    model = FusionModel(experts, mode, hidden=cfg.attention_hidden, seed=cfg.seed)
    tr, va = train.select(model.roster), val.select(model.roster)
    pos = {c: i for i, c in enumerate(model.classes)}
    y = np.array([pos[int(c)] for c in tr.labels], dtype=np.int64)
    g_tr = tr.g if mode == "nmd" else None
    if mode != "sf":
        model.fit_input_scaling(model.attention_input(tr.h, g_tr))
    params = model.trainable_parameters()
    frozen = [e.head for e in model.experts]
    opt = nn.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(seed_for(cfg.seed, "fusion", mode, *model.roster))
    best_acc, best = -1.0, None
    history = {"loss": [], "val_acc": []}
    model.trained = True
    t0 = time.perf_counter()
    for epoch in range(cfg.fusion_epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for i in range(0, len(y), cfg.batch_size):
            b = order[i:i + cfg.batch_size]
            opt.zero_grad()
            for head in frozen:
                nn.zero_grad(head.parameters())
            try:
                with nn.Tape() as tape:
                    z, _ = model.forward(tr.h[b], None if g_tr is None else g_tr[b])
                    loss = nn.cross_entropy(z, y[b])
                if not np.isfinite(loss.data):
                    raise DivergenceError(f"fusion loss became {loss.data} at epoch {epoch}")
                nn.backward(tape, loss)
                opt.step()
            except NonFiniteError as e:
                raise DivergenceError(f"fusion training diverged at epoch {epoch}: {e}") from e
            total += float(loss.data) * len(b)
        pred, _, _ = model.predict(va)
        acc = float(np.mean(pred == va.labels))
        history["loss"].append(total / len(y))
        history["val_acc"].append(acc)
        if acc > best_acc:
            best_acc = acc
            best = [p.data.copy() for p in params]
            history["best_epoch"] = epoch
    for p, v in zip(params, best):
        p.data = v
    history["best_val_acc"] = best_acc
    history["seconds"] = time.perf_counter() - t0
    history["n_train"] = len(y)
    model.log = history
    log.info("fusion %s: best val acc %.3f (%.1fs)", MODE_LABELS[mode], best_acc, history["seconds"])
    return model
