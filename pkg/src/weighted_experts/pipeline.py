"""Run-directory orchestration shared by the CLI and the experiment scripts.

Layout under ``out``::

    corpus/                 registry.json, scenario.json, site_<id>.bin
    sites/<id>/models/      expert blobs a site has received (its own storage)
    experts/                expert_<id>.efw + expert_<id>.json (coordinator copies)
    bundles/step<s>/        <site>_<split>.efb
    fusion/step<s>/<mode>/  fusion.efw + fusion.json
    baselines/              naive fine-tuning and oracle models
    transfer_log.csv, timings.json, metrics_<split>.csv, attention_<split>.npz
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .baselines import (
    BASELINE_LABELS, BaselineKind, combine_retrain, confidence_route_from_logits,
    max_logit_from_logits, msp_from_logits,
)
from .bundle import FeatureBundle, merge
from .config import RunConfig, load_run_config, to_dict
from .data import MultiSiteCorpus, generate_scenario, load_corpus, save_corpus
from .errors import DataError
from .experts import Classifier, Expert, TrainLog, finetune_naive, make_encoder
from .fusion import MODE_LABELS, MODES, FusionModel, train_fusion
from .metrics import MetricsReport, write_metrics_csv
from .multisite import SiteVault, TransferLog
from . import nn
from .nn import serialize

log = logging.getLogger(__name__)


class Run:
    def __init__(self, out: str | Path, cfg: RunConfig | None = None, corpus: MultiSiteCorpus | None = None):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        cfg_path = self.out / "run_config.json"
        if cfg is None:
            cfg = load_run_config(cfg_path) if cfg_path.exists() else RunConfig()
        self.cfg = cfg
        cfg_path.write_text(json.dumps(to_dict(cfg), indent=2))
        self._corpus = corpus
        self.log = TransferLog.read_csv(self.out / "transfer_log.csv")
        self._vaults: dict[str, SiteVault] | None = None

    # ------------------------------------------------------------ state
    @property
    def corpus(self) -> MultiSiteCorpus:
        if self._corpus is None:
            self._corpus = load_corpus(self.out / "corpus")
        return self._corpus

    @property
    def internal_ids(self) -> list[str]:
        return [s.site_id for s in self.corpus.sites]

    @property
    def external_ids(self) -> list[str]:
        return [s.site_id for s in self.corpus.external]

    @property
    def n_steps(self) -> int:
        return len(self.corpus.sites) - 1

    def vault(self, site_id: str) -> SiteVault:
        if self._vaults is None:
            size = self.corpus.config.image_size
            self._vaults = {}
            for ds in self.corpus.sites + self.corpus.external:
                v = PersistentVault(ds, self.corpus.splits[ds.site_id], self.log, size,
                                    self.out / "sites" / ds.site_id / "models")
                self._vaults[ds.site_id] = v
        return self._vaults[site_id]

    def save_log(self) -> None:
        self.log.write_csv(self.out / "transfer_log.csv")

    def timings(self) -> dict:
        p = self.out / "timings.json"
        return json.loads(p.read_text()) if p.exists() else {"steps": {}}

    def _update_timing(self, step: int, **entries) -> None:
        t = self.timings()
        cur = t["steps"].setdefault(str(step), {})
        for k, v in entries.items():
            if isinstance(v, dict):
                cur.setdefault(k, {}).update(v)
            else:
                cur[k] = v
        (self.out / "timings.json").write_text(json.dumps(t, indent=2))

    def roster(self, step: int) -> list[str]:
        return self.internal_ids[: step + 1]

    def experts(self, step: int | None = None) -> list[Expert]:
        step = self.n_steps if step is None else step
        size = self.corpus.config.image_size
        missing = [e for e in self.roster(step) if not (self.out / "experts" / f"expert_{e}.efw").exists()]
        if missing:
            raise DataError(f"experts {missing} have not been trained yet")
        return [Expert.load(self.out / "experts", e, size) for e in self.roster(step)]

    def completed_steps(self) -> int:
        """Highest step whose bundles exist, or -1."""
        s = -1
        while (self.out / "bundles" / f"step{s + 1}").exists():
            s += 1
        return s

    # ------------------------------------------------------------ protocol
    def gen_data(self, seed: int | None = None) -> str:
        corpus = generate_scenario(self.cfg.scenario, seed)
        self.cfg.scenario = corpus.config
        (self.out / "run_config.json").write_text(json.dumps(to_dict(self.cfg), indent=2))
        self._corpus = corpus
        return save_corpus(corpus, self.out / "corpus")

    def _collect(self, site_id: str, blob: bytes, expert_id: str) -> None:
        d = self.out / "experts"
        d.mkdir(parents=True, exist_ok=True)
        expert = Expert.from_blob(expert_id, blob, self.corpus.config.image_size)
        expert.logs = [TrainLog(**lg) for lg in self.vault(site_id).train_logs[expert_id]]
        expert.save(d)

    def _export_bundles(self, step: int) -> float:
        roster = self.roster(step)
        new = roster[-1]
        new_blob = (self.out / "experts" / f"expert_{new}.efw").read_bytes()
        bdir = self.out / "bundles" / f"step{step}"
        bdir.mkdir(parents=True, exist_ok=True)
        seconds = 0.0
        for sid in roster:
            v = self.vault(sid)
            if not v.has(new):
                v.receive({new: new_blob}, step)
            for split in ("train", "val"):
                payload = v.export_feature_bundle(roster, split, self.cfg.train.n_aug, self.cfg.train.seed,
                                                  self.cfg.augment, step)
                (bdir / f"{sid}_{split}.efb").write_bytes(payload)
                seconds += v.seconds[f"bundle_{split}"]
        return seconds

    def train_base(self) -> Expert:
        base = self.internal_ids[0]
        v = self.vault(base)
        blob = v.train_base(self.cfg.train, base)
        self._collect(base, blob, base)
        bundle_s = self._export_bundles(0)
        expert = self.experts(0)[0]
        self._update_timing(0, expert_seconds=expert.logs[-1].seconds, bundle_seconds=bundle_s,
                            n_train=v.split_size("train"))
        self.save_log()
        return expert

    def step(self, step: int | None = None) -> Expert:
        """Remote fine-tune at the next site, then refresh bundles at every site so far."""
        step = self.completed_steps() + 1 if step is None else step
        if step < 1 or step > self.n_steps:
            raise DataError(f"step must lie in 1..{self.n_steps}, got {step}")
        if self.completed_steps() < step - 1:
            raise DataError(f"step {step - 1} has not been run yet")
        roster = self.roster(step - 1)
        sid = self.internal_ids[step]
        blobs = {e: (self.out / "experts" / f"expert_{e}.efw").read_bytes() for e in roster}
        v = self.vault(sid)
        v.receive(blobs, step)
        blob = v.remote_finetune(roster[0], self.cfg.train, sid)
        self._collect(sid, blob, sid)
        bundle_s = self._export_bundles(step)
        expert = self.experts(step)[-1]
        self._update_timing(step, expert_seconds=expert.logs[-1].seconds, bundle_seconds=bundle_s,
                            n_train=v.split_size("train"))
        self.save_log()
        return expert

    def load_bundles(self, step: int, split: str) -> FeatureBundle:
        bdir = self.out / "bundles" / f"step{step}"
        parts = [FeatureBundle.load(bdir / f"{sid}_{split}.efb") for sid in self.roster(step)]
        return merge(parts, self.roster(step))

    def train_fusion(self, mode: str, step: int | None = None) -> FusionModel:
        step = self.completed_steps() if step is None else step
        if step < 0:
            raise DataError("no bundles yet; run train-base first")
        experts = self.experts(step)
        model = train_fusion(self.load_bundles(step, "train"), self.load_bundles(step, "val"), experts,
                             mode, self.cfg.train)
        model.save(self.out / "fusion" / f"step{step}" / mode)
        self._update_timing(step, fusion_seconds={mode: model.log["seconds"]})
        return model

    def fusion(self, mode: str, step: int | None = None) -> FusionModel:
        step = self.n_steps if step is None else step
        d = self.out / "fusion" / f"step{step}" / mode
        if not (d / "fusion.json").exists():
            raise DataError(f"no {mode} fusion model at step {step}")
        return FusionModel.load(d, self.experts(step))

    # ------------------------------------------------------------ baselines (privileged data access)
    def _split(self, sid: str, which: str):
        return self.corpus.split(sid, which)

    def run_oracle(self, step: int) -> Classifier:
        ids = self.roster(step)
        model = combine_retrain([self._split(s, "train") for s in ids], [self._split(s, "val") for s in ids],
                                self.cfg.train, step)
        save_classifier(model, self.out / "baselines" / f"oracle_step{step}")
        self._update_timing(step, oracle_seconds=model.logs[-1].seconds,
                            oracle_n_train=model.logs[-1].n_train)
        return model

    def run_naive(self, head_mode: str) -> Classifier:
        """Sequentially fine-tune the base expert over every incremental site."""
        model: Classifier = self.experts(0)[0].clone()
        for step, sid in enumerate(self.internal_ids[1:], start=1):
            model = finetune_naive(model, self._split(sid, "train"), self._split(sid, "val"), head_mode,
                                   self.cfg.train, step_tag=str(step))
        save_classifier(model, self.out / "baselines" / f"finetune_{head_mode}")
        return model

    # ------------------------------------------------------------ evaluation
    def evaluate(self, split: str = "internal", modes=None, inference_timing: bool = True) -> list[MetricsReport]:
        ids = self.internal_ids if split == "internal" else self.external_ids
        if split not in ("internal", "external"):
            raise DataError(f"split must be internal or external, got {split!r}")
        modes = [m for m in (modes or self.cfg.modes)]
        experts = self.experts()
        d = len(experts)
        label_sets = [e.classes for e in experts]
        fusions = {m: self.fusion(m) for m in modes if (self.out / "fusion" / f"step{self.n_steps}" / m).exists()}
        base_dir = self.out / "baselines"
        others: dict[str, tuple[Classifier, int, str]] = {}
        for head_mode in ("constant", "expand"):
            p = base_dir / f"finetune_{head_mode}"
            if p.exists():
                others[f"Fine-Tuning ({head_mode.title()})"] = (load_classifier(p), 1, "None")
        p = base_dir / f"oracle_step{self.n_steps}"
        if p.exists():
            others[BASELINE_LABELS[BaselineKind.COMBINE_RETRAIN]] = (load_classifier(p), 1, "Images")

        reports: dict[str, MetricsReport] = {}

        def rep(name, n, transfer):
            return reports.setdefault(name, MetricsReport(name, n, transfer))

        attention: dict[str, np.ndarray] = {}
        for sid in ids:
            v = self.vault(sid)
            h, g, labels = v.test_vectors(experts)
            for name, model in others.items():
                (pred), _ = v.evaluate(model[0].predict)
                rep(name, model[1], model[2]).add(sid, pred, labels)
            own = [e.head_logits(h[:, i]) for i, e in enumerate(experts)]
            for i, e in enumerate(experts):
                pred = np.asarray(e.classes)[own[i].argmax(axis=1)]
                rep(f"Single Expert ({e.expert_id})", 1, "None").add(sid, pred, labels)
            for kind, fn in ((BaselineKind.MAX_LOGIT, max_logit_from_logits), (BaselineKind.MSP, msp_from_logits),
                             (BaselineKind.CONFIDENCE_ROUTING, confidence_route_from_logits)):
                rep(BASELINE_LABELS[kind], d, "None").add(sid, fn(own, label_sets), labels)
            for m, fm in fusions.items():
                pred, _, A = fm.predict_features(h, g if m == "nmd" else None)
                rep(MODE_LABELS[m], d, "Features").add(sid, pred, labels)
                if m != "sf":
                    attention[f"{m}/{sid}"] = A
        order = [n for n in reports if n.startswith("Fine-Tuning")] + \
                [n for n in reports if n.startswith("Single Expert")] + \
                [BASELINE_LABELS[k] for k in (BaselineKind.MAX_LOGIT, BaselineKind.MSP,
                                              BaselineKind.CONFIDENCE_ROUTING)] + \
                [MODE_LABELS[m] for m in MODES if MODE_LABELS[m] in reports] + \
                [n for n in reports if n.startswith("Combine")]
        out = [reports[n] for n in order]
        write_metrics_csv(out, self.out / f"metrics_{split}.csv")
        if attention:
            np.savez(self.out / f"attention_{split}.npz", roster=np.array([e.expert_id for e in experts]),
                     **attention)
        if inference_timing and split == "internal":
            self._inference_timing(experts, fusions, others)
        return out

    def _inference_timing(self, experts, fusions, others, repeats: int = 3) -> dict:
        """Per-example inference seconds on the internal test images (run at each site)."""
        result = {}
        oracle = others.get(BASELINE_LABELS[BaselineKind.COMBINE_RETRAIN])
        single = oracle[0] if oracle else experts[0]

        def timed(fn):
            def run(images):
                best = np.inf
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    fn(images)
                    best = min(best, time.perf_counter() - t0)
                return np.array([best, len(images)])
            return run

        def fused(fm, parallel):
            def fn(images):
                if parallel:
                    with ThreadPoolExecutor(len(experts)) as pool:
                        outs = list(pool.map(lambda e: e.features_and_taps(images), experts))
                else:
                    outs = [e.features_and_taps(images) for e in experts]
                from .nmd import channel_means, nmd_from_means
                h = np.stack([o[0] for o in outs], axis=1)
                g = np.stack([nmd_from_means(e, channel_means(o[1])) for e, o in zip(experts, outs)], axis=1)
                return fm.predict_features(h, g if fm.mode == "nmd" else None)
            return fn

        candidates = {"single": single.predict}
        for m, fm in fusions.items():
            candidates[f"{m}_sequential"] = fused(fm, False)
            candidates[f"{m}_parallel"] = fused(fm, True)
        for name, fn in candidates.items():
            tot, n = 0.0, 0
            for sid in self.internal_ids:
                (sec_n), _ = self.vault(sid).evaluate(timed(fn))
                tot += sec_n[0]
                n += int(sec_n[1])
            result[name] = tot / n
        (self.out / "inference.json").write_text(json.dumps(result, indent=2))
        return result


class PersistentVault(SiteVault):
    """A vault whose received model blobs live in its own on-disk storage."""

    def __init__(self, site, splits, log, image_size, storage: Path):
        super().__init__(site, splits, log, image_size)
        self.storage = storage
        if storage.exists():
            for f in sorted(storage.glob("*.efw")):
                self._models[f.stem] = f.read_bytes()

    def has(self, expert_id: str) -> bool:
        return expert_id in self._models

    def _persist(self) -> None:
        self.storage.mkdir(parents=True, exist_ok=True)
        for eid, blob in self._models.items():
            (self.storage / f"{eid}.efw").write_bytes(blob)

    def receive(self, blobs, step):
        super().receive(blobs, step)
        self._persist()

    def _send_model(self, blob, step, seconds):
        self._persist()
        return super()._send_model(blob, step, seconds)



def save_classifier(model: Classifier, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    arrays = serialize.state_dict(model.named_parameters())
    arrays["meta.classes"] = np.asarray(model.classes, dtype=np.float64)
    serialize.save(directory / "model.efw", arrays)
    (directory / "model.json").write_text(json.dumps(
        {"classes": model.classes, "image_size": model.encoder.input_shape[1],
         "training": [lg.to_dict() for lg in model.logs]}, indent=2))


def load_classifier(directory: Path) -> Classifier:
    arrays = serialize.load(directory / "model.efw")
    meta = json.loads((directory / "model.json").read_text())
    classes = [int(c) for c in arrays.pop("meta.classes")]
    k = arrays["head.weight"].shape[0]
    size = meta["image_size"]
    model = Classifier(make_encoder(np.random.default_rng(0), size, k), nn.Dense(k, len(classes), name="head"),
                       classes)
    serialize.load_state_dict(model.named_parameters(), arrays)
    model.logs = [TrainLog(**lg) for lg in meta["training"]]
    return model


def run_incremental_pipeline(out: str | Path, cfg: RunConfig | None = None, seed: int | None = None,
                             baselines: bool = True, evaluate: bool = True) -> Path:
    """Generate data, then base -> (remote fine-tune, bundles, fusion) per step, plus baselines."""
    run = Run(out, cfg)
    run.gen_data(seed)
    run.train_base()
    if baselines:
        run.run_oracle(0)
    for step in range(1, run.n_steps + 1):
        run.step(step)
        for mode in run.cfg.modes:
            run.train_fusion(mode, step)
        if baselines:
            run.run_oracle(step)
    if baselines:
        run.run_naive("constant")
        run.run_naive("expand")
    if evaluate:
        run.evaluate("internal")
        run.evaluate("external", inference_timing=False)
    return run.out
