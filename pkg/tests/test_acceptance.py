"""Acceptance criteria on the default scenario (seed 7).

Each test records one PASS/FAIL line that the terminal summary prints, then
asserts. The full pipeline runs twice (criterion 12), which dominates runtime.
"""
from pathlib import Path

import numpy as np
import pytest

from weighted_experts import nn
from weighted_experts import data as data_mod
from weighted_experts import multisite as multisite_mod
from weighted_experts import pipeline as pipeline_mod
from weighted_experts.baselines import (
    confidence_route_predict, max_logit_predict, msp_predict,
)
from weighted_experts.bundle import FeatureBundle, merge
from weighted_experts.config import RunConfig, TrainConfig
from weighted_experts.experts import Expert, make_encoder
from weighted_experts.fusion import FusionModel, knowledge_pool, pooling_map, train_fusion
from weighted_experts.metrics import read_metrics_csv
from weighted_experts.multisite import SiteVault, TransferLog
from weighted_experts.nn import serialize, softmax_array
from weighted_experts.pipeline import Run, run_incremental_pipeline
from weighted_experts.reports import efficiency_report, entropy

from conftest import ACCEPTANCE
from test_nn import LAYER_CASES, check_layer_gradients, finite_diff, rel_err

SEED = 7


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory) -> Path:
    return run_incremental_pipeline(tmp_path_factory.mktemp("accept_a"), RunConfig(), seed=SEED)


@pytest.fixture(scope="module")
def run(run_dir) -> Run:
    return Run(run_dir)


@pytest.fixture(scope="module")
def internal(run_dir):
    return read_metrics_csv(run_dir / "metrics_internal.csv")


@pytest.fixture(scope="module")
def attention(run_dir):
    with np.load(run_dir / "attention_internal.npz") as z:
        return {k: z[k] for k in z.files}


def avg(table, method):
    return table[method]["Average"][0]


# ---------------------------------------------------------------- 1, 2: math core


def _fusion_gradient_error(mode: str) -> float:
    """Central differences on every trainable fusion parameter (cross blocks and attention)."""
    rng = np.random.default_rng(3)
    experts = []
    for j, classes in enumerate([[0, 1], [1, 2, 3]]):
        r = np.random.default_rng(j)
        e = Expert(f"e{j}", make_encoder(r, 16, 4), nn.Dense(4, len(classes), r, name="head"), classes)
        e.ref_mean = r.random(24)
        experts.append(e)
    model = FusionModel(experts, mode, hidden=6, seed=0)
    h, g = rng.standard_normal((5, 2, 4)), rng.standard_normal((5, 2, 24))
    g_in = g if mode == "nmd" else None
    if mode != "sf":
        model.fit_input_scaling(model.attention_input(h, g_in))
    for p in model.trainable_parameters():
        p.data = 0.5 * rng.standard_normal(p.data.shape)
    y = rng.integers(0, len(model.classes), 5)

    def loss_value():
        return float(nn.cross_entropy(model.forward(h, g_in)[0], y).data)

    params = model.trainable_parameters()
    nn.zero_grad(params)
    with nn.Tape() as tape:
        loss = nn.cross_entropy(model.forward(h, g_in)[0], y)
    nn.backward(tape, loss)
    return max(rel_err(p.grad, finite_diff(loss_value, p.data)) for p in params)


def test_01_gradient_correctness():
    worst = {}
    for case, (build, shape, n_classes) in sorted(LAYER_CASES.items()):
        rng = np.random.default_rng(0)
        net = build(rng)
        for p in net.parameters():
            if p.name.endswith("bias"):
                p.data = rng.normal(scale=0.1, size=p.data.shape)
        worst[case] = check_layer_gradients(net, rng.normal(size=shape), n_classes)
    for mode in ("sf", "attn", "nmd"):
        worst[f"fusion_{mode}"] = _fusion_gradient_error(mode)
    top = max(worst.values())
    record(1, top < 1e-4, f"max relative gradient error {top:.2e} (< 1e-4) over {sorted(worst)}")


def _brute_scores(scores, label_sets):
    out = []
    for i in range(len(scores[0])):
        best = {}
        for s, labels in zip(scores, label_sets):
            for j, c in enumerate(labels):
                best[c] = max(best.get(c, -np.inf), s[i, j])
        top = max(best.values())
        out.append(min(c for c, v in best.items() if v == top))
    return np.array(out)


def _brute_route(logits, label_sets):
    out = []
    for i in range(len(logits[0])):
        conf = [softmax_array(z[i:i + 1])[0] for z in logits]
        winner = max(range(len(conf)), key=lambda d: (conf[d].max(), -d))
        out.append(label_sets[winner][int(np.argmax(conf[winner]))])
    return np.array(out)


def test_02_pooler_and_baselines_exact():
    rng = np.random.default_rng(SEED)
    n_pool = 0
    for _ in range(1000):
        sets = [sorted(rng.choice(15, rng.integers(1, 9), replace=False)) for _ in range(rng.integers(1, 5))]
        classes, segs = pooling_map(sets)
        z = rng.standard_normal(sum(len(s) for s in sets))
        flat = [c for s in sets for c in s]
        want = [max(z[i] for i, c in enumerate(flat) if c == cls) for cls in classes]
        n_pool += knowledge_pool(z, segs).tolist() == want
    # real experts on random images: 50 configurations x 20 images = 1000 instances
    n_base = {"max_logit": 0, "msp": 0, "routing": 0}
    for t in range(50):
        d = int(rng.integers(1, 5))
        experts = []
        for j in range(d):
            labels = sorted(rng.choice(15, rng.integers(1, 9), replace=False).tolist())
            r = np.random.default_rng([SEED, t, j])
            experts.append(Expert(f"e{j}", make_encoder(r, 16, 8), nn.Dense(8, len(labels), r, name="head"), labels))
        x = rng.random((20, 16, 16))
        logits = [e.local_logits(x) for e in experts]
        sets = [e.classes for e in experts]
        n_base["max_logit"] += int(np.sum(max_logit_predict(experts, x) == _brute_scores(logits, sets)))
        probs = [softmax_array(z) for z in logits]
        n_base["msp"] += int(np.sum(msp_predict(experts, x) == _brute_scores(probs, sets)))
        n_base["routing"] += int(np.sum(confidence_route_predict(experts, x) == _brute_route(logits, sets)))
    ok = n_pool == 1000 and all(v == 1000 for v in n_base.values())
    record(2, ok, f"pooler {n_pool}/1000, " + ", ".join(f"{k} {v}/1000" for k, v in n_base.items()))


# ---------------------------------------------------------------- 3, 4: reductions


def test_03_single_expert_fusion_reduces_to_expert(run, run_dir):
    base = run.experts(0)
    cfg = TrainConfig(fusion_epochs=2, seed=SEED)
    tr, va = run.load_bundles(0, "train"), run.load_bundles(0, "val")
    mismatches, total = 0, 0
    for mode in ("sf", "attn", "nmd"):
        model = train_fusion(tr, va, base, mode, cfg)
        for sid in run.internal_ids:
            h, g, _ = run.vault(sid).test_vectors(base)
            direct, _ = run.vault(sid).evaluate(base[0].predict)
            pred, _, _ = model.predict_features(h, g if mode == "nmd" else None)
            mismatches += int(np.sum(pred != direct))
            total += len(pred)
    record(3, mismatches == 0, f"{mismatches} mismatches over {total} (mode, test input) pairs")


def test_04_uniform_attention_equals_sf(run):
    model = run.fusion("attn")
    experts = model.experts
    mismatches, total = 0, 0
    for sid in run.internal_ids + run.external_ids:
        h, g, _ = run.vault(sid).test_vectors(experts)
        uniform, _, _ = model.predict_features(h, force_uniform=True)
        sf, _, _ = model.with_mode("sf").predict_features(h)
        mismatches += int(np.sum(uniform != sf))
        total += len(sf)
    record(4, mismatches == 0, f"{mismatches} mismatches over {total} test inputs")


# ---------------------------------------------------------------- 5-7: accuracy orderings


def test_05_catastrophic_forgetting(run, internal):
    base, final = run.internal_ids[0], run.internal_ids[-1]
    chance = 100.0 / len(run.corpus.site(base).label_set)
    rows = internal["Fine-Tuning (Constant)"]
    expand = internal["Fine-Tuning (Expand)"]
    ok = rows[base][0] < 2 * chance and rows[final][0] > 85.0
    record(5, ok, f"constant head: {base} {rows[base][0]:.1f} (< {2 * chance:.1f}), {final} {rows[final][0]:.1f} "
                  f"(> 85); expand head: {base} {expand[base][0]:.1f}, {final} {expand[final][0]:.1f}")


def test_06_method_ordering(internal):
    sf, attn, nmd = avg(internal, "SF"), avg(internal, "attn-wSF"), avg(internal, "nmd-wSF")
    conf = max(avg(internal, m) for m in ("Max Logit", "MSP", "Confidence Routing"))
    ok = attn >= sf and nmd >= sf and sf - conf >= 5.0
    record(6, ok, f"SF {sf:.2f}, attn-wSF {attn:.2f}, nmd-wSF {nmd:.2f} (both >= SF); "
                  f"best confidence baseline {conf:.2f} (SF margin {sf - conf:.2f} >= 5)")


def test_07_oracle_near_parity(internal):
    best = max(avg(internal, "attn-wSF"), avg(internal, "nmd-wSF"))
    oracle = avg(internal, "Combine & Retrain (oracle)")
    record(7, abs(best - oracle) <= 3.0, f"best wSF {best:.2f} vs combine-and-retrain {oracle:.2f} "
                                         f"(|diff| {abs(best - oracle):.2f} <= 3)")


# ---------------------------------------------------------------- 8, 9: attention


def _transparency(attention, roster, mode):
    return {sid: 100.0 * float(np.mean(attention[f"{mode}/{sid}"].argmax(axis=1) == i))
            for i, sid in enumerate(roster)}


def test_08_transparency(run, attention):
    roster = run.internal_ids
    nmd = _transparency(attention, roster, "nmd")
    attn = _transparency(attention, roster, "attn")
    ok = all(v >= 80.0 for v in nmd.values())
    record(8, ok, "nmd-wSF argmax A = own expert: " + ", ".join(f"{k} {v:.1f}%" for k, v in nmd.items())
           + " (each >= 80); attn-wSF: " + ", ".join(f"{k} {v:.1f}%" for k, v in attn.items()))


def test_09_attention_saturation(run, attention):
    ent = {m: float(np.mean([entropy(attention[f"{m}/{sid}"]).mean() for sid in run.internal_ids]))
           for m in ("attn", "nmd")}
    record(9, ent["nmd"] < ent["attn"], f"mean entropy of A: nmd-wSF {ent['nmd']:.4f} < attn-wSF {ent['attn']:.4f}")


# ---------------------------------------------------------------- 10, 11: efficiency and protocol


def test_10_efficiency_trend(run_dir):
    res = efficiency_report([run_dir])
    curves = res["training"][run_dir.name]
    oracle = {s: tot for s, _, tot in curves["combine_retrain"]}
    bad = []
    for method, rows in curves.items():
        if method.startswith("pipeline_"):
            bad += [(method, s) for s, _, tot in rows if s >= 2 and not tot < oracle[s]]
    csv_methods = {line.split(",")[1] for line in
                   (run_dir / "reports" / "training_time.csv").read_text().splitlines()[1:]}
    ok = not bad and "combine_retrain" in csv_methods and any(m.startswith("pipeline_") for m in csv_methods)
    last = max(oracle)
    detail = ", ".join(f"{m} {rows[-1][2]:.1f}s" for m, rows in curves.items())
    record(10, ok, f"cumulative training at step {last}: {detail}; violations from step 2: {bad or 'none'}")


def test_11_protocol_integrity(run, run_dir, monkeypatch):
    log = TransferLog.read_csv(run_dir / "transfer_log.csv")
    kinds = {r.kind for r in log.records}
    files = sorted((run_dir / "bundles").rglob("*.efb"))
    exact = sum(FeatureBundle.from_bytes(f.read_bytes()).to_bytes() == f.read_bytes() for f in files)
    # retrain every final fusion model with pixel access disabled; weights must match the saved ones
    step = run.n_steps
    roster = run.roster(step)
    experts = run.experts(step)
    cfg = run.cfg.train
    bdir = run_dir / "bundles" / f"step{step}"
    tr = merge([FeatureBundle.load(bdir / f"{s}_train.efb") for s in roster], roster)
    va = merge([FeatureBundle.load(bdir / f"{s}_val.efb") for s in roster], roster)

    def no_pixels(*a, **k):
        raise AssertionError("fusion training touched site data")

    for name in ("generate_scenario", "load_corpus", "augment_batch", "render"):
        monkeypatch.setattr(data_mod, name, no_pixels)
    monkeypatch.setattr(multisite_mod, "augment_batch", no_pixels)
    monkeypatch.setattr(pipeline_mod, "load_corpus", no_pixels)
    monkeypatch.setattr(pipeline_mod, "generate_scenario", no_pixels)
    for name in ("evaluate", "export_feature_bundle", "test_vectors"):
        monkeypatch.setattr(SiteVault, name, no_pixels)
    same = []
    for mode in run.cfg.modes:
        model = train_fusion(tr, va, experts, mode, cfg)
        saved = serialize.load(run_dir / "fusion" / f"step{step}" / mode / "fusion.efw")
        fresh = serialize.state_dict(model.named_trainable())
        same.append(saved.keys() == fresh.keys() and all(np.array_equal(saved[k], fresh[k]) for k in saved))
    with pytest.raises(TypeError):
        train_fusion(tr.h, va.h, experts, "sf", cfg)
    ok = kinds <= {"model", "bundle"} and exact == len(files) and all(same)
    record(11, ok, f"log kinds {sorted(kinds)}, {len(log.records)} transfers; {exact}/{len(files)} bundles "
                   f"round-trip bit-exactly; fusion re-trained from bundles alone matches saved weights: "
                   f"{dict(zip(run.cfg.modes, same))}")


# ---------------------------------------------------------------- 12: determinism


def test_12_determinism(run_dir, tmp_path_factory):
    other = run_incremental_pipeline(tmp_path_factory.mktemp("accept_b"), RunConfig(), seed=SEED)
    diffs = []
    for name in ("metrics_internal.csv", "metrics_external.csv"):
        if (run_dir / name).read_bytes() != (other / name).read_bytes():
            diffs.append(name)
    with np.load(run_dir / "attention_internal.npz") as a, np.load(other / "attention_internal.npz") as b:
        if a.files != b.files or any(not np.array_equal(a[k], b[k]) for k in a.files):
            diffs.append("attention_internal.npz")
    for f in sorted((run_dir / "experts").glob("*.efw")) + sorted((run_dir / "fusion").rglob("*.efw")) \
            + sorted((run_dir / "bundles").rglob("*.efb")):
        if f.read_bytes() != (other / f.relative_to(run_dir)).read_bytes():
            diffs.append(str(f.relative_to(run_dir)))
    la = [(r.step, r.direction, r.kind, r.site, r.bytes) for r in TransferLog.read_csv(run_dir / "transfer_log.csv").records]
    lb = [(r.step, r.direction, r.kind, r.site, r.bytes) for r in TransferLog.read_csv(other / "transfer_log.csv").records]
    if la != lb:
        diffs.append("transfer_log.csv (sizes)")
    record(12, not diffs, "re-run reproduces metrics, attention scores, weights, bundles and transfer sizes"
           if not diffs else f"differences: {diffs}")
