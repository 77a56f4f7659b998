"""One test per acceptance criterion, each at its stated tolerance.

Every test records a PASS/FAIL line that is printed in the terminal summary.
Directional criteria train tiny models on synthetic data; learning rates are
3e-4 (encoder) / 1e-3 (other), the same 0.3 ratio as the TrainConfig defaults.
"""
import functools
import json
import math
import time
import warnings

import numpy as np
import pytest

import conftest
from conftest import TINY, check_grad, model_grad_errors
from test_explain import dense_oracle, explained_trace, record
from test_metrics import brute_force, random_case
from test_model import batch, permuted
from vitatt import cli
from vitatt import tensor as T
from vitatt.data import SynthSpec, correlation_ranking, encode_batch, generate_synthetic, select_metadata, stratified_split
from vitatt.explain import explain_samples, relevancy_matrix, relevancy_propagate
from vitatt.metrics import accuracy, compute_metrics
from vitatt.model import ForwardTrace, ModelConfig, VitAttParams, forward, fuse
from vitatt.project import collect_embeddings, separation_score, tsne_3d
from vitatt.tensor import BatchNormState, Tensor
from vitatt.train import TrainConfig, WeightedSampler, class_weights, evaluate, predict_proba, train

pytestmark = pytest.mark.slow

REPS = 5
DESK = dict(lr_encoder=3e-4, lr_other=1e-3)


def report(num, ok, detail):
    conftest.ACCEPTANCE.append((num, bool(ok), detail))
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def model_for(ds, schema, seed, image_only=False):
    cfg = ModelConfig(**{**TINY, "num_metadata_slots": max(schema.num_slots, 1), "num_classes": len(ds.class_names),
                         "metadata_width": schema.slot_width, "image_only": image_only})
    return VitAttParams.init(cfg, seed)


def fit(ds, schema, seed, epochs, image_only=False, ratios=(0.5, 0.15, 0.35)):
    tr, va, te = stratified_split(ds.samples, ratios, seed)
    params = model_for(ds, schema, seed, image_only)
    result = train(params, tr, va, schema, TrainConfig(epochs=epochs, seed=seed, **DESK))
    return result.best, (tr, va, te)


def fusion_dataset(seed):
    return generate_synthetic(SynthSpec(num_classes=4, samples_per_class=40, noise_fields=3,
                                        fusion_necessity=True, seed=seed))[0]


def planted_dataset(seed):
    return generate_synthetic(SynthSpec(num_classes=3, samples_per_class=50, informative_fields=5,
                                        noise_fields=5, image_signal=False, seed=seed))


@functools.lru_cache(maxsize=None)
def fusion_run(rep, image_only):
    ds = fusion_dataset(100 + rep)
    return ds, *fit(ds, ds.schema, rep, 80, image_only)


@functools.lru_cache(maxsize=None)
def planted_run(rep, mode):
    ds, manifest = planted_dataset(200 + rep)
    tr, _, _ = stratified_split(ds.samples, (0.5, 0.15, 0.35), rep)
    schema = ds.schema if mode == "all" else ds.schema.subset(
        select_metadata(correlation_ranking(tr, ds.schema), mode, 5))
    return ds, manifest, schema, *fit(ds, schema, rep, 60)


# ---------------------------------------------------------------------------- 1

def op_suite():
    r = np.random.default_rng(0)
    w = r.normal(size=(4, 6))
    w8 = r.normal(size=(2, 8))
    bn = BatchNormState(6)
    bn.running_mean[:] = r.normal(size=6)
    bn.running_var[:] = r.uniform(0.5, 2, size=6)
    x, g, b = r.normal(size=(4, 6)), r.normal(size=6), r.normal(size=6)
    pos = r.uniform(0.5, 2.0, size=(4, 6))
    labels = np.array([0, 2, 1, 2])
    cases = {
        "add/sub": (lambda a, c: ((a + c) * (a - c) * w).sum(), [x, r.normal(size=6)]),
        "mul/div": (lambda a, c: (a * c / (c + 3.0) * w).sum(), [x, pos]),
        "exp/log": (lambda a, c: (T.exp(a * 0.5) + T.log(c)).mean(), [x, pos]),
        "matmul": (lambda a, c: ((a @ c) * (a @ c)).sum(), [r.normal(size=(2, 4, 3)), r.normal(size=(3, 5))]),
        "softmax": (lambda a: (T.softmax_rows(a) * w).sum(), [x]),
        "layer_norm": (lambda a, gg, bb: (T.layer_norm(a, gg, bb) * w).sum(), [x, g, b]),
        "gelu": (lambda a: (T.gelu(a * 3) * w).sum(), [x]),
        "swish": (lambda a: (T.swish(a * 3) * w).sum(), [x]),
        "sigmoid": (lambda a: (T.sigmoid(a * 3) * w).sum(), [x]),
        "batch_norm/train": (lambda a, gg, bb: (T.batch_norm(a, gg, bb, bn.copy(), True) * w).sum(), [x, g, b]),
        "batch_norm/eval": (lambda a, gg, bb: (T.batch_norm(a, gg, bb, bn, False) * w).sum(), [x, g, b]),
        "cross_entropy": (lambda a: T.cross_entropy_weighted(a[:, :3], labels, np.array([0.5, 1, 2])), [x]),
        "reshape/transpose/concat/take": (
            lambda a, c: (T.transpose(T.concat([a, c], 0), (1, 0)).reshape(3, 16)[1:, ::2] * w8).sum(),
            [x, r.normal(size=(4, 6))],
        ),
        "mean/sum": (lambda a: (a.sum(axis=1) * a.mean(axis=1)).sum(), [x]),
    }
    return {name: check_grad(f, inputs) for name, (f, inputs) in cases.items()}


def test_acceptance_gradient_suite():
    t0 = time.perf_counter()
    errs = op_suite()
    cfg = ModelConfig(**TINY)
    params = VitAttParams.init(cfg, 0)
    images, meta = batch(cfg, 3, seed=2)
    model_errs = model_grad_errors(params, images, meta, np.array([0, 1, 2]), np.array([1.0, 2.0, 0.5]))
    elapsed = time.perf_counter() - t0
    worst_op = max(errs, key=errs.get)
    worst_param = max(model_errs, key=model_errs.get)
    ok = errs[worst_op] < 1e-4 and model_errs[worst_param] < 1e-4 and elapsed < 60
    report(1, ok, f"ops max {errs[worst_op]:.2e} ({worst_op}); full tiny model ({params.num_parameters()} "
                  f"entries) max {model_errs[worst_param]:.2e} ({worst_param}); {elapsed:.1f}s < 60s")


# ---------------------------------------------------------------------------- 2

def test_acceptance_attention_invariants():
    cfg = ModelConfig(**TINY)
    params = VitAttParams.init(cfg, 3)
    r = np.random.default_rng(1)
    for n, t in params.tensors.items():
        if ".attn.w" in n or "fusion.w" in n:
            t.data = r.normal(size=t.shape) * 0.5  # sharpen the attention away from uniform
    _, trace = forward(params, *batch(cfg, 4, seed=1), record=True)
    row_err = max(float(np.abs(rec.attn.data.sum(-1) - 1).max()) for rec in trace.attentions)
    params["fusion.wo"].data[:] = 0
    params["fusion.bo"].data[:] = 0
    img, meta = r.normal(size=(2, 17, 16)), r.normal(size=(2, 4, 16))
    exact = np.array_equal(fuse(Tensor(img), Tensor(meta), params, 2).data, np.concatenate([img, meta], 1))
    report(2, row_err < 1e-9 and exact,
           f"max |row sum - 1| = {row_err:.1e} over {len(trace.attentions)} layers; zeroed-output fusion identity exact={exact}")


# ---------------------------------------------------------------------------- 3

def test_acceptance_patch_permutation():
    cfg = ModelConfig(**TINY)
    params = VitAttParams.init(cfg, 5)
    params["pos_embed"].data[:] = np.random.default_rng(4).normal(size=(17, 16))
    images, meta = batch(cfg, 4, seed=3)
    base, _ = forward(params, images, meta)
    worst = 0.0
    for s in range(5):
        q, images2 = permuted(params, images, np.random.default_rng(s).permutation(16))
        moved, _ = forward(q, images2, meta)
        worst = max(worst, float(np.abs(moved.data - base.data).max()))
    report(3, worst < 1e-9, f"max |dlogit| over 5 permutations = {worst:.1e}")


# ---------------------------------------------------------------------------- 4

def test_acceptance_overfit():
    ds, _ = generate_synthetic(SynthSpec(num_classes=3, samples_per_class=50, noise_fields=4, seed=0))
    params = model_for(ds, ds.schema, 0)
    t0 = time.perf_counter()
    # the training set doubles as the selection set, so the best snapshot is the best train accuracy
    result = train(params, ds.samples, ds.samples, ds.schema, TrainConfig(epochs=300, seed=0))
    elapsed = time.perf_counter() - t0
    images, meta, labels = encode_batch(ds.samples, ds.schema)
    acc = accuracy(labels, predict_proba(result.best, images, meta))
    first = next((h["epoch"] for h in result.history if h["val_macro_acc"] >= 1 - 2 * 0.02 / 3), None)
    report(4, acc >= 0.98 and elapsed < 300,
           f"train accuracy {acc:.3f} (first >= 0.98 at epoch {first}), default learning rates, {elapsed:.0f}s < 300s")


# ---------------------------------------------------------------------------- 5

def test_acceptance_fusion_benefit():
    wins, gaps = 0, []
    for rep in range(REPS):
        ds, multi, (_, _, te) = fusion_run(rep, False)
        _, vit, _ = fusion_run(rep, True)
        a = evaluate(multi, te, ds.schema).macro["ACC"]
        b = evaluate(vit, te, ds.schema).macro["ACC"]
        gaps.append(f"{a:.3f}/{b:.3f}")
        wins += (a - b) >= 0.05
    report(5, wins >= 4, f"vitatt beats image-only by >= 0.05 macro-ACC in {wins}/{REPS} reps ({', '.join(gaps)})")


# ---------------------------------------------------------------------------- 6

def test_acceptance_metric_oracles():
    r = np.random.default_rng(6)
    worst_auc, hard_ok = 0.0, True
    for _ in range(1000):
        labels, probs = random_case(r)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rep = compute_metrics(labels, probs)
        oracle = brute_force(labels.tolist(), probs.tolist())
        for m in ("ACC", "PRE", "SEN", "SPE"):
            hard_ok &= np.array_equal(rep.per_class[m], oracle[m], equal_nan=True)
        want = np.array(oracle["AUC"])
        got = rep.per_class["AUC"]
        hard_ok &= np.array_equal(np.isnan(got), np.isnan(want))
        ok = ~np.isnan(want)
        if ok.any():
            worst_auc = max(worst_auc, float(np.abs(got[ok] - want[ok]).max()))
    report(6, hard_ok and worst_auc < 1e-9,
           f"1000 sets: ACC/PRE/SEN/SPE exact={hard_ok}; max AUC error {worst_auc:.1e}")


# ---------------------------------------------------------------------------- 7

def test_acceptance_metadata_selection():
    recovered, wins, pairs = 0, 0, []
    for rep in range(REPS):
        ds, manifest, hc_schema, hc, (_, _, te) = planted_run(rep, "HC")
        *_, lc_schema, lc, _ = planted_run(rep, "LC")
        recovered += set(hc_schema.names) == set(manifest["informative"])
        a = evaluate(hc, te, hc_schema).macro["AUC"]
        b = evaluate(lc, te, lc_schema).macro["AUC"]
        pairs.append(f"{a:.3f}/{b:.3f}")
        wins += a > b
    report(7, recovered == REPS and wins >= 4,
           f"HC-5 == planted fields in {recovered}/{REPS}; HC-5 > LC-5 macro-AUC in {wins}/{REPS} ({', '.join(pairs)})")


# ---------------------------------------------------------------------------- 8

def test_acceptance_explainability():
    # (a) zero gradients everywhere
    zeros = ForwardTrace([record(np.full((1, 2, 17, 17), 1 / 17), np.zeros((1, 2, 17, 17)), "encoder"),
                          record(np.full((1, 2, 21, 21), 1 / 21), np.zeros((1, 2, 21, 21)))])
    m = relevancy_propagate(zeros, 0, num_patches=16)
    flat = not m.image_grid.any() and not m.metadata_scores.any()

    # (b) planted slots outrank noise slots on correctly classified test samples
    ds, manifest, schema, params, (_, _, te) = planted_run(0, "all")
    images, meta, labels = encode_batch(te, schema)
    pred = predict_proba(params, images, meta).argmax(1)
    correct = [s for s, p in zip(te, pred) if p == s.label]
    maps = explain_samples(params, correct, schema)
    planted = [schema.index(n) for n in manifest["informative"]]
    noise = [schema.index(n) for n in manifest["noise"]]
    hits = sum(mp.metadata_scores[planted].mean() > mp.metadata_scores[noise].mean() for mp in maps)
    frac = hits / max(len(maps), 1)

    # (c) bitwise agreement with the dense loop oracle
    cfg = ModelConfig(**TINY)
    bitwise = True
    for seed in range(3):
        p = VitAttParams.init(cfg, seed)
        images, meta = batch(cfg, 2, seed=seed)
        trace = explained_trace(p, images, meta, [seed % 3, (seed + 1) % 3])
        bitwise &= all(np.array_equal(relevancy_matrix(trace, i), dense_oracle(trace, i)) for i in range(2))
    report(8, flat and frac >= 0.9 and bitwise,
           f"(a) zero-gradient map flat={flat}; (b) planted > noise in {hits}/{len(maps)} = {frac:.2f} "
           f"correctly classified; (c) bitwise oracle match={bitwise}")


# ---------------------------------------------------------------------------- 9

def test_acceptance_projection():
    wins, pairs, kl_ok = 0, [], True
    for rep in range(REPS):
        ds, params, (_, _, te) = fusion_run(rep, False)
        pre, post = collect_embeddings(params, te, ds.schema)
        scores = []
        for es in (pre, post):
            res = tsne_3d(es, perplexity=10, iters=1000, seed=rep)
            tail = res.kl[500:]
            kl_ok &= int((np.diff(tail) > 0).sum()) <= 5
            scores.append(separation_score(res.coords, es.labels))
        pairs.append(f"{scores[1]:.2f}/{scores[0]:.2f}")
        wins += scores[1] >= scores[0]
    report(9, wins >= 4 and kl_ok,
           f"post >= pre silhouette in {wins}/{REPS} ({', '.join(pairs)}); KL tail non-increasing (<= 5 steps up)={kl_ok}")


# --------------------------------------------------------------------------- 10

def test_acceptance_sampler():
    labels = np.array([0] * 600 + [1] * 250 + [2] * 100 + [3] * 50)
    n = 10_000
    draws = WeightedSampler(labels, class_weights(labels), 10).draw(n)
    freq = np.bincount(labels[draws], minlength=4) / n
    sigma = math.sqrt(0.25 * 0.75 / n)
    dev = float(np.abs(freq - 0.25).max())
    report(10, dev <= 3 * sigma, f"max |freq - 1/4| = {dev:.4f} <= 3 sigma = {3 * sigma:.4f}")


# --------------------------------------------------------------------------- 11

def test_acceptance_determinism(tmp_path):
    (tmp_path / "spec.json").write_text(json.dumps({"num_classes": 3, "samples_per_class": 20,
                                                    "informative_fields": 2, "noise_fields": 2, "seed": 4}))
    assert cli.main(["synth", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "data")]) == 0
    config = {"data": str(tmp_path / "data"), "train": {"epochs": 3}, "seed": 9, "output_dir": str(tmp_path / "run")}
    (tmp_path / "run.json").write_text(json.dumps(config))
    names = ("checkpoint.json", "history.csv")
    outputs = []
    for _ in range(2):
        assert cli.main(["train", "--config", str(tmp_path / "run.json")]) == 0
        outputs.append({f: (tmp_path / "run" / f).read_bytes() for f in names})
    same = {f: outputs[0][f] == outputs[1][f] for f in names}
    report(11, all(same.values()), f"two identical runs, byte-identical: {same}")
