"""Acceptance suite: one test per criterion, each recording a PASS/FAIL verdict.

Verdicts are collected by ``conftest.record_criterion`` and printed as one
line per criterion at the end of the pytest run. Every test also asserts,
so a failing criterion shows up as a failing test.

The two comparative criteria (3 and 4) train many networks on a 5,000-row
synthetic set and dominate the runtime (roughly 20 minutes on one core).
Their budgets are fixed constants below and are not tuned per run.
"""

from fractions import Fraction
import json
import time

import numpy as np
import pytest

from comfortmtl.baselines import KNNClassifier, STLNetworkClassifier
from comfortmtl.cli import main
from comfortmtl.evaluation import (
    DEFAULT_SLICE_AXES,
    cross_validate,
    grid_search,
    make_spec,
    slice_from_predictions,
)
from comfortmtl.ingest import encode, fit_encoder, generate_synthetic, kfold_split
from comfortmtl.metrics import ConfusionMatrix, f1_score, macro_metrics
from comfortmtl.mtl import (
    Hyperparams,
    ModelFileError,
    fit_mtl,
    init_network,
    load_model,
    predict_records,
    save_model,
    train,
)
from comfortmtl.nn import dropout_apply, finite_diff_check, softmax

from conftest import record_criterion, toy_network

# Comparative experiment budget, fixed before any run.
N_ROWS = 5000
DATA_SEED = 2024
CV_SEED = 11
EPOCHS = 150
BASELINES = ("dnn", "svm", "rf", "dt", "knn", "adaboost")
# Held-out rows for the slice check: about 6,700 per time slot, so binomial
# noise in a per-slice accuracy stays near 0.6 pp against the 5 pp band.
SLICE_EVAL_ROWS = 40_000


@pytest.fixture(scope="module")
def synthetic_5000():
    return generate_synthetic(N_ROWS, DATA_SEED)


def _stopwatch():
    start = time.perf_counter()
    return lambda: time.perf_counter() - start


# ------------------------------------------------------------------ 1

def test_criterion_01_gradient_check(small_encoded):
    elapsed = _stopwatch()
    worst = 0.0
    ok = True
    rng = np.random.default_rng(0)
    for seed in range(20):
        # a single softmax layer over 6 inputs, every entry checked
        net = toy_network(6, class_counts=(4,), seed=seed, dropout_rate=0.0)
        x = rng.normal(size=(8, 6))
        y = {"T0": rng.integers(0, 4, 8)}
        res = finite_diff_check(net, x, y, h=1e-5, tolerance=1e-4)
        ok &= res.passed
        worst = max(worst, res.worst_relative_error)
    enc, data = small_encoded
    for seed in range(20):
        net = init_network(enc.schema, enc, Hyperparams(dropout_rate=0.0, seed=seed))
        rows = np.random.default_rng(seed).choice(len(data.X), 16, replace=False)
        y = {t: data.y[t][rows] for t in data.y}
        res = finite_diff_check(net, data.X[rows], y, h=1e-5, tolerance=1e-4, max_entries=2000, seed=seed)
        ok &= res.passed
        worst = max(worst, res.worst_relative_error)
    t = elapsed()
    ok &= t < 60
    record_criterion(1, "gradient check", ok, f"worst relative error {worst:.2e}, {t:.1f}s")
    assert ok


# ------------------------------------------------------------------ 2

def test_criterion_02_single_task_ablation_identity():
    elapsed = _stopwatch()
    train_ds = generate_synthetic(800, 3)
    eval_ds = generate_synthetic(400, 4)
    enc = fit_encoder(train_ds)
    data = encode(enc, train_ds)
    hp = Hyperparams(epochs=10, seed=17)
    mtl = init_network(train_ds.schema, enc, hp.replace(loss_weights={"TSV": 1.0, "TPV": 0.0, "TCV": 0.0}))
    train(mtl, data)
    stl = STLNetworkClassifier(hp).fit_encoded(enc, data, "TSV")
    X = enc.encode_matrix(eval_ds.records)
    a = mtl.predict_indices(X)["TSV"]
    b = stl.predict(X)
    same = int(np.sum(a == b))
    t = elapsed()
    ok = same == len(a) and t < 60
    record_criterion(2, "MTL (1,0,0) equals single-task DNN", ok, f"{same}/{len(a)} rows identical, {t:.1f}s")
    assert ok


# ------------------------------------------------------------------ 3

def test_criterion_03_mtl_beats_single_task_baselines(synthetic_5000):
    elapsed = _stopwatch()
    hp = Hyperparams(epochs=EPOCHS)
    reports = {name: cross_validate(make_spec(name, hp), synthetic_5000, 5, CV_SEED)
               for name in ("mtl",) + BASELINES}
    t = elapsed()
    mtl = reports["mtl"]
    tasks = mtl.tasks
    lines = []
    ok = True
    for name in BASELINES:
        r = reports[name]
        wins = sum(mtl.macro_f1(task) >= r.macro_f1(task) for task in tasks)
        beat = mtl.objective() > r.objective()
        ok &= wins >= 2 and beat
        lines.append(f"{name} {wins}/3 obj {r.objective():.4f}")
    ok &= t < 15 * 60
    scores = " ".join(f"{task}={mtl.macro_f1(task):.4f}" for task in tasks)
    print("\n" + "\n".join(
        f"{r.name:15s} " + " ".join(f"{task}={r.macro_f1(task):.4f}" for task in tasks)
        + f" obj={r.objective():.4f}" for r in reports.values()))
    record_criterion(3, "MTL vs single-task baselines", ok,
                     f"MTL {scores} obj {mtl.objective():.4f}; " + "; ".join(lines) + f"; {t:.0f}s")
    assert ok


# ------------------------------------------------------------------ 4

def test_criterion_04_learning_rate_sweep(synthetic_5000):
    elapsed = _stopwatch()
    rates = [0.1, 0.01, 0.001, 0.0001]
    res = grid_search({"learning_rate": rates}, synthetic_5000, 5, CV_SEED, base=Hyperparams(epochs=EPOCHS))
    t = elapsed()
    by_rate = {c.params["learning_rate"]: c for c in res.cells}
    best = res.best.params["learning_rate"]
    big = by_rate[0.1]
    if big.ok:
        others = [by_rate[r].score for r in rates[1:] if by_rate[r].ok]
        big_ok = all(big.score < s for s in others)
    else:
        big_ok = True
    ok = best in (0.01, 0.001) and big_ok and t < 30 * 60
    scores = ", ".join(f"{r}: {'diverged' if not by_rate[r].ok else f'{by_rate[r].score:.4f}'}" for r in rates)
    record_criterion(4, "learning-rate sweep", ok, f"best {best}; {scores}; {t:.0f}s")
    assert ok


# ------------------------------------------------------------------ 5

def _fraction_oracle(counts):
    K = len(counts)
    P, R, F = [], [], []
    for c in range(K):
        tp = counts[c][c]
        pred_c = sum(counts[r][c] for r in range(K))
        true_c = sum(counts[c])
        p = Fraction(tp, pred_c) if pred_c else Fraction(0)
        r = Fraction(tp, true_c) if true_c else Fraction(0)
        P.append(p)
        R.append(r)
        F.append(2 * p * r / (p + r) if p + r else Fraction(0))
    return [float(sum(v) / K) for v in (P, R, F)]


def test_criterion_05_metric_oracle():
    elapsed = _stopwatch()
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(1000):
        K = int(rng.integers(2, 8))
        counts = rng.integers(0, 30, size=(K, K))
        counts[rng.random((K, K)) < 0.2] = 0
        m = macro_metrics(ConfusionMatrix("T", counts))
        want = _fraction_oracle(counts.tolist())
        got = [m.macro_precision, m.macro_recall, m.macro_f1]
        if not np.allclose(got, want, rtol=1e-12, atol=1e-15):
            mismatches += 1
    exact = f1_score(0.9, 0.9) == 0.9 and f1_score(1.0, 0.5) == 2 / 3
    t = elapsed()
    ok = mismatches == 0 and exact and t < 60
    record_criterion(5, "metric oracle", ok, f"{mismatches} mismatches in 1000 matrices, exact F1 {exact}, {t:.1f}s")
    assert ok


# ------------------------------------------------------------------ 6

def _brute_knn(X, y, q, k, n_classes):
    dists = sorted((sum((a - b) ** 2 for a, b in zip(row, q)), i) for i, row in enumerate(X))
    votes = [0] * n_classes
    for _, i in dists[:k]:
        votes[y[i]] += 1
    return votes.index(max(votes))


def test_criterion_06_knn_oracle():
    elapsed = _stopwatch()
    ds = generate_synthetic(400, 6)
    enc = fit_encoder(ds)
    data = encode(enc, ds)
    X, y = data.X[:200], data.y["TSV"][:200]
    Q = data.X[200:]
    rng = np.random.default_rng(6)
    Xg = rng.integers(-2, 3, size=(200, 3)).astype(float)  # many exact distance ties
    yg = rng.integers(0, 4, 200)
    Qg = rng.integers(-2, 3, size=(100, 3)).astype(float)
    bad = 0
    for k in (1, 3, 5):
        got = KNNClassifier(k).fit(X, y, 7).predict(Q).tolist()
        bad += sum(g != _brute_knn(X.tolist(), y.tolist(), q, k, 7) for g, q in zip(got, Q.tolist()))
        got = KNNClassifier(k).fit(Xg, yg, 4).predict(Qg).tolist()
        bad += sum(g != _brute_knn(Xg.tolist(), yg.tolist(), q, k, 4) for g, q in zip(got, Qg.tolist()))
    t = elapsed()
    ok = bad == 0 and t < 60
    record_criterion(6, "KNN oracle", ok, f"{bad} disagreements over k=1,3,5, {t:.1f}s")
    assert ok


# ------------------------------------------------------------------ 7

def test_criterion_07_cv_partition():
    elapsed = _stopwatch()
    ok = True
    for n in (11, 100, 2039):
        plan = kfold_split(n, 5, seed=n)
        seen = np.concatenate([plan.validation(f) for f in range(5)])
        ok &= sorted(seen.tolist()) == list(range(n))
        sizes = plan.sizes()
        ok &= max(sizes) - min(sizes) <= 1
        if n == 2039:
            ok &= sizes == [408, 408, 408, 408, 407]
    t = elapsed()
    ok &= t < 1
    record_criterion(7, "CV partition", ok, f"{t * 1000:.0f} ms")
    assert ok


# ------------------------------------------------------------------ 8

def test_criterion_08_persistence(tmp_path):
    elapsed = _stopwatch()
    ds = generate_synthetic(300, 8)
    enc = fit_encoder(ds)
    net, _ = fit_mtl(enc, encode(enc, ds), Hyperparams(epochs=3, seed=8), ds.schema)
    path = tmp_path / "model.json"
    save_model(net, path)
    loaded = load_model(path)
    records = generate_synthetic(100, 9).records
    before = predict_records(net, records)
    after = predict_records(loaded, records)
    exact = all(a[t].value == b[t].value and np.array_equal(a[t].probs, b[t].probs)
                for a, b in zip(before, after) for t in a)
    doc = json.loads(path.read_text())
    doc["checksum"] = "0" * len(doc["checksum"])
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    try:
        load_model(bad)
        rejected = False
    except ModelFileError:
        rejected = True
    t = elapsed()
    ok = exact and rejected and t < 60
    record_criterion(8, "persistence round trip", ok, f"bit-exact {exact}, bad checksum rejected {rejected}, {t:.1f}s")
    assert ok


# ------------------------------------------------------------------ 9

def test_criterion_09_determinism(tmp_path):
    elapsed = _stopwatch()
    cfg = {"seed": 9, "out": str(tmp_path), "hyperparams": {"epochs": 20},
           "synth": {"n": 1000, "seed": 9, "spec": None, "illogical": None}}
    (tmp_path / "config.json").write_text(json.dumps(cfg))
    conf = str(tmp_path / "config.json")
    csvs, models = [], []
    for i in range(2):
        path = tmp_path / f"s{i}.csv"
        assert main(["synth", "--config", conf, "--output", str(path)]) == 0
        csvs.append(path.read_bytes())
    for i in range(2):
        out = tmp_path / f"run{i}"
        assert main(["train", "--config", conf, "--data", str(tmp_path / "s0.csv"), "--out", str(out)]) == 0
        models.append((out / "model.json").read_bytes())
    t = elapsed()
    ok = csvs[0] == csvs[1] and models[0] == models[1] and t < 300
    record_criterion(9, "determinism", ok, f"CSV identical {csvs[0] == csvs[1]}, "
                     f"model identical {models[0] == models[1]}, {t:.1f}s")
    assert ok


# ------------------------------------------------------------------ 10

def test_criterion_10_slice_consistency():
    elapsed = _stopwatch()
    train_ds = generate_synthetic(N_ROWS, 101)
    eval_ds = generate_synthetic(SLICE_EVAL_ROWS, 102)
    enc = fit_encoder(train_ds)
    net, _ = fit_mtl(enc, encode(enc, train_ds), Hyperparams(epochs=EPOCHS, seed=10), train_ds.schema)
    pred = net.predict_indices(enc.encode_matrix(eval_ds.records))
    worst = (0.0, "", "")
    for axis in DEFAULT_SLICE_AXES:
        rep = slice_from_predictions(eval_ds, axis, pred)
        for task in rep.tasks:
            dev = rep.max_deviation(task)
            if dev > worst[0]:
                worst = (dev, axis, task)
    t = elapsed()
    ok = worst[0] <= 0.05 and t < 600
    record_criterion(10, "slice consistency", ok,
                     f"largest deviation {100 * worst[0]:.2f} pp ({worst[1]}, {worst[2]}), {t:.0f}s")
    assert ok


# ------------------------------------------------------------------ 11

def test_criterion_11_softmax_dropout_invariants():
    elapsed = _stopwatch()
    rng = np.random.default_rng(11)
    v = rng.normal(scale=5.0, size=(500, 7))
    shifts = rng.normal(scale=50.0, size=(500, 1))
    p = softmax(v)
    shift_err = float(np.max(np.abs(softmax(v + shifts) - p)))
    sum_err = float(np.max(np.abs(p.sum(axis=1) - 1.0)))
    dropped = dropout_apply(np.ones(100_000), 0.2, np.random.default_rng(12), training=True)
    mean_err = abs(float(dropped.mean()) - 1.0)
    t = elapsed()
    ok = shift_err <= 1e-12 and sum_err <= 1e-12 and mean_err <= 0.02 and t < 60
    record_criterion(11, "softmax and dropout invariants", ok,
                     f"shift {shift_err:.1e}, sum {sum_err:.1e}, dropout mean off by {mean_err:.4f}")
    assert ok
