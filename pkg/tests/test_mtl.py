import json

import numpy as np
import pytest

from conftest import toy_network
from comfortmtl.baselines import STLNetworkClassifier
from comfortmtl.ingest import EncodedDataset, encode, fit_encoder, generate_synthetic
from comfortmtl.mtl import (
    DEFAULT_TRUNK,
    Hyperparams,
    ModelFileError,
    PredictError,
    dumps_model,
    fit_mtl,
    init_network,
    joint_loss,
    load_model,
    loads_model,
    model_checksum,
    predict,
    predict_records,
    record_from_mapping,
    save_model,
    train,
    trunk_for_depth,
)
from comfortmtl.schema import SurveyRecord


@pytest.fixture(scope="module")
def trained(small_encoded):
    enc, data = small_encoded
    net, hist = fit_mtl(enc, data, Hyperparams(epochs=3, seed=2))
    return net, hist


# ------------------------------------------------------------------ structure

def test_default_architecture(small_encoded):
    enc, _ = small_encoded
    net = init_network(enc.schema, enc, Hyperparams())
    assert [l.n_out for l in net.trunk] == list(DEFAULT_TRUNK) == [20, 50, 80, 100, 120]
    assert net.trunk[0].n_in == enc.dim
    assert {t: net.heads[t][-1].n_out for t in net.task_names} == {"TSV": 7, "TPV": 5, "TCV": 6}


def test_forward_shapes_and_sums(small_encoded):
    enc, data = small_encoded
    net = init_network(enc.schema, enc, Hyperparams(seed=4))
    probs = net.forward(data.X[0])
    assert [len(probs[t]) for t in ("TSV", "TPV", "TCV")] == [7, 5, 6]
    for p in net.forward(data.X).values():
        assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12)
    with pytest.raises(ValueError, match="shape"):
        net.forward(np.zeros(enc.dim + 1))


def test_init_deterministic(small_encoded):
    enc, _ = small_encoded
    a = init_network(enc.schema, enc, Hyperparams(seed=9))
    b = init_network(enc.schema, enc, Hyperparams(seed=9))
    c = init_network(enc.schema, enc, Hyperparams(seed=10))
    assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(a.parameters()[0], c.parameters()[0])


def test_empty_trunk_is_independent_linear_heads(small_encoded):
    enc, data = small_encoded
    net = init_network(enc.schema, enc, Hyperparams(trunk_sizes=()))
    assert net.trunk == []
    for t in net.task_names:
        (head,) = net.heads[t]
        assert head.n_in == enc.dim
        z = data.X @ head.W.T + head.b
        e = np.exp(z - z.max(axis=1, keepdims=True))
        assert np.allclose(net.forward(data.X)[t], e / e.sum(axis=1, keepdims=True), atol=1e-15)


def test_zero_heads_give_uniform(small_encoded):
    enc, data = small_encoded
    net = init_network(enc.schema, enc, Hyperparams(seed=1))
    for t in net.task_names:
        net.heads[t][-1].W[:] = 0
    for t, p in net.forward(data.X[:5]).items():
        assert np.allclose(p, 1.0 / p.shape[1], atol=1e-15)


def test_init_errors(small_encoded):
    from comfortmtl.ingest import Encoder, NotFittedError

    enc, _ = small_encoded
    with pytest.raises(NotFittedError):
        init_network(enc.schema, Encoder(enc.schema))
    from comfortmtl.schema import DatasetSchema

    empty = DatasetSchema((), enc.schema.tasks)
    with pytest.raises(ValueError, match="input width is 0"):
        init_network(empty, Encoder(empty, fitted=True))


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(batch_size=0), dict(trunk_sizes=(3, 0)),
                                 dict(dropout_rate=1.0), dict(learning_rate=0.0), dict(optimizer="x")])
def test_hyperparam_invariants(bad):
    with pytest.raises(ValueError):
        Hyperparams(**bad)


def test_hyperparams_dict_round_trip():
    hp = Hyperparams(trunk_sizes=(4, 5), loss_weights={"TSV": 2.0}, seed=2**63 + 5)
    assert Hyperparams.from_dict(json.loads(json.dumps(hp.to_dict()))) == hp


def test_trunk_for_depth():
    assert trunk_for_depth(0) == ()
    assert trunk_for_depth(3) == (20, 50, 80)
    assert trunk_for_depth(5) == DEFAULT_TRUNK
    assert trunk_for_depth(7) == (20, 50, 80, 100, 120, 120, 120)


# ----------------------------------------------------------------- joint loss

def _set_head_probs(net, x, targets):
    """Make head outputs produce given per-task CE at ``x`` via the bias terms."""
    for t, ce in targets.items():
        head = net.heads[t][-1]
        head.W[:] = 0
        k = head.n_out
        # p[0] = exp(-ce); the rest share the remainder evenly
        p0 = np.exp(-ce)
        rest = (1 - p0) / (k - 1)
        head.b[:] = np.log(np.r_[p0, np.full(k - 1, rest)])


def test_joint_loss_examples():
    net = toy_network(2, (7, 5, 6), trunk=(3,), seed=0, dropout_rate=0.0)
    x = np.array([0.3, -0.2])
    _set_head_probs(net, x, {"T0": 0.2, "T1": 0.3, "T2": 0.5})
    labels = {"T0": 0, "T1": 0, "T2": 0}
    assert joint_loss(net, x, labels) == pytest.approx(1.0, abs=1e-12)
    assert joint_loss(net, x, {"T0": 0, "T1": None, "T2": 0}) == pytest.approx(0.7, abs=1e-12)
    assert joint_loss(net, x, {t: None for t in labels}) is None

    weighted = toy_network(2, (7, 5, 6), trunk=(3,), seed=0, dropout_rate=0.0,
                           loss_weights={"T0": 1.0, "T1": 0.0, "T2": 0.0})
    _set_head_probs(weighted, x, {"T0": 0.2, "T1": 0.3, "T2": 0.5})
    assert joint_loss(weighted, x, labels) == pytest.approx(0.2, abs=1e-12)


# ------------------------------------------------------------------- training

def _two_clusters(n=200, seed=0):
    rng = np.random.default_rng(seed)
    cid = rng.integers(0, 2, n)
    X = rng.normal(size=(n, 4)) * 0.3 + np.where(cid[:, None] == 1, 2.0, -2.0)
    y = {"T0": cid * 3, "T1": 1 - cid, "T2": cid + 2}
    return X, y


def test_two_cluster_training_reaches_high_accuracy():
    X, y = _two_clusters()
    net = toy_network(4, (7, 5, 6), trunk=(8, 8), seed=1, epochs=200, batch_size=16)
    data = EncodedDataset(X, y, net.schema)
    hist = train(net, data, validation=data)
    assert len(hist) == 200
    pred = net.predict_indices(X)
    for t in net.task_names:
        assert np.mean(pred[t] == y[t]) >= 0.95
    assert all(np.isfinite(v) for v in hist.loss)
    assert hist.loss[-1] < hist.loss[0]
    assert set(hist.val_accuracy) == set(net.task_names)


def test_one_epoch_history(small_encoded):
    enc, data = small_encoded
    net, hist = fit_mtl(enc, data, Hyperparams(epochs=1))
    assert len(hist) == 1
    assert all(len(v) == 1 for v in hist.task_loss.values())
    assert hist.to_csv().splitlines()[0] == "epoch,loss,loss_TSV,loss_TPV,loss_TCV"


def test_training_deterministic(small_encoded):
    enc, data = small_encoded
    a, _ = fit_mtl(enc, data, Hyperparams(epochs=2, seed=8))
    b, _ = fit_mtl(enc, data, Hyperparams(epochs=2, seed=8))
    assert dumps_model(a) == dumps_model(b)


def test_training_ignores_absent_labels(small_encoded):
    enc, data = small_encoded
    y = {t: v.copy() for t, v in data.y.items()}
    y["TCV"][::3] = -1
    net, hist = fit_mtl(enc, EncodedDataset(data.X, y, data.schema), Hyperparams(epochs=2))
    assert all(np.isfinite(p).all() for p in net.parameters())


def test_empty_training_set(small_encoded):
    enc, data = small_encoded
    with pytest.raises(ValueError, match="empty"):
        fit_mtl(enc, data.subset(np.array([], dtype=int)), Hyperparams(epochs=1))


def test_overfit_five_rows_recalls_labels():
    ds = generate_synthetic(5, seed=3)
    enc = fit_encoder(ds)
    net, _ = fit_mtl(enc, encode(enc, ds), Hyperparams(epochs=400, dropout_rate=0.0,
                                                       learning_rate=0.01, batch_size=5))
    for r in ds.records:
        out = predict(net, SurveyRecord(r.values))
        assert {t: p.value for t, p in out.items()} == r.labels


# -------------------------------------------------------------------- predict

def test_uniform_heads_predict_lowest_class(trained):
    net, _ = trained
    saved = [(h[-1].W.copy(), h[-1].b.copy()) for h in net.heads.values()]
    try:
        for h in net.heads.values():
            h[-1].W[:] = 0
            h[-1].b[:] = 0
        out = predict(net, generate_synthetic(1, seed=0).records[0])
        assert {t: p.value for t, p in out.items()} == {"TSV": -3, "TPV": -2, "TCV": -3}
    finally:
        for h, (W, b) in zip(net.heads.values(), saved):
            h[-1].W[:] = W
            h[-1].b[:] = b


def test_predict_outputs_and_missing_features(trained):
    net, _ = trained
    rec = generate_synthetic(1, seed=1).records[0]
    sparse = SurveyRecord({k: v for k, v in rec.values.items() if k in ("indoor_temp", "relative_humidity",
                                                                       "outdoor_temp")})
    out = predict(net, sparse)
    for t, p in out.items():
        assert abs(p.probs.sum() - 1) <= 1e-12
        assert p.value in net.schema.task(t).scale
        assert p.label == net.schema.task(t).scale.label_of(p.value)


def test_predict_unknown_feature_rejected(trained):
    net, _ = trained
    rec = generate_synthetic(1, seed=1).records[0]
    bad = SurveyRecord({**rec.values, "wind_chill": 3.0})
    with pytest.raises(PredictError) as err:
        predict(net, bad)
    assert err.value.violations[0].kind == "unknown feature"


def test_record_from_mapping(schema):
    r = record_from_mapping(schema, {"indoor_temp": 14.5, "grade": 4, "clo": "NA", "gender": None})
    assert r.value("grade") == "4"
    assert r.value("clo") is None and r.value("gender") is None


# ---------------------------------------------------------------- invariants

def test_hard_sharing_perturbation(small_encoded):
    enc, data = small_encoded
    net = init_network(enc.schema, enc, Hyperparams(seed=3))
    X = data.X[:4]
    base = net.forward(X)
    net.heads["TPV"][-1].W[0, 0] += 0.5
    after = net.forward(X)
    assert np.array_equal(after["TSV"], base["TSV"]) and np.array_equal(after["TCV"], base["TCV"])
    assert not np.array_equal(after["TPV"], base["TPV"])
    net.trunk[0].W[0, 0] += 0.5
    moved = net.forward(X)
    assert all(not np.array_equal(moved[t], after[t]) for t in net.task_names)


def test_parameter_count_below_three_single_task_nets(small_encoded):
    enc, _ = small_encoded
    net = init_network(enc.schema, enc, Hyperparams())
    trunk = sum(p.size for p in net.trunk_parameters())
    heads = {t: sum(p.size for p in net.head_parameters(t)) for t in net.task_names}
    assert net.n_parameters() == trunk + sum(heads.values())
    assert net.n_parameters() < sum(trunk + h for h in heads.values())


def test_dropout_zero_train_equals_inference(small_encoded):
    enc, data = small_encoded
    net = init_network(enc.schema, enc, Hyperparams(dropout_rate=0.0))
    a = net.forward(data.X, training=True, rng=np.random.default_rng(0))
    b = net.forward(data.X, training=False)
    assert all(np.array_equal(a[t], b[t]) for t in a)


def test_weighted_mtl_gradients_match_stl(small_encoded):
    enc, data = small_encoded
    hp = Hyperparams(seed=6, dropout_rate=0.0)
    mtl = init_network(enc.schema, enc, hp.replace(loss_weights={"TSV": 1.0, "TPV": 0.0, "TCV": 0.0}))
    stl = STLNetworkClassifier(hp)
    from comfortmtl.baselines import single_task_schema

    stl_net = init_network(single_task_schema(enc.schema, "TSV"), enc, hp)
    X = data.X[:32]
    _, g_mtl = mtl.loss_and_grads(X, {t: data.y[t][:32] for t in mtl.task_names})
    _, g_stl = stl_net.loss_and_grads(X, {"TSV": data.y["TSV"][:32]})
    n_trunk = 2 * len(mtl.trunk)
    for a, b in zip(g_mtl[:n_trunk + 2], g_stl):
        assert np.array_equal(a, b)
    assert stl is not None


# --------------------------------------------------------------- persistence

def test_save_load_round_trip(tmp_path, trained):
    net, _ = trained
    path = tmp_path / "model.json"
    checksum = save_model(net, path)
    again = load_model(path)
    assert again.checksum == checksum == model_checksum(net)
    recs = generate_synthetic(100, seed=77).records
    a = predict_records(net, recs)
    b = predict_records(again, recs)
    for ra, rb in zip(a, b):
        for t in ra:
            assert ra[t].value == rb[t].value
            assert ra[t].probs.tobytes() == rb[t].probs.tobytes()
    assert dumps_model(again) == path.read_text()


def test_load_future_version(trained):
    net, _ = trained
    doc = json.loads(dumps_model(net))
    doc["format_version"] = 2
    with pytest.raises(ModelFileError, match="unsupported version"):
        loads_model(json.dumps(doc))


def test_load_rejects_tampering(trained):
    net, _ = trained
    doc = json.loads(dumps_model(net))
    doc["weights"]["trunk"][0]["b"][0] += 1e-9
    with pytest.raises(ModelFileError, match="checksum"):
        loads_model(json.dumps(doc))
    doc = json.loads(dumps_model(net))
    doc["checksum"] = "0" * 64
    with pytest.raises(ModelFileError, match="checksum"):
        loads_model(json.dumps(doc))


def test_load_rejects_bad_shape(trained):
    import hashlib

    net, _ = trained
    doc = json.loads(dumps_model(net))
    del doc["checksum"]
    doc["weights"]["trunk"][1]["W"].pop()
    doc["checksum"] = hashlib.sha256(
        json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
    with pytest.raises(ModelFileError, match="inconsistent with declared shape"):
        loads_model(json.dumps(doc))


def test_load_truncated(trained):
    net, _ = trained
    with pytest.raises(ModelFileError, match="truncated"):
        loads_model(dumps_model(net)[:200])
