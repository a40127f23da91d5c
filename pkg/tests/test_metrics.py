import csv

import numpy as np
import pytest

from fedlips import metrics as mt
from fedlips import model as md


def onehot_identity_mlp(num_classes):
    """mlp whose logits reproduce a one-hot input exactly."""
    m = md.build_model("mlp", (num_classes,), num_classes, seed=0)
    h = m.layer("fc1").weights.shape[0]
    eye = np.zeros((h, num_classes))
    eye[:num_classes, :num_classes] = np.eye(num_classes)
    m.layer("fc1").weights = eye
    m.layer("fc1").bias = np.zeros(h)
    mid = np.zeros((h, h))
    mid[:num_classes, :num_classes] = np.eye(num_classes)
    m.layer("fc2").weights = mid
    m.layer("fc2").bias = np.zeros(h)
    m.layer("fc3").weights = np.eye(num_classes, h)
    m.layer("fc3").bias = np.zeros(num_classes)
    return m


# ---------------------------------------------------------------------------
# cosine
# ---------------------------------------------------------------------------

def test_cosine_identity(rng):
    v = rng.normal(size=50)
    assert abs(mt.layer_cosine(v, v) - 1.0) < 1e-12


def test_cosine_antipodal(rng):
    v = rng.normal(size=50)
    assert abs(mt.layer_cosine(v, -v) + 1.0) < 1e-12


def test_cosine_hand_value():
    got = mt.layer_cosine(np.array([1.0, 0.0]), np.array([1.0, 1.0]))
    assert abs(got - 0.70710678) < 1e-8


def test_cosine_zero_norm_rejected():
    with pytest.raises(ValueError, match="zero-norm"):
        mt.layer_cosine(np.zeros(3), np.ones(3))


def test_cosine_scale_invariance(rng):
    v = rng.normal(size=40)
    w = rng.normal(size=40)
    base = mt.layer_cosine(v, w)
    for c in (1e-6, 0.5, 3.0, 1e6):
        assert abs(mt.layer_cosine(c * v, w) - base) < 1e-12


def test_cosine_cauchy_schwarz(rng):
    for _ in range(100):
        v = rng.normal(size=20)
        w = rng.normal(size=20)
        assert abs(mt.layer_cosine(v, w)) <= 1.0 + 1e-12


# ---------------------------------------------------------------------------
# accuracy
# ---------------------------------------------------------------------------

def test_accuracy_oracle_model():
    m = onehot_identity_mlp(5)
    labels = np.array([0, 1, 2, 3, 4, 2, 3])
    inputs = np.eye(5)[labels]
    assert mt.evaluate_accuracy(m, inputs, labels) == 1.0


def test_accuracy_constant_predictor_balanced():
    m = onehot_identity_mlp(10)
    labels = np.arange(10)
    inputs = np.zeros((10, 10))  # constant output, argmax is class 0
    assert mt.evaluate_accuracy(m, inputs, labels) == 0.1


def test_accuracy_hand_counted():
    m = onehot_identity_mlp(4)
    labels = np.array([0, 1, 2, 3])
    inputs = np.eye(4)[[0, 1, 2, 0]]  # last sample misclassified
    assert mt.evaluate_accuracy(m, inputs, labels) == 0.75


def test_accuracy_empty_split():
    m = onehot_identity_mlp(3)
    with pytest.raises(ValueError, match="empty"):
        mt.evaluate_accuracy(m, np.zeros((0, 3)), np.zeros(0, dtype=int))


# ---------------------------------------------------------------------------
# record_round
# ---------------------------------------------------------------------------

@pytest.fixture
def small_model():
    return md.build_model("mlp", (6,), 4, seed=2)


def test_record_at_reference_round_all_cosines_one(small_model):
    log = mt.MetricsLog()
    snapshot = md.weight_vectors(small_model)
    mt.record_round(log, 2, [0.5], small_model, snapshot, [])
    assert all(abs(v - 1.0) < 1e-12 for v in log.records[0].cosine.values())


def test_record_before_reference_round_has_no_cosine(small_model):
    log = mt.MetricsLog()
    mt.record_round(log, 1, [0.5], small_model, None, [])
    assert log.records[0].cosine is None


def test_record_mean_accuracy_identical_clients(small_model):
    log = mt.MetricsLog()
    mt.record_round(log, 1, [0.37, 0.37, 0.37], small_model, None, [])
    assert log.records[0].mean_accuracy == pytest.approx(0.37)


def test_record_mean_accuracy_permutation_invariant(small_model):
    accs = [0.1, 0.4, 0.9, 0.25]
    logs = []
    for order in (accs, accs[::-1]):
        log = mt.MetricsLog()
        mt.record_round(log, 1, list(order), small_model, None, [])
        logs.append(log.records[0].mean_accuracy)
    assert logs[0] == logs[1]


def test_record_grad_norm_client_mean(small_model):
    log = mt.MetricsLog()
    names = [l.name for l in small_model.weight_layers()]
    gn1 = {n: 0.2 for n in names}
    gn2 = {n: 0.4 for n in names}
    mt.record_round(log, 1, [0.5], small_model, None, [gn1, gn2])
    for n in names:
        assert log.records[0].grad_norms[n] == pytest.approx(0.3)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def test_export_empty_log_header_only(tmp_path):
    mt.export_csv(mt.MetricsLog(), tmp_path)
    assert (tmp_path / "accuracy.csv").read_text() == "round,mean_accuracy\n"
    assert (tmp_path / "cosine.csv").read_text() == "round,layer,cosine\n"
    assert (tmp_path / "gradnorm.csv").read_text() == "round,layer,mean_grad_norm\n"


def _demo_log(small_model):
    log = mt.MetricsLog()
    snapshot = md.weight_vectors(small_model)
    names = [l.name for l in small_model.weight_layers()]
    mt.record_round(log, 1, [1 / 3], small_model, None, [{n: 0.123456789123456789 for n in names}])
    mt.record_round(log, 2, [2 / 7], small_model, snapshot, [{n: 1e-9 for n in names}])
    return log


def test_export_reexport_byte_identical(tmp_path, small_model):
    log = _demo_log(small_model)
    d1, d2 = tmp_path / "a", tmp_path / "b"
    mt.export_csv(log, d1)
    mt.export_csv(log, d2)
    for name in ("accuracy.csv", "cosine.csv", "gradnorm.csv"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()


def test_export_row_counts(tmp_path):
    layers = [
        md.LayerParams("head", "linear", "first", True, np.ones((1, 2)), np.zeros(1)),
        md.LayerParams("tail", "linear", "last", True, np.ones((1, 1)), np.zeros(1)),
    ]
    toy = md.ModelParams("mlp", (2,), 2, layers)
    log = mt.MetricsLog()
    mt.record_round(log, 1, [0.5], toy, md.weight_vectors(toy), [])
    mt.export_csv(log, tmp_path)
    rows = (tmp_path / "cosine.csv").read_text().strip().split("\n")
    assert len(rows) == 1 + 2  # header + one row per layer


def test_export_roundtrip_exact_floats(tmp_path, small_model):
    log = _demo_log(small_model)
    mt.export_csv(log, tmp_path)
    with open(tmp_path / "accuracy.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert float(rows[0]["mean_accuracy"]) == log.records[0].mean_accuracy
    assert float(rows[1]["mean_accuracy"]) == log.records[1].mean_accuracy
    with open(tmp_path / "gradnorm.csv") as fh:
        rows = list(csv.DictReader(fh))
    parsed = {(r["round"], r["layer"]): float(r["mean_grad_norm"]) for r in rows}
    for rec in log.records:
        for layer, value in rec.grad_norms.items():
            assert parsed[(str(rec.round), layer)] == value


def test_summary_contents(tmp_path, small_model):
    log = _demo_log(small_model)
    path = mt.export_summary(log, tmp_path)
    import json
    loaded = json.loads(open(path).read())
    assert loaded["final_mean_accuracy"] == log.records[-1].mean_accuracy
    assert set(loaded["final_cosine"]) == set(log.records[-1].cosine)
