import logging

import numpy as np
import pytest

from config import ProbeConfig, SharingMode
from datagen import DomainDataset
from errors import DataError, ShapeError
from evaluator import (MetricsRecord, accuracy, agreement_rate, emit_metrics, ensemble_accuracy, evaluate_pair,
                       feature_probe, knn_predict, knn_probe, pca_fit, read_metrics)
from models import build_pair


def _constant(k, n_classes=2):
    def model(x):
        out = np.zeros((len(x), n_classes))
        out[:, k] = 1.0
        return out
    return model


def _data(labels, domain="target", n_classes=2):
    labels = np.asarray(labels)
    return DomainDataset(np.zeros((len(labels), 2)), labels, domain, n_classes)


def test_accuracy_of_a_constant_model():
    assert accuracy(_constant(0), _data([0, 0, 1, 1])) == 0.5
    assert accuracy(_constant(1), _data([1, 1, 1])) == 1.0


def test_accuracy_needs_labels_and_samples():
    with pytest.raises(DataError, match="no labels"):
        accuracy(_constant(0), DomainDataset(np.zeros((3, 2)), None, "target", 2))
    with pytest.raises(DataError, match="empty"):
        accuracy(_constant(0), _data([]))


def _within_three_sigma(value, p, n):
    return abs(value - p) <= 3 * np.sqrt(p * (1 - p) / n)


@pytest.mark.parametrize("n_classes", [2, 5, 10])
def test_untrained_model_is_at_chance_on_shuffled_labels(small_arch, n_classes):
    n = 3000
    rng = np.random.default_rng(n_classes)
    data = DomainDataset(rng.normal(size=(n, 2)), rng.permutation(np.arange(n) % n_classes), "target", n_classes)
    uniform = lambda x: np.full((len(x), n_classes), 1.0 / n_classes)  # noqa: E731
    assert _within_three_sigma(accuracy(uniform, data), 1.0 / n_classes, n)
    hyp = build_pair(small_arch, (2,), n_classes, SharingMode.INDEPENDENT, seed=3, members=1).members[0]
    assert _within_three_sigma(accuracy(hyp.eval(), data), 1.0 / n_classes, n)


def test_independent_random_predictors_agree_at_chance():
    n, n_classes = 5000, 10

    def random_predictor(seed):
        rng = np.random.default_rng(seed)
        return lambda x: rng.dirichlet(np.ones(n_classes), size=len(x))

    data = DomainDataset(np.zeros((n, 2)), None, "target", n_classes)
    rate = agreement_rate(random_predictor(1), random_predictor(2), data)
    assert _within_three_sigma(rate, 1.0 / n_classes, n)


def test_agreement_rate():
    data = _data([0, 1, 0])
    assert agreement_rate(_constant(0), _constant(0), data) == 1.0
    assert agreement_rate(_constant(0), _constant(1), data) == 0.0


def test_ensemble_accuracy_averages_probabilities(moons, small_arch):
    source, target = moons
    pair = build_pair(small_arch, (2,), 2, SharingMode.INDEPENDENT, seed=0).eval()
    acc = ensemble_accuracy(pair.members, target)
    probs = np.mean([m.predict_proba(target.inputs) for m in pair.members], axis=0)
    assert acc == np.mean(np.argmax(probs, axis=1) == target.labels)


@pytest.fixture
def subspace_data(rng):
    coords = rng.normal(size=(40, 3)) * [5.0, 2.0, 0.5]
    basis, _ = np.linalg.qr(rng.normal(size=(6, 3)))
    return coords @ basis.T + rng.normal(size=6)


def test_pca_basis_is_orthonormal_and_sorted(rng):
    x = rng.normal(size=(60, 8)) * np.arange(1, 9)
    proj = pca_fit(x, 5)
    assert proj.dims == 5 and not proj.rank_deficient
    np.testing.assert_allclose(proj.basis.T @ proj.basis, np.eye(5), atol=1e-8)
    assert np.all(np.diff(proj.eigenvalues) <= 0)
    assert proj.explained_variance_ratio().sum() <= 1.0 + 1e-12


def test_pca_is_lossless_on_its_subspace(subspace_data):
    proj = pca_fit(subspace_data, 3)
    rebuilt = proj.transform(subspace_data) @ proj.basis.T + proj.mean
    np.testing.assert_allclose(rebuilt, subspace_data, atol=1e-8)


def test_pca_flags_rank_deficiency(subspace_data, caplog):
    with caplog.at_level(logging.WARNING):
        proj = pca_fit(subspace_data, 5)
    assert proj.rank_deficient and proj.dims == 3
    assert "usable components" in caplog.text


def test_pca_ignores_sample_order_up_to_sign(rng):
    x = rng.normal(size=(50, 4)) * [4.0, 3.0, 2.0, 1.0]
    a = pca_fit(x, 3).basis
    b = pca_fit(x[rng.permutation(50)], 3).basis
    signs = np.sign(np.sum(a * b, axis=0))
    np.testing.assert_allclose(a, b * signs, atol=1e-8)


def test_pca_input_checks(rng):
    with pytest.raises(ShapeError):
        pca_fit(rng.normal(size=(1, 3)))
    with pytest.raises(ShapeError):
        pca_fit(rng.normal(size=(10, 3)), 2).transform(rng.normal(size=(2, 4)))


def test_knn_recovers_its_own_training_set(rng):
    x = rng.normal(size=(25, 3))
    y = rng.integers(0, 3, size=25)
    np.testing.assert_array_equal(knn_predict(x, y, x, 1), y)


def test_knn_single_label():
    x = np.arange(10.0).reshape(5, 2)
    assert np.all(knn_predict(x, np.full(5, 2), x + 0.3, 3) == 2)


def test_knn_matches_brute_force(rng):
    train_x = rng.normal(size=(30, 2))
    train_y = rng.integers(0, 3, size=30)
    test_x = rng.normal(size=(12, 2))
    expected = []
    for q in test_x:
        dists = [float(np.sum((p - q) ** 2)) for p in train_x]
        nearest = sorted(range(30), key=lambda i: (dists[i], i))[:3]
        votes = [sum(train_y[i] == c for i in nearest) for c in range(3)]
        expected.append(votes.index(max(votes)))
    np.testing.assert_array_equal(knn_predict(train_x, train_y, test_x, 3), expected)


def test_knn_is_rotation_invariant(rng):
    train_x = rng.normal(size=(40, 3))
    train_y = rng.integers(0, 2, size=40)
    test_x = rng.normal(size=(15, 3))
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    np.testing.assert_array_equal(knn_predict(train_x, train_y, test_x, 5),
                                  knn_predict(train_x @ q, train_y, test_x @ q, 5))


def test_knn_vote_tie_goes_to_lower_class():
    train_x = np.array([[0.0], [2.0]])
    assert knn_predict(train_x, np.array([1, 0]), np.array([[1.0]]), 2)[0] == 0


def test_knn_argument_checks(rng):
    x = rng.normal(size=(4, 2))
    with pytest.raises(DataError, match="exceeds"):
        knn_predict(x, np.zeros(4, dtype=int), x, 5)
    with pytest.raises(ValueError):
        knn_predict(x, np.zeros(4, dtype=int), x, 0)


def test_knn_probe_reports_every_k(rng):
    x = rng.normal(size=(20, 2))
    y = (x[:, 0] > 0).astype(int)
    result = knn_probe(x, y, x, y, [1, 3])
    assert set(result) == {1, 3} and result[1] == 1.0


def test_feature_probe(moons, small_arch):
    source, target = moons
    pair = build_pair(small_arch, (2,), 2, SharingMode.INDEPENDENT, seed=0).eval()
    probe = ProbeConfig(k_values=[1, 3], pca_dims=4, max_samples=60)
    result = feature_probe(pair.members[0], source, target, probe)
    assert set(result) == {1, 3}
    assert all(0.0 <= v <= 1.0 for v in result.values())
    with pytest.raises(DataError):
        feature_probe(pair.members[0], source, target.unlabeled(), probe)


def test_evaluate_pair_fills_pair_fields(moons, small_arch, weights):
    source, target = moons
    pair = build_pair(small_arch, (2,), 2, SharingMode.INDEPENDENT, seed=0).eval()
    record = evaluate_pair(pair, 7, source, target, weights, validation=target, knn={1: 0.5})
    assert record.iter == 7
    assert record.acc_tgt_2 is not None and 0.0 <= record.agree <= 1.0
    assert record.l_y_1 > 0 and record.l_p is not None
    assert record.acc_val_1 == record.acc_tgt_1
    assert record.knn == {"1": 0.5}


def test_evaluate_single_member_omits_pair_fields(moons, small_arch, weights):
    source, target = moons
    pair = build_pair(small_arch, (2,), 2, SharingMode.INDEPENDENT, members=1).eval()
    record = evaluate_pair(pair, 0, source, target, weights)
    assert record.acc_tgt_2 is None and record.agree is None
    assert "agree" not in record.to_json()


def test_metrics_stream_round_trip(tmp_path):
    records = [MetricsRecord(iter=0, acc_tgt_1=0.5, acc_src_1=0.6),
               MetricsRecord(iter=10, acc_tgt_1=0.7, acc_tgt_2=0.65, acc_src_1=0.9, agree=0.8,
                             knn={"1": 0.75})]
    path = tmp_path / "metrics.jsonl"
    assert emit_metrics(records, path) == 2
    lines = path.read_text().splitlines()
    assert lines[0].startswith('{"iter": 0')
    assert "acc_tgt_2" not in lines[0]
    assert read_metrics(path) == records


def test_empty_metrics_stream(tmp_path, caplog):
    path = tmp_path / "metrics.jsonl"
    with caplog.at_level(logging.WARNING):
        assert emit_metrics([], path) == 0
    assert "No metrics records" in caplog.text
    assert read_metrics(path) == []


@pytest.mark.parametrize("line", ["not json", '{"iter": -1, "acc_tgt_1": 0.5, "acc_src_1": 0.5}',
                                  '{"iter": 1, "acc_tgt_1": 0.5, "acc_src_1": 0.5, "bogus": 1}'])
def test_malformed_metrics(tmp_path, line):
    path = tmp_path / "metrics.jsonl"
    path.write_text(line + "\n")
    with pytest.raises(DataError, match="malformed"):
        read_metrics(path)
