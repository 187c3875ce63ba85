import json

import numpy as np
import pytest

from milab.data import Dataset
from milab.evaluation import (AttackReport, attack_accuracy, build_report, knn_dist, knn_distances,
                              min_feature_distances, overfit_analysis, read_pgm, topk_hits, write_pgm,
                              write_table_csv)
from milab.models import Classifier, predict_penultimate
from milab.tensor import rng

SHAPE = (1, 8, 8)


@pytest.fixture(scope="module")
def model():
    return Classifier("Conv2", 5, SHAPE, seed=3, feature_dim=12)


def _brute_force_min(q, ref):
    out = []
    for a in q:
        best = np.inf
        for b in ref:
            best = min(best, float(np.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))))
        out.append(best)
    return np.array(out)


def test_min_distances_match_all_pairs():
    r = rng(0)
    q, ref = r.normal(size=(10, 6)), r.normal(size=(10, 6))
    np.testing.assert_allclose(min_feature_distances(q, ref), _brute_force_min(q, ref), atol=1e-9, rtol=0)


def test_knn_dist_matches_all_pairs_in_eval_features(model):
    r = rng(1)
    recons = r.uniform(-1, 1, size=(10,) + SHAPE)
    private = Dataset(r.uniform(-1, 1, size=(10,) + SHAPE), np.zeros(10, int))
    fq = predict_penultimate(model, recons)[:, :-1]
    fr = predict_penultimate(model, private.images)[:, :-1]
    assert abs(knn_dist(recons, private, model, 0) - _brute_force_min(fq, fr).mean()) <= 1e-9


def test_knn_dist_permutation_invariant(model):
    r = rng(2)
    recons = r.uniform(-1, 1, size=(6,) + SHAPE)
    private = Dataset(r.uniform(-1, 1, size=(7,) + SHAPE), np.zeros(7, int))
    base = knn_dist(recons, private, model, 0)
    shuffled = Dataset(private.images[r.permutation(7)], private.labels)
    assert knn_dist(recons[r.permutation(6)], shuffled, model, 0) == pytest.approx(base, abs=1e-12)


def test_knn_zero_for_a_private_copy(model):
    r = rng(3)
    private = Dataset(r.uniform(-1, 1, size=(4,) + SHAPE), np.array([0, 0, 1, 1]))
    # features of the same image may differ in the last ulp between batch sizes
    assert knn_distances(private.images[2:3], private, model, 1)[0] <= 1e-12


def test_knn_only_uses_target_class(model):
    r = rng(4)
    private = Dataset(r.uniform(-1, 1, size=(4,) + SHAPE), np.array([0, 0, 1, 1]))
    d = knn_distances(private.images[:1], private, model, 1)[0]
    assert d > 0


def test_knn_single_sample_distance():
    q = np.array([[0.0, 0.0]])
    assert min_feature_distances(q, np.array([[3.0, 0.0]]))[0] == 3.0


def test_knn_absent_class(model):
    private = Dataset(np.zeros((2,) + SHAPE), np.array([0, 0]))
    with pytest.raises(ValueError, match="class 3"):
        knn_dist(np.zeros((1,) + SHAPE), private, model, 3)


def test_topk_stable_ties():
    logits = np.zeros((1, 4))
    assert topk_hits(logits, np.array([0]), 1)[0] and not topk_hits(logits, np.array([3]), 1)[0]


def test_accuracy_perfect_and_top5(model):
    r = rng(5)
    x = r.uniform(-1, 1, size=(10,) + SHAPE)
    from milab.models import predict_logits
    pred = predict_logits(model, x).argmax(axis=1)
    assert attack_accuracy(x, pred, model, 1, groups=np.arange(10) % 2) == (100.0, 0.0)
    wrong = (pred + 1) % 5
    assert attack_accuracy(x, wrong, model, 5) == (100.0, 0.0)
    assert attack_accuracy(x, wrong, model, 1)[0] == 0.0


def test_accuracy_std_over_groups(model):
    from milab.models import predict_logits
    x = rng(6).uniform(-1, 1, size=(4,) + SHAPE)
    pred = predict_logits(model, x).argmax(axis=1)
    targets = pred.copy()
    targets[2:] = (pred[2:] + 1) % 5
    # group 0 all right, group 1 all wrong
    assert attack_accuracy(x, targets, model, 1, groups=[0, 0, 1, 1]) == (50.0, 50.0)


def test_empty_input_fails(model):
    with pytest.raises(ValueError, match="no reconstructions"):
        attack_accuracy(np.zeros((0,) + SHAPE), np.zeros(0, int), model)


def test_overfit_identical_models(model):
    x = rng(7).uniform(-1, 1, size=(20,) + SHAPE)
    k = rng(8).integers(0, 5, size=20)
    res = overfit_analysis(x, k, model, model)
    np.testing.assert_array_equal(res.loss_a, res.loss_b)
    res = overfit_analysis(x, k, model, model, tau_low=float(np.median(res.loss_a)),
                           tau_high=float(np.median(res.loss_a)) + 1e-9)
    assert res.fraction_low_high == 0.0


def test_overfit_fraction_counts_low_high(model):
    other = Classifier("Conv1", 5, SHAPE, seed=9, feature_dim=12)
    x = rng(9).uniform(-1, 1, size=(30,) + SHAPE)
    k = rng(10).integers(0, 5, size=30)
    res = overfit_analysis(x, k, model, other, tau_low=1.6, tau_high=1.6)
    assert res.fraction_low_high == np.mean((res.loss_a <= 1.6) & (res.loss_b >= 1.6))
    with pytest.raises(ValueError, match="class count"):
        overfit_analysis(x, k, model, Classifier("Conv1", 4, SHAPE))


def test_report_invariants_and_roundtrip(model):
    r = rng(11)
    x = r.uniform(-1, 1, size=(10,) + SHAPE)
    private = Dataset(r.uniform(-1, 1, size=(10,) + SHAPE), np.arange(10) % 5)
    targets = np.arange(10) % 5
    report, rows = build_report("lomma", x, targets, np.arange(10) // 5, private, model, "abc", {"master": 0})
    assert 0 <= report.top1_mean <= report.top5_mean <= 100 and report.knn_dist >= 0
    assert set(report.per_class) == {"0", "1", "2", "3", "4"}
    assert AttackReport.from_json(report.to_json()) == report
    assert json.loads(report.to_json())["config_hash"] == "abc"
    assert len(rows["knn_dist"]) == 10
    with pytest.raises(ValueError):
        AttackReport("x", 50.0, 0.0, 40.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        AttackReport("x", 50.0, 0.0, 60.0, 0.0, -1.0)


def test_table_csv_roundtrips_floats(tmp_path):
    vals = np.array([0.1, 1 / 3, 2.5e-17])
    path = write_table_csv(tmp_path / "t.csv", {"a": vals, "hit": np.array([True, False, True])})
    lines = path.read_text().splitlines()
    assert lines[0] == "a,hit"
    assert [float(l.split(",")[0]) for l in lines[1:]] == vals.tolist()
    assert lines[2].endswith(",0")


def test_pgm_roundtrip(tmp_path):
    img = np.linspace(-1, 1, 12).reshape(1, 3, 4)
    back = read_pgm(write_pgm(tmp_path / "x.pgm", img))
    assert back.shape == (3, 4) and back[0, 0] == 0 and back[-1, -1] == 255
    rgb = read_pgm(write_pgm(tmp_path / "x.ppm", np.zeros((3, 2, 2))))
    assert rgb.shape == (2, 2, 3)
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "bad.pgm", np.zeros((2, 2, 2)))
