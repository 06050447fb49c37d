import csv
import math

import numpy as np
import pytest
import torch

from scae_defense.attack import NO_ACTIVE_CAPSULE, read_records
from scae_defense.classifiers import KMeansClassifier, NotFittedError
from scae_defense.config import AttackConfig, EvalConfig
from scae_defense.data import CanvasDataset
from scae_defense.evaluation import (EvalResult, adversarial_accuracy, emit_report, encode_dataset,
                                     evaluate_adversarial, evaluate_clean, fit_classifiers, plot_curves,
                                     read_curve, robustness_curve)


def rec(label, pred, norm, status=None):
    success = math.isfinite(norm)
    return {"sample_id": 0, "clean_label": label, "predicted_label": pred, "adv_label": -1,
            "success": success, "l2_norm": norm, "status": status or ("success" if success else "failed")}


@pytest.fixture
def toy_dataset():
    rng = np.random.default_rng(1)
    return CanvasDataset(rng.random((40, 14, 14)), np.arange(40) % 10)


def test_hand_traced_curve():
    records = [rec(1, 1, 2.0), rec(2, 2, 5.0), rec(3, 3, math.inf)]
    curve = robustness_curve(records, [1, 3, 6])
    assert curve.accuracies == [1.0, 2 / 3, 1 / 3]


def test_failed_attacks_give_flat_curve():
    records = [rec(1, 1, math.inf), rec(2, 0, math.inf), rec(3, 3, math.inf)]
    curve = robustness_curve(records, EvalConfig().thresholds())
    assert set(curve.accuracies) == {2 / 3}


def test_wrong_clean_prediction_stays_wrong_and_no_capsule_keeps_outcome():
    records = [rec(1, 0, 0.5), rec(2, 2, math.inf, NO_ACTIVE_CAPSULE)]
    assert adversarial_accuracy(records, 10.0) == 0.5


def test_curve_is_monotone_and_anchored():
    rng = np.random.default_rng(2)
    records = [rec(int(y), int(p), float(n) if rng.random() < 0.8 else math.inf)
               for y, p, n in zip(rng.integers(0, 3, 200), rng.integers(0, 3, 200), rng.random(200) * 8)]
    curve = robustness_curve(records, EvalConfig().thresholds())
    acc = curve.accuracies
    assert all(b <= a for a, b in zip(acc, acc[1:]))
    assert acc[0] == sum(r["predicted_label"] == r["clean_label"] for r in records) / len(records)
    assert acc[-1] == adversarial_accuracy(records, EvalConfig().thresholds()[-1])


def test_evaluate_clean_loop_oracle(toy_model, toy_dataset):
    toy_model.float()
    clf = fit_classifiers(toy_model, toy_dataset, linear_epochs=5)["prior_kmeans"]
    acc = evaluate_clean(toy_model, clf, toy_dataset.subset(np.arange(20)))
    prior, _ = encode_dataset(toy_model, toy_dataset.subset(np.arange(20)))
    hits = 0
    for i in range(20):
        d = ((clf.centers - prior[i]) ** 2).sum(1)
        hits += int(clf.permutation[int(np.argmin(d))] == toy_dataset.labels[i])
    assert acc == hits / 20


def test_constant_classifier_gives_chance_on_balanced_labels(toy_model, toy_dataset):
    toy_model.float()
    clf = KMeansClassifier(np.zeros((1, 4)), np.array([0]), "prior")
    assert evaluate_clean(toy_model, clf, toy_dataset) == pytest.approx(0.1)
    with pytest.raises(NotFittedError):
        evaluate_clean(toy_model, None, toy_dataset)


def test_adversarial_evaluation_matches_records(tmp_path, toy_model, toy_dataset):
    toy_model.float()
    clf = fit_classifiers(toy_model, toy_dataset, linear_epochs=5)["prior_kmeans"]
    ev = EvalConfig(n_attack_samples=8, l2_threshold=4.0)
    acc, records = evaluate_adversarial(toy_model, clf, toy_dataset, AttackConfig(n_outer=2, n_inner=3), ev,
                                        records_path=tmp_path / "r.csv", batch_size=3)
    assert len(records) == 8 and acc == adversarial_accuracy(read_records(tmp_path / "r.csv"), 4.0)
    assert robustness_curve(records, [4.0]).accuracies == [acc]
    zero, _ = evaluate_adversarial(toy_model, clf, toy_dataset, AttackConfig(n_outer=2, n_inner=3),
                                   EvalConfig(n_attack_samples=8, l2_threshold=1e-12))
    assert zero == sum(r["predicted_label"] == r["clean_label"] for r in records) / 8


def test_report_layout_and_determinism(tmp_path):
    records = [rec(1, 1, 2.0), rec(2, 2, 5.0), rec(3, 3, math.inf)]
    results = [EvalResult(c, r, "mnist", 0.9, 0.5, robustness_curve(records, [0, 3, 6], r, c))
               for r in ("plain", "hat") for c in ("prior_kmeans", "posterior_kmeans")]
    files = emit_report(results, tmp_path / "a", threshold=4.0)
    emit_report(results, tmp_path / "b", threshold=4.0)
    rows = list(csv.DictReader((tmp_path / "a" / "table.csv").open()))
    assert len(rows) == 4 and list(rows[0]) == ["classifier", "regime", "dataset", "clean_acc", "adv_acc"]
    for f in files:
        if f.suffix == ".csv":
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
        else:
            assert f.stat().st_size > 0
    curve = read_curve(tmp_path / "a" / "curve_hat_prior_kmeans_mnist.csv")
    assert curve.points == [(0.0, 1.0), (3.0, 2 / 3 if False else 0.666667), (6.0, 0.333333)]


def test_plotted_points_equal_curve_data(tmp_path):
    records = [rec(1, 1, 2.0), rec(2, 2, 5.0), rec(3, 3, math.inf)]
    curve = robustness_curve(records, [0, 1, 3, 6])
    plotted = plot_curves([curve], tmp_path / "c.png")
    xs, ys = plotted[0]
    assert xs == curve.thresholds and np.allclose(ys, curve.accuracies)


def test_unwritable_report_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report([], blocker / "sub")
