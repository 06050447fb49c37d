import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from scae_defense.attack import (FAILED, NO_ACTIVE_CAPSULE, SUCCESS, attack_objective, from_w,
                                 generate_training_adversarial, objective_gradient, read_records, run_evasion_attack,
                                 select_target_capsules, sign_step, target_mask, to_w, update_alpha, write_records)
from scae_defense.classifiers import KMeansClassifier, predict
from scae_defense.config import AttackConfig
from scae_defense.model import encode_presences

EPS = AttackConfig.eps_clamp


def small_cfg(**kw):
    return AttackConfig(**{"n_outer": 3, "n_inner": 4, **kw}).validate()


@pytest.fixture
def toy_classifier(toy_model):
    """Nearest-center classifier whose centers are the priors of 10 random images."""
    g = torch.Generator().manual_seed(2)
    with torch.no_grad():
        prior, _ = encode_presences(toy_model, torch.rand(10, 14, 14, generator=g, dtype=torch.float64))
    return KMeansClassifier(prior.numpy(), np.arange(10), "prior")


class ConstantClassifier(KMeansClassifier):
    def __init__(self):
        super().__init__(np.zeros((1, 4)), np.array([0]), "prior")


class LinearPresenceModel:
    """Analytic stand-in: prior = sigmoid(A x + b) over flattened pixels."""

    def __init__(self, a, b):
        self.a, self.b = a, b

    def __call__(self, x):
        prior = torch.sigmoid(x.flatten(1) @ self.a.T + self.b)
        return prior, prior[..., None]


# change of variables

def test_half_maps_to_zero():
    assert to_w(torch.tensor(0.5, dtype=torch.float64)).item() == 0.0


def test_round_trip_error():
    x = torch.rand(1000, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    x_back, p = from_w(to_w(x, EPS), torch.zeros_like(x), x)
    assert (x_back - x).abs().max() < 1e-5
    assert p.abs().max() <= 0.5 * (1 - EPS) + 1e-12
    # the clamp keeps the extremes finite
    assert torch.isfinite(to_w(torch.tensor([0.0, 1.0], dtype=torch.float64), EPS)).all()


def test_box_constraint_on_random_iterates():
    g = torch.Generator().manual_seed(1)
    x = torch.rand(1000, 5, dtype=torch.float64, generator=g)
    p = (torch.rand(1000, 5, dtype=torch.float64, generator=g) - 0.5) * 100
    x_adv, pert = from_w(to_w(x, EPS), p, x)
    assert x_adv.min() >= 0 and x_adv.max() <= 1
    assert torch.allclose(pert, x_adv - x)


# target capsules

def test_target_examples():
    assert select_target_capsules([0.9, 0.1, 0.1, 0.1]) == (0,)
    assert select_target_capsules([0.3] * 4) == ()
    mask = target_mask(torch.tensor([[0.9, 0.1, 0.1, 0.1], [0.2, 0.2, 0.2, 0.2]]))
    assert mask.tolist() == [[True, False, False, False], [False] * 4]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=24))
def test_target_set_loop_oracle(values):
    v = torch.tensor(values, dtype=torch.float64)
    mean = v.mean().item()
    expected = tuple(i for i in range(len(values)) if v[i].item() > mean)
    assert select_target_capsules(v) == expected


# objective and alpha search

def test_objective_at_zero_perturbation(toy_model, toy_images):
    mask = target_mask(encode_presences(toy_model, toy_images)[0])
    value = attack_objective(toy_images, toy_images, toy_model, mask, 3.0)
    prior = encode_presences(toy_model, toy_images)[0]
    assert torch.allclose(value, 3.0 * (prior * mask).sum(-1))


def test_objective_with_zero_alpha_is_distance(toy_model, toy_images):
    mask = torch.ones(3, 4, dtype=torch.bool)
    x_adv = toy_images.flip(-1)
    value = attack_objective(x_adv, toy_images, toy_model, mask, 0.0)
    assert torch.allclose(value, (x_adv - toy_images).flatten(1).norm(dim=1))


def test_objective_recomputation(toy_model):
    g = torch.Generator().manual_seed(5)
    x = torch.rand(10, 14, 14, generator=g, dtype=torch.float64)
    x_adv = torch.rand(10, 14, 14, generator=g, dtype=torch.float64)
    mask = target_mask(encode_presences(toy_model, x)[0])
    value = attack_objective(x_adv, x, toy_model, mask, 7.5)
    for i in range(10):
        prior = encode_presences(toy_model, x_adv[i:i + 1])[0][0]
        s = select_target_capsules(encode_presences(toy_model, x[i:i + 1])[0][0])
        expected = math.sqrt(((x_adv[i] - x[i]) ** 2).sum().item()) + 7.5 * sum(prior[j].item() for j in s)
        assert value[i].item() == pytest.approx(expected, rel=1e-10)


def test_alpha_update_examples():
    assert update_alpha(100.0, math.inf, 0.0, True) == (50.0, 100.0, 0.0)
    assert update_alpha(100.0, math.inf, 0.0, False) == (1000.0, math.inf, 100.0)
    assert update_alpha(50.0, 100.0, 0.0, False) == (75.0, 100.0, 50.0)


def test_alpha_trace_success_failure_failure():
    alpha, ub, lb = 100.0, math.inf, 0.0
    trace = []
    for ok in (True, False, False):
        alpha, ub, lb = update_alpha(alpha, ub, lb, ok)
        trace.append(alpha)
    assert trace == [50.0, 75.0, 87.5]


def test_alpha_bracket_halves():
    alpha, ub, lb = 100.0, math.inf, 0.0
    widths = []
    for ok in (False, True, False, True, True, False):
        alpha, ub, lb = update_alpha(alpha, ub, lb, ok)
        if math.isfinite(ub):
            widths.append(ub - lb)
    assert all(b == a / 2 for a, b in zip(widths[1:], widths[2:]))


def test_alpha_update_vectorized():
    a, ub, lb = update_alpha(np.array([100.0, 50.0]), np.array([np.inf, 100.0]), np.zeros(2),
                             np.array([True, False]))
    assert a.tolist() == [50.0, 75.0] and ub.tolist() == [100.0, 100.0] and lb.tolist() == [0.0, 50.0]


# sign step

def test_sign_step_magnitude_and_zero_convention():
    p = torch.zeros(5, dtype=torch.float64)
    grad = torch.tensor([0.3, -2.0, 0.0, 1e-30, -0.0], dtype=torch.float64)
    new, _ = sign_step(p, grad, None, AttackConfig.training())
    assert new.tolist() == [-1.0, 1.0, 0.0, -1.0, 0.0]


def test_sign_step_matches_finite_difference_sign():
    g = torch.Generator().manual_seed(9)
    model = LinearPresenceModel(torch.randn(2, 3, generator=g, dtype=torch.float64),
                                torch.randn(2, generator=g, dtype=torch.float64))
    cfg = AttackConfig.training()
    for trial in range(20):
        x = torch.rand(1, 3, generator=g, dtype=torch.float64)
        p = torch.rand(1, 3, generator=g, dtype=torch.float64)
        mask = torch.tensor([[True, trial % 2 == 0]])
        _, grad = objective_gradient(x, p, model, mask, 100.0)
        new, _ = sign_step(p, grad, None, cfg)

        def f(q):
            return objective_gradient(x, q, model, mask, 100.0)[0].item()

        for i in range(3):
            e = torch.zeros_like(p)
            e[0, i] = 1e-6
            fd = (f(p + e) - f(p - e)) / 2e-6
            assert new[0, i].item() == p[0, i].item() - math.copysign(1.0, fd)


# full attack

def test_constant_classifier_is_unattackable(toy_model, toy_images):
    results = run_evasion_attack(toy_images, toy_model, ConstantClassifier(), small_cfg())
    assert all(not r.success and r.status == FAILED and math.isinf(r.l2_norm) for r in results)
    assert all(np.array_equal(r.adversarial, x.numpy()) for r, x in zip(results, toy_images))


def test_attack_results_are_consistent(toy_model, toy_images, toy_classifier):
    log = []
    results = run_evasion_attack(toy_images, toy_model, toy_classifier, small_cfg(), candidate_log=log,
                                 labels=[1, 2, 3])
    assert any(r.success for r in results)
    for r, x in zip(results, toy_images):
        assert r.adversarial.min() >= 0 and r.adversarial.max() <= 1
        assert r.l2_norm == pytest.approx(np.linalg.norm(r.perturbation), abs=1e-9) or not r.success
        if r.success:
            prior, post = encode_presences(toy_model, torch.from_numpy(r.adversarial)[None])
            assert predict(toy_classifier, prior, post)[0] != r.predicted_label
            norms = [n for sid, _, _, n in log if sid == r.sample_id]
            assert r.l2_norm == min(norms)
            assert r.status == SUCCESS
    assert [r.clean_label for r in results] == [1, 2, 3]


def test_more_rounds_never_worsen_the_best_norm(toy_model, toy_images, toy_classifier):
    norms = []
    for n_outer in (1, 2, 4):
        res = run_evasion_attack(toy_images, toy_model, toy_classifier, small_cfg(n_outer=n_outer), seed=3)
        norms.append(np.array([r.l2_norm for r in res]))
    assert np.all(norms[1] <= norms[0]) and np.all(norms[2] <= norms[1])


def test_per_sample_results_do_not_depend_on_batching(toy_model, toy_images, toy_classifier):
    together = run_evasion_attack(toy_images, toy_model, toy_classifier, small_cfg(), sample_ids=[4, 5, 6])
    alone = [run_evasion_attack(toy_images[i:i + 1], toy_model, toy_classifier, small_cfg(), sample_ids=[4 + i])[0]
             for i in range(3)]
    for a, b in zip(together, alone):
        assert a.success == b.success
        assert a.l2_norm == pytest.approx(b.l2_norm, rel=1e-9) or math.isinf(a.l2_norm) == math.isinf(b.l2_norm)


def test_no_active_capsule_status():
    model = LinearPresenceModel(torch.zeros(3, 4, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
    clf = KMeansClassifier(np.eye(3), np.arange(3), "prior")
    x = torch.rand(2, 2, 2, dtype=torch.float64)
    results = run_evasion_attack(x, model, clf, small_cfg())
    assert [r.status for r in results] == [NO_ACTIVE_CAPSULE] * 2
    assert all(not r.success and r.target_set == () for r in results)


def test_non_finite_objective_counts_as_failure():
    class NanModel:
        def __call__(self, x):
            flat = x.flatten(1)
            prior = torch.stack([flat[:, 0], 1 - flat[:, 0]], -1)
            # any perturbed input makes the presences of sample 0 non-finite
            prior = torch.where((torch.arange(len(x)) == 0)[:, None] & (flat[:, :1] != 0.75),
                                torch.full_like(prior, float("nan")), prior)
            return prior, prior[..., None]

    clf = KMeansClassifier(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]), "prior")
    x = torch.full((1, 1, 2), 0.75, dtype=torch.float64)
    results = run_evasion_attack(x, NanModel(), clf, small_cfg())
    assert results[0].status == FAILED and not results[0].success


def test_generator_returns_clean_on_failure(toy_model, toy_images):
    out = generate_training_adversarial(toy_images, toy_model, ConstantClassifier(), AttackConfig.training(n_outer=2))
    assert torch.equal(out, toy_images)


def test_generator_output_in_box_and_seeded(toy_model, toy_images, toy_classifier):
    cfg = AttackConfig.training(n_outer=2)
    a = generate_training_adversarial(toy_images, toy_model, toy_classifier, cfg, seed=1)
    b = generate_training_adversarial(toy_images, toy_model, toy_classifier, cfg, seed=1)
    assert torch.equal(a, b)
    assert a.min() >= 0 and a.max() <= 1 and a.shape == toy_images.shape


def test_records_round_trip(tmp_path, toy_model, toy_images, toy_classifier):
    results = run_evasion_attack(toy_images, toy_model, toy_classifier, small_cfg(), labels=[0, 1, 2])
    path = write_records(results, tmp_path / "r.csv")
    rows = read_records(path)
    assert [r["sample_id"] for r in rows] == [0, 1, 2]
    for row, res in zip(rows, results):
        assert row["l2_norm"] == res.l2_norm and row["success"] == res.success and row["status"] == res.status
    assert path.read_text().splitlines()[0] == "sample_id,clean_label,predicted_label,adv_label,success,l2_norm,status"
