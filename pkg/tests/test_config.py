import json
import math

import pytest

from scae_defense.config import (AttackConfig, ConfigError, DefenseConfig, EvalConfig, ScaeConfig, build_config,
                                 load_config, parse_cnn_spec, parse_set_transformer_spec, to_flat_dict)


def test_cnn_spec_expands_repeats():
    assert parse_cnn_spec("2x(128:2)-2x(128:1)") == [(128, 2), (128, 2), (128, 1), (128, 1)]
    assert parse_cnn_spec("2×(128:2)−2×(128:1)") == parse_cnn_spec("2x(128:2)-2x(128:1)")


def test_set_transformer_spec():
    assert parse_set_transformer_spec("3x(1-16)-256") == (3, 1, 16, 256)
    assert parse_set_transformer_spec("3×(1−16)−256") == (3, 1, 16, 256)


@pytest.mark.parametrize("bad", ["", "2x128", "x(1:1)", "2x(1:1)-"])
def test_bad_cnn_spec(bad):
    with pytest.raises(ConfigError):
        parse_cnn_spec(bad)


def test_defaults_match_reference_table():
    cfg = ScaeConfig().validate()
    assert (cfg.canvas_size, cfg.num_part_capsules, cfg.num_object_capsules) == (40, 24, 24)
    assert (cfg.template_size, cfg.part_noise_scale, cfg.object_noise_scale) == (11, 4.0, 4.0)
    ev = AttackConfig.evaluation()
    assert (ev.n_inner, ev.n_outer, ev.lr, ev.decay1, ev.decay2, ev.adam_eps) == (9, 300, 1.0, 0.9, 0.999, 1e-8)
    tr = AttackConfig.training()
    assert (tr.n_inner, tr.n_outer, tr.beta, tr.alpha_init) == (5, 30, 1.0, 100.0)
    d = DefenseConfig().validate()
    assert (d.interval_k, d.lam, d.n_ep, d.n_ad, d.n_at, d.batch_size) == (1, 0.5, 100, 50, 50, 100)
    assert (d.lr, d.momentum, d.rms_eps, d.lr_decay_rate, d.lr_decay_steps) == (3e-5, 0.9, 1e-6, 0.96, 10000)


@pytest.mark.parametrize("kwargs", [
    {"template_size": 50}, {"num_part_capsules": 0}, {"channels": 3}, {"pose_sigma": 0},
])
def test_invalid_scae_config(kwargs):
    with pytest.raises(ConfigError):
        ScaeConfig(**kwargs).validate()


@pytest.mark.parametrize("kwargs", [
    {"alpha_lb": 100.0}, {"n_outer": 0}, {"eps_clamp": 1.0}, {"eps_clamp": 0.0},
])
def test_invalid_attack_config(kwargs):
    with pytest.raises(ConfigError):
        AttackConfig(**kwargs).validate()


@pytest.mark.parametrize("kwargs", [
    {"regime": "fgsm"}, {"interval_k": -1}, {"lam": 1.5}, {"n_ep": -1}, {"optimizer": "sgd"},
])
def test_invalid_defense_config(kwargs):
    with pytest.raises(ConfigError):
        DefenseConfig(**kwargs).validate()


def test_interval_zero_is_allowed():
    DefenseConfig(interval_k=0).validate()


def test_curve_grid():
    grid = EvalConfig(l2_threshold=4.0).thresholds()
    assert len(grid) == 50 and grid[0] == 0.0 and grid[-1] == pytest.approx(6.0)
    assert all(b > a for a, b in zip(grid, grid[1:]))


def test_flat_config_routing(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"canvas_size": 28, "lr": 1e-3, "n_outer": 30, "generator_n_outer": 3,
                                "l2_threshold": 5.0, "alpha_ub": "inf"}))
    cfg = load_config(path)
    assert cfg.scae.canvas_size == 28
    assert cfg.defense.lr == 1e-3
    assert cfg.attack.n_outer == 30 and cfg.attack.n_inner == 9
    assert cfg.defense.generator.n_outer == 3 and cfg.defense.generator.n_inner == 5
    assert cfg.evaluation.l2_threshold == 5.0
    assert math.isinf(cfg.attack.alpha_ub)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        build_config({"bogus": 1})


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")


def test_flat_dict_round_trip():
    flat = to_flat_dict(DefenseConfig())
    assert flat["generator_n_outer"] == 30 and flat["generator_alpha_ub"] == "inf"
