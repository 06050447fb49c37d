"""Configuration records for the model, the attack engines, training and evaluation.

All records are flat dataclasses so a single JSON object can populate any of
them: :func:`load_config` splits the keys of one file across the four records.
"""
import dataclasses
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


_CNN_LAYER = re.compile(r"^(\d+)\s*[x×*]\s*\(\s*(\d+)\s*:\s*(\d+)\s*\)$")
_SET_TRANSFORMER = re.compile(
    r"^(\d+)\s*[x×*]\s*\(\s*(\d+)\s*[-−–]\s*(\d+)\s*\)\s*[-−–]\s*(\d+)$")


def parse_cnn_spec(spec):
    """Parse ``"2x(128:2)-2x(128:1)"`` into ``[(128, 2), (128, 2), (128, 1), (128, 1)]``."""
    layers = []
    for group in re.split(r"\s*[-−–]\s*", spec.strip()):
        m = _CNN_LAYER.match(group)
        if m is None:
            raise ConfigError(f"cannot parse part CNN spec {spec!r}")
        repeat, channels, stride = (int(v) for v in m.groups())
        layers.extend([(channels, stride)] * repeat)
    if not layers:
        raise ConfigError(f"empty part CNN spec {spec!r}")
    return layers


def parse_set_transformer_spec(spec):
    """Parse ``"3x(1-16)-256"`` into ``(n_layers, n_heads, n_hidden, n_outputs)``."""
    m = _SET_TRANSFORMER.match(spec.strip())
    if m is None:
        raise ConfigError(f"cannot parse set transformer spec {spec!r}")
    return tuple(int(v) for v in m.groups())


@dataclass
class ScaeConfig:
    canvas_size: int = 40
    num_part_capsules: int = 24
    num_object_capsules: int = 24
    channels: int = 1
    template_size: int = 11
    part_noise_scale: float = 4.0
    object_noise_scale: float = 4.0
    part_cnn: str = "2x(128:2)-2x(128:1)"
    set_transformer: str = "3x(1-16)-256"
    attribute_dim: int = 16
    # weights of the non-reconstruction terms
    part_pose_weight: float = 1.0
    prior_sparsity_weight: float = 1.0
    prior_mass_weight: float = 1.0
    num_classes: int = 10
    posterior_sparsity_weight: float = 1.0
    pose_sigma: float = 0.5

    def validate(self):
        counts = {
            "canvas_size": self.canvas_size,
            "num_part_capsules": self.num_part_capsules,
            "num_object_capsules": self.num_object_capsules,
            "channels": self.channels,
            "template_size": self.template_size,
            "attribute_dim": self.attribute_dim,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.channels != 1:
            raise ConfigError("only single-channel images are supported")
        if self.template_size > self.canvas_size:
            raise ConfigError("template_size must not exceed canvas_size")
        if self.pose_sigma <= 0:
            raise ConfigError("pose_sigma must be positive")
        parse_cnn_spec(self.part_cnn)
        parse_set_transformer_spec(self.set_transformer)
        return self

    @property
    def cnn_layers(self):
        return parse_cnn_spec(self.part_cnn)

    @property
    def set_transformer_layout(self):
        return parse_set_transformer_spec(self.set_transformer)


@dataclass
class AttackConfig:
    alpha_init: float = 100.0
    alpha_lb: float = 0.0
    alpha_ub: float = math.inf
    alpha_blowup: float = 10.0
    n_outer: int = 300
    n_inner: int = 9
    beta: float = 1.0
    eps_clamp: float = 0.999999
    lr: float = 1.0
    decay1: float = 0.9
    decay2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self):
        if not self.alpha_lb < self.alpha_init:
            raise ConfigError("alpha_lb must be below alpha_init")
        if self.n_outer < 1 or self.n_inner < 1:
            raise ConfigError("n_outer and n_inner must be >= 1")
        if not 0.0 < self.eps_clamp < 1.0:
            raise ConfigError("eps_clamp must lie in (0, 1)")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        return self

    @classmethod
    def evaluation(cls, **overrides):
        """Profile of the optimizer-based evasion attack: 9 inner x 300 outer Adam steps."""
        return cls(**{"n_inner": 9, "n_outer": 300, **overrides}).validate()

    @classmethod
    def training(cls, **overrides):
        """Profile of the sign-gradient generator used during training: 5 inner x 30 outer."""
        return cls(**{"n_inner": 5, "n_outer": 30, "beta": 1.0, **overrides}).validate()


REGIMES = ("plain", "at", "ad", "hat", "ntat")


@dataclass
class DefenseConfig:
    regime: str = "plain"
    interval_k: int = 1
    lam: float = 0.5
    n_ep: int = 100
    n_ad: int = 50
    n_at: int = 50
    batch_size: int = 100
    optimizer: str = "rmsprop"
    lr: float = 3e-5
    momentum: float = 0.9
    rms_eps: float = 1e-6
    rms_alpha: float = 0.9
    lr_decay_rate: float = 0.96
    lr_decay_steps: int = 10000
    distill_source: str = "prior"
    linear_epochs: int = 50
    linear_lr: float = 0.1
    checkpoint_every: int = 0
    generator: AttackConfig = field(default_factory=AttackConfig.training)

    def validate(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.interval_k < 0:
            # k = 0 is accepted as the boundary case "every batch adversarial"
            raise ConfigError("interval_k must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if min(self.n_ep, self.n_ad, self.n_at) < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("rmsprop", "adam"):
            raise ConfigError("optimizer must be 'rmsprop' or 'adam'")
        if self.distill_source not in ("prior", "posterior"):
            raise ConfigError("distill_source must be 'prior' or 'posterior'")
        self.generator.validate()
        return self


@dataclass
class EvalConfig:
    n_attack_samples: int = 5000
    l2_threshold: float = 4.0
    classifier: str = "prior_kmeans"
    curve_points: int = 50
    curve_max_factor: float = 1.5

    def validate(self):
        if self.l2_threshold <= 0:
            raise ConfigError("l2_threshold must be positive")
        if self.n_attack_samples < 1:
            raise ConfigError("n_attack_samples must be >= 1")
        if self.classifier not in ("prior_kmeans", "posterior_kmeans"):
            raise ConfigError(f"unknown classifier {self.classifier!r}")
        if self.curve_points < 2:
            raise ConfigError("curve_points must be >= 2")
        return self

    def thresholds(self):
        top = self.curve_max_factor * self.l2_threshold
        n = self.curve_points
        return [top * i / (n - 1) for i in range(n)]


DEFAULT_L2_THRESHOLD = {"mnist": 4.0, "fashion_mnist": 5.0}


def _field_names(cls):
    return {f.name for f in dataclasses.fields(cls)}


def split_config(flat):
    """Distribute the keys of a flat mapping over the four configuration records.

    Keys shared between records (``lr``) go to the training record; attack
    keys may be given with a ``generator_`` or ``attack_`` prefix to target the
    training generator or the evaluation attack respectively.
    """
    flat = dict(flat)
    known = {
        "scae": _field_names(ScaeConfig),
        "defense": _field_names(DefenseConfig) - {"generator"},
        "eval": _field_names(EvalConfig),
        "attack": _field_names(AttackConfig),
    }
    out = {"scae": {}, "defense": {}, "eval": {}, "attack": {}, "generator": {}}
    for key, value in flat.items():
        if key.startswith("generator_") and key[10:] in known["attack"]:
            out["generator"][key[10:]] = value
        elif key.startswith("attack_") and key[7:] in known["attack"]:
            out["attack"][key[7:]] = value
        elif key in known["scae"]:
            out["scae"][key] = value
        elif key in known["defense"]:
            out["defense"][key] = value
        elif key in known["eval"]:
            out["eval"][key] = value
        elif key in known["attack"]:
            out["attack"][key] = value
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    return out


@dataclass
class RunConfig:
    scae: ScaeConfig
    defense: DefenseConfig
    attack: AttackConfig
    evaluation: EvalConfig


def build_config(flat=None):
    parts = split_config(flat or {})
    for key in ("alpha_ub",):
        for section in ("attack", "generator"):
            if parts[section].get(key) in ("inf", "Infinity", None) and key in parts[section]:
                parts[section][key] = math.inf
    generator = AttackConfig.training(**parts["generator"])
    return RunConfig(
        scae=ScaeConfig(**parts["scae"]).validate(),
        defense=DefenseConfig(generator=generator, **parts["defense"]).validate(),
        attack=AttackConfig.evaluation(**parts["attack"]),
        evaluation=EvalConfig(**parts["eval"]).validate(),
    )


def load_config(path):
    """Read a flat JSON object from ``path`` and build a :class:`RunConfig`."""
    path = Path(path)
    try:
        flat = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(flat, dict):
        raise ConfigError(f"config {path} must hold a flat JSON object")
    return build_config(flat)


def to_flat_dict(obj):
    """Flatten a configuration record into JSON-safe primitives."""
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out.update({f"{f.name}_{k}": v for k, v in to_flat_dict(value).items()})
        elif isinstance(value, float) and math.isinf(value):
            out[f.name] = "inf"
        else:
            out[f.name] = value
    return out
