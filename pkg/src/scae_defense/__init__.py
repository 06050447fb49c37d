"""Stacked capsule autoencoder workbench: evasion attack, robust training regimes and evaluation."""
from .config import AttackConfig, DefenseConfig, EvalConfig, ScaeConfig, build_config, load_config

__version__ = "0.1.0"

__all__ = ["AttackConfig", "DefenseConfig", "EvalConfig", "ScaeConfig", "build_config", "load_config"]
