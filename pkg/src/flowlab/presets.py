"""Preset catalog: one named, reproducible experiment per scenario.

fig2a..fig2e cover the five source designs (fixed Gaussian, deterministic,
unregularized conditional Gaussian, standard-KL, variance-regularized) and
accept either 2D dataset. The remaining presets cover the unconditional-flow
comparison, the two ill-conditioned condition choices, the stop-gradient
variance explosion, and the analysis-heavy runs (gradient-variance probe,
few-step sweep, reflow fine-tuning).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .datasets import DatasetSpec
from .flow import LossWeights, TrainConfig
from .nnet import ConfigError

LAMBDA_VARREG = 5.0
LAMBDA_VARREG_EXPLODE = 1.0


@dataclass
class Preset:
    name: str
    config: TrainConfig
    analyses: list = field(default_factory=list)  # subset of: sweep, gradvar, reflow


def _dataset(name: str, condition_mode=None) -> DatasetSpec:
    if name == "eight_gaussians":
        return DatasetSpec(family="eight_gaussians",
                           condition_mode=condition_mode or "polar_angle")
    if name == "two_moons":
        return DatasetSpec(family="two_moons", condition_mode="x_coordinate")
    raise ConfigError(f"unknown dataset {name!r}")


def _fig2_config(variant: str, dataset: str, seed: int) -> TrainConfig:
    ds = _dataset(dataset)
    if variant == "a":
        return TrainConfig(dataset=ds, source_kind="fixed_gaussian",
                           regularizer="none", seed=seed)
    if variant == "b":
        return TrainConfig(dataset=ds, source_kind="deterministic",
                           regularizer="none", seed=seed)
    if variant == "c":
        return TrainConfig(dataset=ds, source_kind="conditional_gaussian",
                           regularizer="none", seed=seed)
    if variant == "d":
        return TrainConfig(dataset=ds, source_kind="conditional_gaussian",
                           regularizer="standard_kl",
                           weights=LossWeights(lambda_varreg=LAMBDA_VARREG),
                           seed=seed)
    if variant == "e":
        return TrainConfig(dataset=ds, source_kind="conditional_gaussian",
                           regularizer="varreg",
                           weights=LossWeights(lambda_varreg=LAMBDA_VARREG),
                           seed=seed)
    raise ConfigError(f"unknown fig2 variant {variant!r}")


def build_preset(name: str, dataset: str = "eight_gaussians",
                 seed: int = 0) -> Preset:
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}")
    if name.startswith("fig2"):
        return Preset(name, _fig2_config(name[-1], dataset, seed))
    if name == "uncond_flow":
        cfg = _fig2_config("e", dataset, seed)
        cfg.condition_injected = False
        return Preset(name, cfg)
    if name == "illcond_l2":
        cfg = _fig2_config("e", "eight_gaussians", seed)
        cfg.dataset = _dataset("eight_gaussians", "l2_norm")
        return Preset(name, cfg)
    if name == "illcond_xcoord":
        cfg = _fig2_config("e", "eight_gaussians", seed)
        cfg.dataset = _dataset("eight_gaussians", "x_coordinate")
        return Preset(name, cfg)
    if name == "stopgrad_explode":
        cfg = TrainConfig(
            dataset=_dataset(dataset), source_kind="conditional_gaussian",
            regularizer="varreg",
            weights=LossWeights(lambda_varreg=LAMBDA_VARREG_EXPLODE,
                                stop_grad_delta=True),
            condition_injected=False, seed=seed)
        return Preset(name, cfg)
    if name == "gradvar":
        return Preset(name, _fig2_config("e", dataset, seed),
                      analyses=["gradvar"])
    if name == "fewstep":
        return Preset(name, _fig2_config("e", dataset, seed),
                      analyses=["sweep"])
    if name == "reflow":
        return Preset(name, _fig2_config("e", dataset, seed),
                      analyses=["reflow", "sweep"])
    raise ConfigError(f"unknown preset {name!r}")


PRESET_NAMES = (
    "fig2a", "fig2b", "fig2c", "fig2d", "fig2e",
    "uncond_flow", "illcond_l2", "illcond_xcoord", "stopgrad_explode",
    "gradvar", "fewstep", "reflow",
)
