"""Conditional 2D synthetic datasets and the analytic Gaussian benchmark.

Generators are pure functions of (spec, rng): the same stream replays the
same batch. The Gaussian benchmark supplies closed-form marginal-velocity
and intrinsic-variance oracles for the independent standard-normal coupling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .nnet import ConfigError
from .rng import SplitRng

FAMILIES = ("eight_gaussians", "two_moons", "gaussian_benchmark")
CONDITION_MODES = ("polar_angle", "x_coordinate", "l2_norm")

_VALID_MODES = {
    "eight_gaussians": ("polar_angle", "x_coordinate", "l2_norm"),
    "two_moons": ("x_coordinate",),
    "gaussian_benchmark": (),
}

# Analytic moments of the noiseless two-moons arcs (uniform theta on [0, pi],
# moons equiprobable), used as fixed standardization constants.
_MOONS_MEAN = np.array([0.5, 0.25])
_MOONS_STD = np.array([
    math.sqrt(0.75),
    math.sqrt((1.25 - 2.0 / math.pi) / 2.0 - 0.0625),
])


@dataclass
class DatasetSpec:
    family: str = "eight_gaussians"
    condition_mode: str = "polar_angle"
    radius: float = 2.0
    mode_std: float = 0.2
    moon_noise_std: float = 0.1
    standardize: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.family != "gaussian_benchmark" and \
                self.condition_mode not in _VALID_MODES[self.family]:
            raise ConfigError(
                f"condition_mode {self.condition_mode!r} invalid for {self.family}")

    def to_dict(self):
        return asdict(self)


def sample_eight_gaussians(n: int, spec: DatasetSpec, rng: SplitRng):
    """Eight equal modes on a circle of the configured radius.

    Returns (x1 (n,2), c (n,)). Condition per spec.condition_mode: the mode's
    polar angle, the sample's x-coordinate, or the mode center's l2 norm.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if spec.family != "eight_gaussians":
        raise ConfigError("spec family is not eight_gaussians")
    k = rng.integers(0, 8, size=n)
    theta = 2.0 * math.pi * k / 8.0
    centers = spec.radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    x1 = centers + spec.mode_std * rng.normal((n, 2))
    if spec.condition_mode == "polar_angle":
        c = theta
    elif spec.condition_mode == "x_coordinate":
        c = x1[:, 0].copy()
    else:  # l2_norm of the mode center: constant across modes, fully degenerate
        c = np.linalg.norm(centers, axis=1)
    return x1, c


def sample_two_moons(n: int, spec: DatasetSpec, rng: SplitRng):
    """Two interleaving arcs; condition is the x-coordinate of the point."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if spec.family != "two_moons":
        raise ConfigError("spec family is not two_moons")
    theta = math.pi * rng.uniform(n)
    upper = rng.uniform(n) < 0.5
    x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
    pts = np.stack([x, y], axis=1)
    if spec.moon_noise_std > 0:
        pts = pts + spec.moon_noise_std * rng.normal((n, 2))
    if spec.standardize:
        pts = (pts - _MOONS_MEAN) / _MOONS_STD
    c = pts[:, 0].copy()
    return pts, c


def sample_dataset(n: int, spec: DatasetSpec, rng: SplitRng):
    if spec.family == "eight_gaussians":
        return sample_eight_gaussians(n, spec, rng)
    if spec.family == "two_moons":
        return sample_two_moons(n, spec, rng)
    raise ConfigError(f"family {spec.family} has no conditional sampler")


def gaussian_benchmark_pair(n: int, dim: int, rng: SplitRng):
    """Independent standard-normal endpoint pairs (x0, x1), each (n, dim)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x0 = rng.normal((n, dim))
    x1 = rng.normal((n, dim))
    return x0, x1


def oracle_velocity_gaussian(x, t):
    """Marginal velocity E[x1 - x0 | X_t = x] for the independent N(0,I) coupling."""
    t = np.asarray(t, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    coef = (2.0 * t - 1.0) / (t * t + (1.0 - t) ** 2)
    if coef.ndim == 1 and x.ndim == 2:
        return coef[:, None] * x
    return coef * x


def oracle_intrinsic_variance_gaussian(t, dim: int = 1):
    """E[Var(x1 - x0 | X_t)] at time t for the independent N(0,I) coupling."""
    t = np.asarray(t, dtype=np.float64)
    return dim * (2.0 - (2.0 * t - 1.0) ** 2 / (t * t + (1.0 - t) ** 2))


def dump_csv(path, x1, c, kind="target"):
    """Write a dataset dump with columns kind, c, x, y."""
    with open(path, "w", newline="") as fh:
        fh.write("kind,c,x,y\n")
        for ci, (xi, yi) in zip(c, x1):
            fh.write(f"{kind},{float(ci)!r},{float(xi)!r},{float(yi)!r}\n")
