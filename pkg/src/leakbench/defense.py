"""Output perturbation defenses applied to victim predictions before release.

Every transform takes a probability vector (or logits, for the temperature
family) and returns a probability vector.  Tie-breaking is fixed: the "most
likely" class is the lowest index among maxima, the "least likely" class is
the highest index among minima.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import ClassVar

import numpy as np

from leakbench.errors import ConfigError
from leakbench.textmodel import PROB_FLOOR, softmax


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DefenseConfig:
    kind: ClassVar[str] = ""
    stochastic: ClassVar[bool] = False
    training_time: ClassVar[bool] = False

    def to_dict(self) -> dict:
        return {"kind": self.kind, **{f.name: getattr(self, f.name) for f in fields(self)}}

    @property
    def label(self) -> str:
        """Short human-readable tag used in report rows."""
        args = ",".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self) if f.name != "seed")
        return f"{self.kind}({args})" if args else self.kind


@dataclass(frozen=True)
class NoDefense(DefenseConfig):
    kind: ClassVar[str] = "none"


@dataclass(frozen=True)
class Temperature(DefenseConfig):
    tau: float = 1.0
    kind: ClassVar[str] = "temperature"

    def __post_init__(self):
        if not self.tau >= 0:
            raise ConfigError("temperature tau must be >= 0")


@dataclass(frozen=True)
class HardLabel(DefenseConfig):
    kind: ClassVar[str] = "hard_label"


@dataclass(frozen=True)
class GaussianNoise(DefenseConfig):
    """``sigma`` is the variance of the additive noise."""

    sigma: float = 0.01
    seed: int = 0
    kind: ClassVar[str] = "gaussian"
    stochastic: ClassVar[bool] = True

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ConfigError("sigma must be >= 0")


@dataclass(frozen=True)
class ReverseSigmoid(DefenseConfig):
    beta: float = 0.2
    gamma: float = 0.5
    noise: float = 0.0
    seed: int = 0
    kind: ClassVar[str] = "reverse_sigmoid"

    def __post_init__(self):
        if not self.beta >= 0:
            raise ConfigError("beta must be >= 0")
        if not self.gamma > 0:
            raise ConfigError("gamma must be > 0")
        if not self.noise >= 0:
            raise ConfigError("noise must be >= 0")

    @property
    def stochastic(self) -> bool:  # type: ignore[override]
        return self.noise > 0


@dataclass(frozen=True)
class TopK(DefenseConfig):
    k: int = 1
    kind: ClassVar[str] = "top_k"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("K must be >= 1")


@dataclass(frozen=True)
class MostLeast(DefenseConfig):
    epsilon: float = 1e-5
    kind: ClassVar[str] = "most_least"

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ConfigError("epsilon must lie in (0, 0.5)")


@dataclass(frozen=True)
class NastyTeacher(DefenseConfig):
    omega: float = 0.1
    tau_nt: float = 4.0
    kind: ClassVar[str] = "nasty_teacher"
    training_time: ClassVar[bool] = True

    def __post_init__(self):
        if not self.omega >= 0:
            raise ConfigError("omega must be >= 0")
        if not self.tau_nt > 0:
            raise ConfigError("tau_nt must be > 0")


DEFENSES: dict[str, type[DefenseConfig]] = {
    cls.kind: cls
    for cls in (NoDefense, Temperature, HardLabel, GaussianNoise, ReverseSigmoid, TopK, MostLeast, NastyTeacher)
}


def defense_from_dict(d: dict | None) -> DefenseConfig:
    if d is None:
        return NoDefense()
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in DEFENSES:
        raise ConfigError(f"unknown defense kind {kind!r}")
    try:
        return DEFENSES[kind](**d)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for defense {kind!r}: {exc}") from None


# --------------------------------------------------------------------------
# transforms
# --------------------------------------------------------------------------


def _most(p: np.ndarray) -> int:
    return int(np.argmax(p))


def _least(p: np.ndarray) -> int:
    return int(len(p) - 1 - np.argmin(p[::-1]))


def _renormalize(q: np.ndarray) -> np.ndarray:
    q = np.clip(q, 0.0, None)
    total = q.sum()
    if total <= 0 or not np.isfinite(total):
        return np.full(len(q), 1.0 / len(q))
    return q / total


def one_hot(index: int, size: int) -> np.ndarray:
    out = np.zeros(size)
    out[index] = 1.0
    return out


def temperature_scale(logits, tau: float) -> np.ndarray:
    """Softmax at temperature ``tau``; ``tau == 0`` releases the hard label."""
    if not tau >= 0:
        raise ConfigError("temperature tau must be >= 0")
    z = np.asarray(logits, dtype=np.float64)
    if tau == 0:
        softmax(z)  # validates finiteness
        return one_hot(_most(z), len(z))
    return softmax(z, tau)


def gaussian_perturb(p, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add Gaussian noise of variance ``sigma``, clip at zero and renormalise."""
    if not sigma >= 0:
        raise ConfigError("sigma must be >= 0")
    p = np.asarray(p, dtype=np.float64)
    if sigma == 0:
        return p.copy()
    return _renormalize(p + rng.normal(0.0, np.sqrt(sigma), size=p.shape))


def reverse_sigmoid(p, beta: float, gamma: float, noise: float = 0.0, rng: np.random.Generator | None = None):
    """Reverse-sigmoid softening with optional uniform noise on non-argmax entries.

    :param p: probability vector.
    :param beta: magnitude of the perturbation.
    :param gamma: slope applied to the log-odds before the sigmoid.
    :param noise: upper bound of ``U(0, noise)`` added to non-argmax entries.
    :param rng: generator for the noise; required only when ``noise > 0``.
    """
    if not beta >= 0 or not gamma > 0 or not noise >= 0:
        raise ConfigError("reverse sigmoid needs beta >= 0, gamma > 0, noise >= 0")
    p = np.asarray(p, dtype=np.float64)
    if beta == 0 and noise == 0:
        return p.copy()
    y = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    log_odds = np.log(y) - np.log1p(-y)
    perturbed = p - beta * (1.0 / (1.0 + np.exp(-gamma * log_odds)) - 0.5)
    if noise > 0:
        if rng is None:
            raise ConfigError("reverse sigmoid noise requires an rng")
        mask = np.ones(len(p), dtype=bool)
        mask[_most(p)] = False
        perturbed[mask] += rng.uniform(0.0, noise, size=int(mask.sum()))
    return _renormalize(perturbed)


def top_k_truncate(p, k: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not 1 <= k <= len(p):
        raise ConfigError(f"K={k} out of range for {len(p)} classes")
    if k == len(p):
        return p.copy()
    keep = np.argsort(-p, kind="stable")[:k]
    out = np.zeros_like(p)
    out[keep] = p[keep]
    return _renormalize(out)


def most_least(p, epsilon: float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if len(p) < 2:
        raise ConfigError("most-least needs at least two classes")
    if not 0.0 < epsilon < 0.5:
        raise ConfigError("epsilon must lie in (0, 0.5)")
    out = np.zeros_like(p)
    hi = 0.5 + epsilon
    out[_most(p)] = hi
    # 1 - hi is exact for hi in [0.5, 1], so the pair sums to exactly 1.
    out[_least(p)] = 1.0 - hi
    return out


def apply_defense(logits, cfg: DefenseConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Turn raw logits into the posterior the API releases."""
    logits = np.asarray(logits, dtype=np.float64)
    if cfg.training_time:
        raise ConfigError("training-time defense cannot be applied to outputs")
    if isinstance(cfg, NoDefense):
        return softmax(logits, 1.0)
    if isinstance(cfg, Temperature):
        return temperature_scale(logits, cfg.tau)
    if isinstance(cfg, HardLabel):
        return temperature_scale(logits, 0.0)
    p = softmax(logits, 1.0)
    if isinstance(cfg, GaussianNoise):
        if rng is None and cfg.sigma > 0:
            raise ConfigError("gaussian defense requires an rng")
        return gaussian_perturb(p, cfg.sigma, rng)
    if isinstance(cfg, ReverseSigmoid):
        return reverse_sigmoid(p, cfg.beta, cfg.gamma, cfg.noise, rng)
    if isinstance(cfg, TopK):
        return top_k_truncate(p, cfg.k)
    if isinstance(cfg, MostLeast):
        return most_least(p, cfg.epsilon)
    raise ConfigError(f"unsupported defense {cfg!r}")
