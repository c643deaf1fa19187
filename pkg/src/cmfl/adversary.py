"""Malicious-client assignment and the gradient attacks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

NONE = "none"
SCALING = "scaling"
SAME_VALUE = "same_value"
BACK_GRADIENT = "back_gradient"
ATTACK_KINDS = (NONE, SCALING, SAME_VALUE, BACK_GRADIENT)


@dataclass(frozen=True)
class AttackSpec:
    kind: str = NONE
    epsilon_percent: float = 0.0
    scale_low: float = 0.5
    per_element: bool = True
    attack_committee: bool = True

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack {self.kind!r}; choose from {ATTACK_KINDS}")
        if not 0 <= self.epsilon_percent < 100:
            raise ConfigError("epsilon must lie in [0, 100)")
        if self.kind == SCALING and not 0 < self.scale_low < 1:
            raise ConfigError("gradient-scaling lower bound a must lie in (0, 1)")


def malicious_count(K, epsilon_percent) -> int:
    """round(eps% * K), halves rounded up like every other derived count."""
    return int(np.floor(epsilon_percent / 100.0 * K + 0.5))


def assign_malicious(K, epsilon_percent, seed) -> frozenset:
    if not 0 <= epsilon_percent < 100:
        raise ConfigError("epsilon must lie in [0, 100)")
    n_bad = malicious_count(K, epsilon_percent)
    rng = np.random.default_rng(seed)
    return frozenset(int(k) for k in rng.choice(K, size=n_bad, replace=False))


def apply_attack(gradient, spec: AttackSpec, rng) -> np.ndarray:
    g = np.asarray(gradient, dtype=np.float64)
    if spec.kind == NONE:
        return g.copy()
    if spec.kind == SAME_VALUE:
        return np.zeros_like(g)
    if spec.kind == BACK_GRADIENT:
        return -g
    # lambda ~ U[a, 1), one per element or one for the whole vector
    size = g.shape if spec.per_element else None
    lam = rng.uniform(spec.scale_low, 1.0, size=size)
    return g * lam
