"""Global-gradient construction: weighted averaging and Byzantine-robust baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError


def _stack(gradients) -> np.ndarray:
    if len(gradients) == 0:
        raise DomainError("aggregation needs at least one gradient")
    try:
        G = np.asarray([np.asarray(g, dtype=np.float64) for g in gradients])
    except ValueError:
        raise DomainError("gradients differ in dimension") from None
    if G.ndim != 2:
        raise DomainError("gradients differ in dimension")
    return G


@dataclass
class WeightedGradients:
    gradients: list
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if len(w) != len(self.gradients):
            raise DomainError("one weight per gradient required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError(f"weights must be nonnegative and sum to 1 (sum={w.sum()!r})")
        self.weights = w

    @classmethod
    def from_sizes(cls, gradients, sizes):
        """Weights n_k / sum n_j over the given subset."""
        n = np.asarray(sizes, dtype=np.float64)
        return cls(list(gradients), n / n.sum())


def fedavg(wg: WeightedGradients) -> np.ndarray:
    G = _stack(wg.gradients)
    return wg.weights @ G


def coordinate_median(gradients) -> np.ndarray:
    # even counts average the two middle values
    return np.median(_stack(gradients), axis=0)


def trimmed_mean(gradients, beta_percent) -> np.ndarray:
    G = _stack(gradients)
    if not 0 <= beta_percent < 50:
        raise ConfigError("beta must lie in [0, 50)")
    n = len(G)
    k = int(np.floor(beta_percent / 100.0 * n + 1e-9))
    if n - 2 * k < 1:
        raise ConfigError(f"trimming {k} from each side of {n} values leaves nothing")
    S = np.sort(G, axis=0)
    return S[k:n - k].mean(axis=0)


def krum_scores(gradients, f) -> np.ndarray:
    """Sum of squared distances from each gradient to its n - f - 2 nearest neighbours."""
    G = _stack(gradients)
    n = len(G)
    if f < 0 or n < f + 3:
        raise ConfigError(f"Krum needs n >= f + 3 (n={n}, f={f})")
    diff = G[:, None, :] - G[None, :, :]
    D = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(D, np.inf)
    nearest = np.sort(D, axis=1)[:, : n - f - 2]
    return nearest.sum(axis=1)


def krum_order(gradients, f) -> np.ndarray:
    scores = krum_scores(gradients, f)
    return np.lexsort((np.arange(len(scores)), scores))


def krum(gradients, f) -> np.ndarray:
    G = _stack(gradients)
    return G[krum_order(G, f)[0]].copy()


def multi_krum(gradients, f, m_select) -> np.ndarray:
    G = _stack(gradients)
    if not 1 <= m_select <= len(G):
        raise ConfigError(f"m_select={m_select} must lie in [1, {len(G)}]")
    chosen = krum_order(G, f)[:m_select]
    return G[chosen].mean(axis=0)
