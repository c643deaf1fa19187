"""Committee scoring, selection strategies and the middle-band election."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateScore, DomainError

STRATEGY_I = "I"
STRATEGY_II = "II"

# squared distances below this mean the two gradients are numerically equal
DEGENERATE_SQ_DIST = 1e-24


@dataclass
class ScoreTable:
    """``pairwise[i, j]`` is the score training client ``i`` receives from committee member ``j``."""

    training_ids: list
    committee_ids: list
    pairwise: np.ndarray
    final: np.ndarray

    def final_by_id(self) -> dict:
        return {k: float(s) for k, s in zip(self.training_ids, self.final)}

    def csv_rows(self, round_t):
        pair_rows = [
            (round_t, k, c, float(self.pairwise[i, j]))
            for i, k in enumerate(self.training_ids)
            for j, c in enumerate(self.committee_ids)
        ]
        final_rows = [(round_t, k, float(s)) for k, s in zip(self.training_ids, self.final)]
        return pair_rows, final_rows


@dataclass
class RoleAssignment:
    training: list
    committee: list
    aggregation: list = field(default_factory=list)
    idle: list = field(default_factory=list)

    def check(self, C=None, m=None):
        b, c, i = set(self.training), set(self.committee), set(self.idle)
        if b & c or b & i or c & i:
            raise DomainError("training, committee and idle sets overlap")
        if not set(self.aggregation) <= b:
            raise DomainError("aggregation set is not a subset of the training set")
        if C is not None and len(c) != C:
            raise DomainError(f"committee has {len(c)} members, expected {C}")
        if m is not None and len(self.aggregation) != m:
            raise DomainError(f"aggregation set has {len(self.aggregation)} members, expected {m}")


def score_pairwise(g_k, g_c) -> float:
    g_k = np.asarray(g_k, dtype=np.float64)
    g_c = np.asarray(g_c, dtype=np.float64)
    if g_k.shape != g_c.shape:
        raise DomainError(f"gradient shapes differ: {g_k.shape} vs {g_c.shape}")
    diff = g_k - g_c
    sq = float(diff @ diff)
    if sq < DEGENERATE_SQ_DIST:
        raise DegenerateScore(f"gradients coincide (squared distance {sq:.3e})")
    return 1.0 / sq


def score_final(pairwise_row) -> float:
    """C / sum_c (1 / P_k^c), i.e. the reciprocal mean squared distance."""
    row = np.asarray(pairwise_row, dtype=np.float64)
    if row.size == 0:
        raise DomainError("final score needs at least one committee score")
    if np.any(row <= 0):
        raise DomainError("pairwise scores must be positive")
    return float(row.size / np.sum(1.0 / row))


def score_round(training_gradients, committee_gradients, training_ids=None, committee_ids=None) -> ScoreTable:
    G_b = np.atleast_2d(np.asarray(training_gradients, dtype=np.float64))
    G_c = np.atleast_2d(np.asarray(committee_gradients, dtype=np.float64))
    if len(G_b) == 0 or len(G_c) == 0:
        raise DomainError("scoring needs at least one training and one committee gradient")
    if G_b.shape[1] != G_c.shape[1]:
        raise DomainError("training and committee gradients differ in dimension")
    training_ids = list(range(len(G_b))) if training_ids is None else list(training_ids)
    committee_ids = list(range(len(G_c))) if committee_ids is None else list(committee_ids)

    diff = G_b[:, None, :] - G_c[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    bad = np.argwhere(sq < DEGENERATE_SQ_DIST)
    if len(bad):
        i, j = bad[0]
        pair = (training_ids[i], committee_ids[j])
        raise DegenerateScore(f"training client {pair[0]} and committee client {pair[1]} uploaded "
                              f"identical gradients", pair=pair)
    pairwise = 1.0 / sq
    # sorting each row makes the sum independent of committee order
    final = G_c.shape[0] / np.sort(sq, axis=1).sum(axis=1)
    return ScoreTable(training_ids, committee_ids, pairwise, final)


def rank_by_score(scores: dict) -> list:
    """Client ids by descending score, ties broken by ascending id."""
    return sorted(scores, key=lambda k: (-scores[k], k))


def select_aggregation(scores: dict, strategy, m) -> list:
    """Strategy I keeps the m best-scored clients, Strategy II the m worst.

    Either way the result is in descending score order, so element 0 is the leader.
    """
    if not 1 <= m <= len(scores):
        raise ConfigError(f"m={m} must lie in [1, {len(scores)}]")
    for k, s in scores.items():
        if not (math.isfinite(s) and s > 0):
            raise DomainError(f"score of client {k} is not finite positive: {s}")
    ranked = rank_by_score(scores)
    if strategy == STRATEGY_I:
        return ranked[:m]
    if strategy == STRATEGY_II:
        return ranked[len(ranked) - m:]
    raise ConfigError(f"unknown selection strategy {strategy!r}")


def election_window(m, C):
    """1-based ``(start, stop)`` of the C-wide window centred in a list of m.

    When no window is exactly centred (m - C odd) the one nearer the top of
    the ranking is taken.
    """
    if C < 1:
        raise ConfigError("committee size must be >= 1")
    if C > m:
        raise ConfigError(f"cannot elect {C} members from {m} candidates")
    start = (m - C) // 2 + 1
    return start, start + C - 1


def elect_committee(sorted_clients, C, strict=True) -> list:
    """Take C contiguous clients around the middle of a score-sorted list.

    ``strict`` enforces C < len(sorted_clients) as for election from the
    aggregation set; the training-pool variant allows C == len.
    """
    m = len(sorted_clients)
    if strict and C >= m:
        raise ConfigError(f"committee size C={C} must be < m={m}")
    start, stop = election_window(m, C)
    return list(sorted_clients[start - 1:stop])
