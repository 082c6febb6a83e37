"""Classification-weighted re-ranking of a per-type candidate pool.

Each candidate gets ``alpha * p + beta * sigmoid(raw_score)`` where ``p`` is
the classifier's probability for the candidate's memory type; the best ``k``
by that composite score are kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .classifier import ClassDistribution
from .retriever import RankedCandidate


class EmptyPool(ValueError):
    pass


@dataclass(frozen=True)
class RerankConfig:
    alpha: float = 0.5
    beta: float = 0.5
    k: int = 3
    # min-max scale raw scores within the pool instead of applying the sigmoid
    normalize_scores: bool = False

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")
        if self.k < 1:
            raise ValueError("k must be >= 1")


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def composite_score(p: float, s: float, cfg: RerankConfig = RerankConfig()) -> float:
    return cfg.alpha * p + cfg.beta * sigmoid(s)


def _score_term(pool: Sequence[RankedCandidate], cfg: RerankConfig) -> list[float]:
    if not cfg.normalize_scores:
        return [sigmoid(c.raw_score) for c in pool]
    lo = min(c.raw_score for c in pool)
    hi = max(c.raw_score for c in pool)
    if hi == lo:
        return [0.0] * len(pool)
    return [(c.raw_score - lo) / (hi - lo) for c in pool]


def rerank(
    pool: Sequence[RankedCandidate],
    dist: ClassDistribution,
    cfg: RerankConfig = RerankConfig(),
    memory_dists: Mapping[str, ClassDistribution] | None = None,
) -> list[RankedCandidate]:
    """Top ``cfg.k`` of ``pool`` by composite score.

    By default the probability for candidate *i* is ``dist``'s mass on the
    candidate's own memory type. With ``memory_dists`` (item id -> the
    classifier run on that memory's text) it is instead the memory's
    probability of belonging to the question's predicted type.

    Ties: composite desc, then raw score desc, then item id asc.
    """
    if not pool:
        raise EmptyPool("nothing to re-rank")
    target = dist.label
    term = _score_term(pool, cfg)
    scored = []
    for c, s_term in zip(pool, term):
        p = dist.prob(c.mem_type) if memory_dists is None else memory_dists[c.item_id].prob(target)
        scored.append(c.with_composite(cfg.alpha * p + cfg.beta * s_term))
    scored.sort(key=lambda c: (-c.composite_score, -c.raw_score, c.item_id))
    return scored[: cfg.k]
