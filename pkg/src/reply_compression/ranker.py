"""
Online path: score cached responses against a message with the LM bias, cluster the
response set lexically and pick diverse suggestions; tune the bias weight.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import FrozenSet, Iterable, List, Optional, Sequence, Tuple

import torch

from . import tensor as T
from .corpus import MRPair, alnum_tokens
from .evaluation import EvalInstance, WRougeWeights, w_rouge
from .response_set import ResponseSet, check_cache

logger = logging.getLogger(__name__)

BLOCK_SIZE = 3


@dataclass(frozen=True)
class RankedCandidate:
    index: int
    text: str
    match_score: float
    lm_score: float
    final_score: float
    cluster_id: int = -1


@dataclass(frozen=True)
class SuggestionBlock:
    candidates: Tuple[RankedCandidate, ...]
    shortfall: bool = False

    @property
    def texts(self) -> Tuple[str, ...]:
        return tuple(c.text for c in self.candidates)

    @property
    def cluster_ids(self) -> Tuple[int, ...]:
        return tuple(c.cluster_id for c in self.candidates)


# ==========================================
# CLUSTERING
# ==========================================
@lru_cache(maxsize=None)
def default_stopwords() -> FrozenSet[str]:
    text = resources.files("reply_compression").joinpath("data/stopwords.txt").read_text(
        encoding="utf-8"
    )
    return frozenset(w.strip().lower() for w in text.splitlines() if w.strip())


def jaccard(a: FrozenSet[str], b: FrozenSet[str]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


@lru_cache(maxsize=64)
def _leader_clusters(
    texts: Tuple[str, ...], tau: float, stopwords: FrozenSet[str]
) -> Tuple[int, ...]:
    leaders: List[FrozenSet[str]] = []
    ids = []
    for text in texts:
        words = frozenset(alnum_tokens(text)) - stopwords
        for cid, leader in enumerate(leaders):
            if jaccard(words, leader) >= tau:
                ids.append(cid)
                break
        else:
            leaders.append(words)
            ids.append(len(leaders) - 1)
    return tuple(ids)


def cluster_responses(
    response_set: ResponseSet, tau: float = 0.5, stopwords: Optional[Iterable[str]] = None
) -> Tuple[int, ...]:
    """
    Leader clustering over content-word sets, scanning entries in set order
    (frequency descending).

    Parameters:
    - response_set (ResponseSet): candidates to cluster.
    - tau (float): Jaccard threshold in [0, 1] for joining a leader's cluster.
    - stopwords (Iterable[str]): overrides the bundled English list.

    Returns:
    - tuple[int, ...]: cluster id per entry.
    """
    if not len(response_set):
        raise ValueError("Cannot cluster an empty response set")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    stop = default_stopwords() if stopwords is None else frozenset(w.lower() for w in stopwords)
    clusters = _leader_clusters(response_set.texts, float(tau), stop)
    logger.debug(f"{len(response_set)} responses in {max(clusters) + 1} clusters at tau={tau}")
    return clusters


# ==========================================
# RANKING
# ==========================================
def _rank_vector(
    message_vec: torch.Tensor,
    response_set: ResponseSet,
    alpha: float,
    cluster_ids: Optional[Sequence[int]],
) -> List[RankedCandidate]:
    match = T.matmul(response_set.cache.encodings, message_vec).tolist()
    lm = response_set.lm_scores
    final = [m + alpha * s for m, s in zip(match, lm)]
    order = sorted(range(len(final)), key=lambda i: (-final[i], i))
    return [
        RankedCandidate(
            index=i,
            text=response_set.entries[i].text,
            match_score=match[i],
            lm_score=lm[i],
            final_score=final[i],
            cluster_id=cluster_ids[i] if cluster_ids is not None else -1,
        )
        for i in order
    ]


def rank(
    model,
    message: str,
    response_set: ResponseSet,
    alpha: float,
    cluster_ids: Optional[Sequence[int]] = None,
) -> List[RankedCandidate]:
    """
    Scores every cached response: final = message . response + alpha * lm_score.
    Sorted by final score descending, ties by entry index.
    """
    check_cache(model, response_set)
    vec = model.encode_messages([message])[0]
    return _rank_vector(vec, response_set, alpha, cluster_ids)


def _pick_diverse(ranked: Sequence[RankedCandidate], size: int) -> SuggestionBlock:
    taken, used = [], set()
    for candidate in ranked:
        if candidate.cluster_id in used:
            continue
        taken.append(candidate)
        used.add(candidate.cluster_id)
        if len(taken) == size:
            break
    return SuggestionBlock(tuple(taken), shortfall=len(taken) < size)


def suggest(
    model,
    message: str,
    response_set: ResponseSet,
    alpha: float = 1.0,
    tau: float = 0.5,
    *,
    stopwords: Optional[Iterable[str]] = None,
    size: int = BLOCK_SIZE,
) -> SuggestionBlock:
    """Takes the best-ranked candidate of each not-yet-used cluster until ``size`` are chosen."""
    if not len(response_set):
        raise ValueError("Cannot suggest from an empty response set")
    clusters = cluster_responses(response_set, tau, stopwords)
    return _pick_diverse(rank(model, message, response_set, alpha, clusters), size)


def suggest_many(
    model,
    messages: Sequence[str],
    response_set: ResponseSet,
    alpha: float = 1.0,
    tau: float = 0.5,
    *,
    stopwords: Optional[Iterable[str]] = None,
) -> List[SuggestionBlock]:
    """Batched ``suggest``: one message-encoder pass for all messages."""
    if not len(response_set):
        raise ValueError("Cannot suggest from an empty response set")
    if not messages:
        return []
    check_cache(model, response_set)
    clusters = cluster_responses(response_set, tau, stopwords)
    vecs = model.encode_messages(list(messages))
    return [
        _pick_diverse(_rank_vector(vecs[i], response_set, alpha, clusters), BLOCK_SIZE)
        for i in range(len(messages))
    ]


def tune_alpha(
    model,
    validation: Sequence[MRPair],
    response_set: ResponseSet,
    grid: Iterable[float],
    tau: float = 0.5,
    weights: WRougeWeights = WRougeWeights(),
) -> float:
    """
    Picks the grid value maximizing mean w-Rouge of suggestion blocks on ``validation``.
    Ties go to the smaller value; without validation pairs the smallest value wins.
    """
    values = sorted(set(float(a) for a in grid))
    if not values:
        raise ValueError("alpha grid is empty")
    if len(values) == 1:
        return values[0]
    if not validation:
        logger.warning(f"No validation pairs to tune alpha on; using alpha={values[0]}")
        return values[0]
    check_cache(model, response_set)
    clusters = cluster_responses(response_set, tau)
    vecs = model.encode_messages([p.message for p in validation])

    best_alpha, best_score = values[0], -math.inf
    for alpha in values:
        instances = [
            EvalInstance(
                pair.reply,
                _pick_diverse(_rank_vector(vecs[i], response_set, alpha, clusters), BLOCK_SIZE).texts,
            )
            for i, pair in enumerate(validation)
        ]
        score = w_rouge(instances, weights)
        logger.debug(f"alpha={alpha}: validation w-Rouge {score:.5f}")
        if score > best_score:
            best_alpha, best_score = alpha, score
    logger.info(f"Selected alpha={best_alpha} (validation w-Rouge {best_score:.5f})")
    return best_alpha
