"""
Relevance metrics (Rouge-n F-measure, best-of-block Rouge-n and weighted w-Rouge),
two-sided t-tests and run comparison reports.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import betainc

from .corpus import alnum_tokens

logger = logging.getLogger(__name__)

SIGNIFICANCE_LEVEL = 0.05
EVAL_COLUMNS = [
    "config",
    "total_params",
    "trainable_params",
    "wall_clock_s",
    "w_rouge",
    "p_vs_baseline",
    "significant",
]


# ==========================================
# ROUGE
# ==========================================
def ngram_counts(text: str, n: int) -> Counter:
    tokens = alnum_tokens(text)
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(golden: str, candidate: str, n: int) -> float:
    """
    Rouge-n F-measure with clipped n-gram overlap; 0 when either side has no n-grams.
    """
    if n not in (1, 2, 3):
        raise ValueError(f"n must be 1, 2 or 3, got {n}")
    gold = ngram_counts(golden, n)
    cand = ngram_counts(candidate, n)
    if not gold or not cand:
        return 0.0
    overlap = sum((gold & cand).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(cand.values())
    recall = overlap / sum(gold.values())
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class EvalInstance:
    golden: str
    predictions: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "predictions", tuple(self.predictions))
        if not 1 <= len(self.predictions) <= 3:
            raise ValueError(
                f"An evaluation instance needs 1..3 predictions, got {len(self.predictions)}"
            )


def rouge_n_max(instance: EvalInstance, n: int) -> float:
    return max(rouge_n(instance.golden, p, n) for p in instance.predictions)


@dataclass(frozen=True)
class WRougeWeights:
    """Weights of Rouge-1/2/3; normalized to sum to 1 on construction."""

    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0

    def __post_init__(self):
        values = (self.w1, self.w2, self.w3)
        if any(w < 0 for w in values):
            raise ValueError(f"w-Rouge weights must be non-negative, got {values}")
        total = sum(values)
        if total <= 0:
            raise ValueError("At least one w-Rouge weight must be positive")
        for name, w in zip(("w1", "w2", "w3"), values):
            object.__setattr__(self, name, w / total)

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.w1, self.w2, self.w3)


def per_instance_w_rouge(
    instance: EvalInstance, weights: WRougeWeights = WRougeWeights()
) -> float:
    return sum(w * rouge_n_max(instance, n) for n, w in enumerate(weights.as_tuple(), 1))


def w_rouge(
    instances: Sequence[EvalInstance], weights: WRougeWeights = WRougeWeights()
) -> float:
    """Macro-average of the per-instance weighted Rouge-n max."""
    if not instances:
        raise ValueError("w_rouge needs at least one instance")
    return float(np.mean([per_instance_w_rouge(i, weights) for i in instances]))


# ==========================================
# SIGNIFICANCE
# ==========================================
@dataclass(frozen=True)
class SignificanceResult:
    mean_a: float
    mean_b: float
    t: float
    df: float
    p_value: float

    @property
    def significant(self) -> bool:
        return self.p_value <= SIGNIFICANCE_LEVEL


def _two_sided_p(t: float, df: float) -> float:
    # P(|T| >= |t|) for Student's t with df degrees of freedom
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def t_test_two_sided(sample_a: Iterable[float], sample_b: Iterable[float]) -> SignificanceResult:
    """
    Welch's unequal-variance t-test with Welch-Satterthwaite degrees of freedom.

    Two constant samples give p = 1.0 when their means agree and p = 0.0 otherwise.
    """
    a = np.asarray(list(sample_a), dtype=np.float64)
    b = np.asarray(list(sample_b), dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError(f"Each sample needs at least 2 values, got {a.size} and {b.size}")
    mean_a, mean_b = float(a.mean()), float(b.mean())
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 == 0:
        df = float(a.size + b.size - 2)
        if mean_a == mean_b:
            return SignificanceResult(mean_a, mean_b, 0.0, df, 1.0)
        return SignificanceResult(
            mean_a, mean_b, math.copysign(math.inf, mean_a - mean_b), df, 0.0
        )
    t = (mean_a - mean_b) / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return SignificanceResult(mean_a, mean_b, float(t), float(df), _two_sided_p(t, df))


def paired_t_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> SignificanceResult:
    """Two-sided paired t-test over per-instance differences a - b."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("Paired samples must have the same length")
    if a.size < 2:
        raise ValueError(f"Paired test needs at least 2 pairs, got {a.size}")
    diff = a - b
    mean_d = float(diff.mean())
    sd = float(diff.std(ddof=1))
    df = float(a.size - 1)
    if sd == 0:
        if mean_d == 0:
            return SignificanceResult(float(a.mean()), float(b.mean()), 0.0, df, 1.0)
        return SignificanceResult(
            float(a.mean()), float(b.mean()), math.copysign(math.inf, mean_d), df, 0.0
        )
    t = mean_d / (sd / math.sqrt(a.size))
    return SignificanceResult(float(a.mean()), float(b.mean()), float(t), df, _two_sided_p(t, df))


# ==========================================
# RUN COMPARISON
# ==========================================
@dataclass(frozen=True)
class RunSummary:
    config: str
    wall_clock_s: float
    instance_scores: Tuple[float, ...]
    test_hash: str
    total_params: int = 0
    trainable_params: int = 0

    @property
    def w_rouge(self) -> float:
        return float(np.mean(self.instance_scores)) if self.instance_scores else float("nan")

    @classmethod
    def from_report(cls, config: str, report, instance_scores, test_hash: str) -> "RunSummary":
        return cls(
            config=config,
            wall_clock_s=report.wall_clock_to_best,
            instance_scores=tuple(float(s) for s in instance_scores),
            test_hash=test_hash,
            total_params=report.total_params,
            trainable_params=report.trainable_params,
        )


@dataclass(frozen=True)
class RunComparison:
    baseline: str
    candidate: str
    delta_wall_clock_pct: float
    delta_w_rouge_pct: float
    significance: SignificanceResult
    verdict: str

    @property
    def dagger(self) -> bool:
        return self.significance.significant

    @property
    def marker(self) -> str:
        return "†" if self.dagger else ""


def _pct_change(value: float, base: float) -> float:
    if base == 0:
        return 0.0 if value == 0 else math.copysign(math.inf, value)
    return 100.0 * (value - base) / base


def compare_runs(baseline: RunSummary, candidate: RunSummary) -> RunComparison:
    """
    Compares a candidate run against a baseline evaluated on the same test instances.

    Verdicts: "relevance drop" / "relevance gain" when the paired test is significant,
    otherwise "compression success" if wall clock fell, "no change" if nothing moved,
    else "no time gain".
    """
    if baseline.test_hash != candidate.test_hash or len(baseline.instance_scores) != len(
        candidate.instance_scores
    ):
        raise ValueError(
            f"Runs '{baseline.config}' and '{candidate.config}' were evaluated on different test sets"
        )
    sig = paired_t_test(candidate.instance_scores, baseline.instance_scores)
    d_wc = _pct_change(candidate.wall_clock_s, baseline.wall_clock_s)
    d_rouge = _pct_change(candidate.w_rouge, baseline.w_rouge)
    if sig.significant:
        verdict = "relevance drop" if sig.mean_a < sig.mean_b else "relevance gain"
    elif d_wc < 0:
        verdict = "compression success"
    elif d_wc == 0 and d_rouge == 0:
        verdict = "no change"
    else:
        verdict = "no time gain"
    return RunComparison(baseline.config, candidate.config, d_wc, d_rouge, sig, verdict)


def write_evaluation_csv(
    rows: Union[pd.DataFrame, Sequence[Mapping]], path
) -> pd.DataFrame:
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
    missing = [c for c in EVAL_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"Evaluation rows are missing columns: {missing}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame[EVAL_COLUMNS].to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)} evaluation rows to {path}")
    return frame[EVAL_COLUMNS]
