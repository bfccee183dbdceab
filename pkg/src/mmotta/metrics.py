"""Open-set scores, the threshold detector, and evaluation metrics.

Convention: higher score means "more likely known", and known samples are
the positive class for TPR/FPR.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import EPS_LOG

SCORE_KINDS = ("msp", "max_logit", "energy", "entropy")


class MetricUndefined(ValueError):
    """A metric was requested on an empty or degenerate pool."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    eta: float

    def __post_init__(self):
        if not math.isfinite(self.eta):
            raise ConfigError("eta must be finite")


@dataclass
class EvalSet:
    known_scores: list = field(default_factory=list)
    unknown_scores: list = field(default_factory=list)
    known_correct: list = field(default_factory=list)

    def extend(self, scores, labels, preds) -> None:
        scores, labels, preds = map(np.asarray, (scores, labels, preds))
        known = labels >= 0
        self.known_scores.extend(scores[known].tolist())
        self.unknown_scores.extend(scores[~known].tolist())
        self.known_correct.extend((preds[known] == labels[known]).tolist())


def score_from_arrays(probs: np.ndarray, logits: np.ndarray, kind: str = "msp") -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if kind == "msp":
        return probs.max(axis=1)
    if kind == "max_logit":
        return logits.max(axis=1)
    if kind == "energy":
        m = logits.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    if kind == "entropy":
        return (probs * np.log(probs + EPS_LOG)).sum(axis=1)
    raise ConfigError(f"unknown score kind {kind!r}; choose from {SCORE_KINDS}")


def score(output, kind: str = "msp") -> np.ndarray:
    """Per-sample open-set score from a ForwardOutput (fused prediction)."""
    return score_from_arrays(output.fused_probs.value, output.fused_logits.value, kind)


def detect(scores, cfg: DetectorConfig) -> np.ndarray:
    """True where the sample is declared known (score >= eta)."""
    return np.asarray(scores, dtype=np.float64) >= cfg.eta


def default_eta(calibration_known_scores, quantile: float = 0.05) -> float:
    s = np.asarray(calibration_known_scores, dtype=np.float64)
    if s.size == 0:
        raise MetricUndefined("empty calibration pool")
    return float(np.quantile(s, quantile))


def _pools(known, unknown):
    k = np.asarray(known, dtype=np.float64).ravel()
    u = np.asarray(unknown, dtype=np.float64).ravel()
    if k.size == 0 or u.size == 0:
        raise MetricUndefined("both known and unknown pools must be non-empty")
    return k, u


def auroc(known_scores, unknown_scores) -> float:
    """Mann-Whitney estimate: P(known > unknown) + 0.5 P(tie)."""
    k, u = _pools(known_scores, unknown_scores)
    u_sorted = np.sort(u)
    below = np.searchsorted(u_sorted, k, side="left")
    not_above = np.searchsorted(u_sorted, k, side="right")
    # integer count of (2 * wins + ties) keeps the result exact
    doubled = int((below + not_above).sum())
    return doubled / (2.0 * k.size * u.size)


def fpr_at_tpr(known_scores, unknown_scores, tpr_target: float = 0.95) -> float:
    """FPR on unknowns at the largest threshold t with TPR(t) >= target."""
    k, u = _pools(known_scores, unknown_scores)
    k_desc = np.sort(k)[::-1]
    # TPR(t) = #(k >= t)/n is maximized over the candidate thresholds k_i;
    # the largest qualifying one is the ceil(target*n)-th largest known score
    n = k.size
    start = max(1, math.floor(tpr_target * n) - 1)
    need = next((c for c in range(start, n + 1) if c / n >= tpr_target), n)
    t = k_desc[need - 1]
    return float(np.count_nonzero(u >= t)) / u.size


def accuracy(known_correct) -> float:
    c = np.asarray(known_correct, dtype=bool)
    if c.size == 0:
        raise MetricUndefined("accuracy needs at least one known sample")
    return float(c.mean())


def h_score(acc: float, fpr95: float, auroc_: float, return_flag: bool = False):
    """Harmonic mean of accuracy, AUROC and 1 - FPR95.

    Any zero term makes the harmonic mean degenerate: the result is 0 and,
    with ``return_flag``, the flag is True.
    """
    terms = (acc, auroc_, 1.0 - fpr95)
    for v in (acc, fpr95, auroc_):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"h_score arguments must lie in [0, 1], got {v}")
    if min(terms) <= 0.0:
        return (0.0, True) if return_flag else 0.0
    value = 3.0 / sum(1.0 / t for t in terms)
    return (value, False) if return_flag else value


def evaluate(ev: EvalSet, tpr_target: float = 0.95) -> dict:
    acc = accuracy(ev.known_correct)
    au = auroc(ev.known_scores, ev.unknown_scores)
    fpr = fpr_at_tpr(ev.known_scores, ev.unknown_scores, tpr_target)
    return {"acc": acc, "fpr95": fpr, "auroc": au, "h_score": h_score(acc, fpr, au)}


def histogram(known_scores, unknown_scores, bins: int = 50):
    """Counts of both pools over ``bins`` uniform bins spanning the observed range."""
    k = np.asarray(known_scores, dtype=np.float64)
    u = np.asarray(unknown_scores, dtype=np.float64)
    both = np.concatenate([k, u])
    lo, hi = float(both.min()), float(both.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    return edges, np.histogram(k, edges)[0], np.histogram(u, edges)[0]
