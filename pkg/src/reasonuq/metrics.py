"""Selective-generation ranking metrics.

Confidences are oriented so that larger values are accepted first.
Correctness is a score in [0, 1]; the loss of a prediction is
``1 - correctness``, which covers fractional (VQA soft) judging as well as
the binary case.

Tied confidences are handled in closed form: every curve is the average over
all orderings consistent with the ties.  Within a tie block that is partly
accepted, each member is accepted with equal probability, so the expected
accepted loss grows linearly across the block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata

FISHER_Z_95 = 1.96


class MetricError(ValueError):
    pass


class PrrUndefined(MetricError):
    """Oracle and random baseline coincide (all predictions equally correct)."""


class CorrelationUndefined(MetricError):
    pass


class DegenerateDesign(MetricError):
    pass


@dataclass(frozen=True)
class LabeledScore:
    record_id: str
    confidence: float
    correct: float


class Curve(NamedTuple):
    x: np.ndarray
    y: np.ndarray


def _as_inputs(confidences, correct, min_n: int = 1) -> tuple[np.ndarray, np.ndarray]:
    conf = np.asarray(confidences, dtype=float)
    corr = np.asarray(correct, dtype=float)
    if conf.ndim != 1 or conf.shape != corr.shape:
        raise MetricError("confidences and correctness must be 1-d and of equal length")
    if conf.size < min_n:
        raise MetricError(f"need at least {min_n} samples, got {conf.size}")
    if not np.all(np.isfinite(conf)):
        raise MetricError("confidences must be finite")
    if np.any((corr < 0) | (corr > 1)):
        raise MetricError("correctness must lie in [0, 1]")
    return conf, corr


def unpack(scores: Sequence[LabeledScore]) -> tuple[np.ndarray, np.ndarray]:
    return (np.array([s.confidence for s in scores], dtype=float),
            np.array([s.correct for s in scores], dtype=float))


def tie_blocks(confidences) -> list[int]:
    """Sizes of groups of equal confidence, in acceptance order."""
    c = np.sort(np.asarray(confidences, dtype=float))[::-1]
    if c.size == 0:
        return []
    edges = np.flatnonzero(np.diff(c) != 0) + 1
    return np.diff(np.concatenate(([0], edges, [c.size]))).tolist()


def accepted_loss(confidences, losses) -> np.ndarray:
    """Expected summed loss of the ``i`` most confident predictions, i = 0..n."""
    conf = np.asarray(confidences, dtype=float)
    loss = np.asarray(losses, dtype=float)
    order = np.argsort(-conf, kind="stable")
    c, l = conf[order], loss[order]
    n = c.size
    out = np.zeros(n + 1)
    start, base = 0, 0.0
    for size in tie_blocks(c):
        block = l[start:start + size]
        if size == 1:
            out[start + 1] = base + block[0]
        else:
            total = float(block.sum())
            j = np.arange(1, size + 1)
            out[start + 1:start + size + 1] = base + total * j / size
        base = out[start + size]
        start += size
    return out


def _trapezoid(y: np.ndarray) -> float:
    """Trapezoid rule on the uniform grid i/n, i = 0..n."""
    n = y.size - 1
    return float((y.sum() - 0.5 * (y[0] + y[-1])) / n)


def rejection_curve(confidences, correct) -> Curve:
    """Error rate of the retained predictions as the least confident are rejected.

    Point ``i`` rejects a fraction ``i/n``; the fully rejected end point is 0.
    """
    conf, corr = _as_inputs(confidences, correct, min_n=2)
    n = conf.size
    acc = accepted_loss(conf, 1.0 - corr)
    kept = np.arange(n, -1, -1)  # n - i retained at point i
    err = np.zeros(n + 1)
    err[:-1] = acc[kept[:-1]] / kept[:-1]
    return Curve(np.arange(n + 1) / n, err)


def _rejection_area(conf, corr) -> float:
    return _trapezoid(rejection_curve(conf, corr).y)


def prr(confidences, correct) -> float:
    """Prediction rejection ratio.

    Area between the random baseline and the estimator's rejection curve,
    divided by the same area for the oracle ranking.  The baseline is the
    rejection curve of a constant confidence (base error until empty).
    """
    conf, corr = _as_inputs(confidences, correct, min_n=2)
    base = _rejection_area(np.zeros_like(conf), corr)
    oracle = _rejection_area(corr, corr)
    denom = base - oracle
    if denom <= 0:
        raise PrrUndefined("PRR undefined: all predictions are equally correct")
    return (base - _rejection_area(conf, corr)) / denom


def generalized_risk_curve(confidences, correct) -> Curve:
    """Probability of being both accepted and wrong, per coverage i/n."""
    conf, corr = _as_inputs(confidences, correct, min_n=1)
    n = conf.size
    return Curve(np.arange(n + 1) / n, accepted_loss(conf, 1.0 - corr) / n)


def augrc(confidences, correct) -> float:
    conf, corr = _as_inputs(confidences, correct, min_n=2)
    return _trapezoid(generalized_risk_curve(conf, corr).y)


def risk_coverage_curve(confidences, correct) -> Curve:
    """Selective risk (error among accepted) per coverage i/n.

    At coverage 0 nothing is accepted; the point reuses the risk of the first
    accepted prediction.
    """
    conf, corr = _as_inputs(confidences, correct, min_n=1)
    n = conf.size
    acc = accepted_loss(conf, 1.0 - corr)
    risk = np.empty(n + 1)
    risk[1:] = acc[1:] / np.arange(1, n + 1)
    risk[0] = risk[1]
    return Curve(np.arange(n + 1) / n, risk)


def aurc(confidences, correct) -> float:
    conf, corr = _as_inputs(confidences, correct, min_n=2)
    return _trapezoid(risk_coverage_curve(conf, corr).y)


# -- correlations -----------------------------------------------------------------

def _pearson_centered(a: np.ndarray, b: np.ndarray) -> float:
    ss = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if ss == 0:
        raise CorrelationUndefined("zero variance")
    return max(-1.0, min(1.0, float(np.dot(a, b)) / ss))


def spearman(x, y) -> float:
    """Spearman correlation with average ranks for ties."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError("inputs must be 1-d and of equal length")
    if np.unique(x).size < 2 or np.unique(y).size < 2:
        raise CorrelationUndefined("a constant vector has no rank correlation")
    rx, ry = rankdata(x), rankdata(y)
    return _pearson_centered(rx - rx.mean(), ry - ry.mean())


def partial_spearman(x, y, controls) -> float:
    """Rank correlation of x and y after regressing both on the control ranks.

    ``controls`` is a 1-d array (one control) or a 2-d array with one column
    per control.  Controls without variance are dropped; with none left the
    result is the plain Spearman correlation.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(controls, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    n, k = z.shape
    if x.shape != (n,) or y.shape != (n,):
        raise MetricError("x, y and controls must have the same number of rows")
    if n <= k + 2:
        raise MetricError(f"need more than {k + 2} observations, got {n}")
    if np.unique(x).size < 2 or np.unique(y).size < 2:
        raise CorrelationUndefined("a constant vector has no rank correlation")
    rx, ry = rankdata(x), rankdata(y)
    rz = np.column_stack([rankdata(col) for col in z.T])
    rz = rz[:, rz.std(axis=0) > 0]
    if rz.shape[1] == 0:
        return _pearson_centered(rx - rx.mean(), ry - ry.mean())
    design = np.column_stack([np.ones(n), rz])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise DegenerateDesign("control ranks are collinear")
    coef, *_ = np.linalg.lstsq(design, np.column_stack([rx, ry]), rcond=None)
    resid = np.column_stack([rx, ry]) - design @ coef
    return _pearson_centered(resid[:, 0], resid[:, 1])


def fisher_aggregate(correlations: Sequence[tuple[float, int, int]]) -> tuple[float, tuple[float, float]]:
    """Pool correlations in Fisher z space with weights n - 3 - k.

    Each entry is ``(r, n, k_controls)``.  Returns the pooled correlation and
    its 95% confidence interval.
    """
    if not correlations:
        raise MetricError("nothing to aggregate")
    zs, ws = [], []
    for r, n, k in correlations:
        if not abs(r) < 1:
            raise MetricError(f"|r| must be < 1, got {r}")
        w = n - 3 - k
        if w <= 0:
            raise MetricError(f"n={n} too small for {k} controls")
        zs.append(math.atanh(r))
        ws.append(w)
    total = float(sum(ws))
    zbar = math.fsum(w * z for w, z in zip(ws, zs)) / total
    half = FISHER_Z_95 / math.sqrt(total)
    return math.tanh(zbar), (math.tanh(zbar - half), math.tanh(zbar + half))


# -- per-estimator summary --------------------------------------------------------

@dataclass
class EstimatorMetrics:
    n: int
    accuracy: float
    augrc: float | None
    prr: float | None
    aurc: float | None
    spearman: float | None
    n_parse_failures: int = 0
    n_unavailable: int = 0
    n_tie_blocks: int = 0
    n_tied: int = 0


def evaluate(confidences, correct, n_parse_failures: int = 0, n_unavailable: int = 0) -> EstimatorMetrics:
    conf, corr = _as_inputs(confidences, correct, min_n=0)
    n = int(conf.size)
    blocks = tie_blocks(conf)
    out = EstimatorMetrics(
        n=n,
        accuracy=float(corr.mean()) if n else float("nan"),
        augrc=None, prr=None, aurc=None, spearman=None,
        n_parse_failures=n_parse_failures,
        n_unavailable=n_unavailable,
        n_tie_blocks=len(blocks),
        n_tied=int(sum(b for b in blocks if b > 1)),
    )
    if n >= 2:
        out.augrc = augrc(conf, corr)
        out.aurc = aurc(conf, corr)
        try:
            out.prr = prr(conf, corr)
        except PrrUndefined:
            pass
        try:
            out.spearman = spearman(conf, corr)
        except CorrelationUndefined:
            pass
    return out
