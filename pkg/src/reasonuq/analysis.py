"""Diagnostics for reasoning-induced confidence inflation.

Confidence shifts between two conditions, answer-mention frequency,
reasoning-length correlations, sample-size ablations and length summaries.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import estimators as est
from . import metrics
from .interventions import find_answer_mentions, predicted_answer_text, reasoning_trace
from .parsing import JudgeConfig, judge_correct
from .records import GenerationRecord, SampleSet

GROUPS = ("becomes_correct", "remains_correct", "becomes_incorrect", "remains_incorrect")
CORRECT_THRESHOLD = 0.5


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class ShiftCell:
    group: str
    increased: float
    decreased: float
    unchanged: float
    n: int


def _is_correct(score: float, threshold: float = CORRECT_THRESHOLD) -> bool:
    return score >= threshold


def _group(before: bool, after: bool) -> str:
    if after:
        return "remains_correct" if before else "becomes_correct"
    return "becomes_incorrect" if before else "remains_incorrect"


def partition_shift(
    base: Mapping[str, tuple[float, float]],
    variant: Mapping[str, tuple[float, float]],
    tolerance: float = 0.0,
    threshold: float = CORRECT_THRESHOLD,
) -> dict[str, ShiftCell]:
    """Share of records whose confidence rose, fell or stayed, per correctness transition.

    Both mappings go from record id to ``(correctness, confidence)``.  With
    the default zero tolerance only bit-identical confidences count as
    unchanged.  Empty groups report all-zero fractions.
    """
    if set(base) != set(variant):
        missing = sorted(set(base) ^ set(variant))
        raise AnalysisError(f"record ids differ between conditions, e.g. {missing[:3]}")
    counts = {g: [0, 0, 0] for g in GROUPS}
    for rid in sorted(base):
        c0, conf0 = base[rid]
        c1, conf1 = variant[rid]
        g = _group(_is_correct(c0, threshold), _is_correct(c1, threshold))
        delta = conf1 - conf0
        if abs(delta) <= tolerance:
            counts[g][2] += 1
        elif delta > 0:
            counts[g][0] += 1
        else:
            counts[g][1] += 1
    out = {}
    for g, (inc, dec, same) in counts.items():
        n = inc + dec + same
        if n == 0:
            out[g] = ShiftCell(g, 0.0, 0.0, 0.0, 0)
        else:
            out[g] = ShiftCell(g, inc / n, dec / n, same / n, n)
    return out


def answer_frequency(trace: str, final_answer: str) -> int:
    return len(find_answer_mentions(trace, final_answer))


def record_answer_frequency(record: GenerationRecord) -> int:
    return answer_frequency(reasoning_trace(record), predicted_answer_text(record))


def frequency_confidence_correlation(
    records: Iterable[GenerationRecord],
    confidences: Mapping[str, float],
    filter: str = "all",
    threshold: float = CORRECT_THRESHOLD,
) -> tuple[float, int]:
    """Spearman correlation between answer mentions in the trace and confidence."""
    if filter not in ("all", "incorrect_only"):
        raise ValueError(f"unknown filter {filter!r}")
    freq, conf = [], []
    for r in records:
        if not r.parse_ok or r.id not in confidences:
            continue
        if filter == "incorrect_only" and _is_correct(r.correct or 0.0, threshold):
            continue
        freq.append(record_answer_frequency(r))
        conf.append(confidences[r.id])
    if len(freq) < 2:
        raise metrics.CorrelationUndefined(f"only {len(freq)} records after filtering")
    return metrics.spearman(freq, conf), len(freq)


def reasoning_length_correlation(
    records: Iterable[GenerationRecord],
    confidences: Mapping[str, float],
    correctness: Mapping[str, float] | None = None,
) -> tuple[float, int]:
    """Partial Spearman of reasoning token count vs confidence, controlling for correctness."""
    length, conf, corr = [], [], []
    for r in records:
        if r.spans is None or r.id not in confidences:
            continue
        length.append(r.reasoning_len)
        conf.append(confidences[r.id])
        c = correctness[r.id] if correctness is not None else r.correct
        corr.append(0.0 if c is None else float(c))
    if not length:
        raise AnalysisError("no records with reasoning spans")
    return metrics.partial_spearman(length, conf, corr), len(length)


def subsample_k(sample_set: SampleSet, k: int, seed: int) -> SampleSet:
    """Keep ``k`` samples chosen by a seeded permutation prefix.

    Prefixes of the same permutation nest, so the subset for ``k`` is always
    contained in the subset for ``k + 1``.  Original sample order is kept.
    """
    K = len(sample_set.samples)
    if not 1 <= k <= K:
        raise ValueError(f"k must lie in [1, {K}], got {k}")
    keep = np.sort(np.random.default_rng(seed).permutation(K)[:k])
    return replace(sample_set, samples=tuple(sample_set.samples[i] for i in keep))


def k_ablation(
    records: Sequence[GenerationRecord],
    sample_sets: Mapping[str, SampleSet],
    ks: Sequence[int],
    seed: int = 0,
    judge: JudgeConfig | None = None,
    estimators: Sequence[str] = est.MULTI_GENERATION,
) -> list[dict]:
    """AUGRC and PRR of the sampling-based estimators for each subsample size.

    The prediction for each record is the majority answer of its subsample,
    so accuracy moves with ``k`` as well.  Records whose subsample has no
    parseable answer count as wrong with minimum confidence.
    """
    judge = judge or JudgeConfig()
    rows = []
    for k in ks:
        conf = {e: [] for e in estimators}
        corr = []
        failed = []
        for r in records:
            ss = sample_sets.get(r.id)
            if ss is None or k > len(ss.samples):
                continue
            sub = subsample_k(ss, k, seed)
            scores = est.score_record(r, sub, None, estimators)
            if scores.majority_answer is None:
                failed.append(len(corr))
                corr.append(0.0)
                for e in estimators:
                    conf[e].append(None)
                continue
            corr.append(judge_correct(scores.majority_answer, r.gold_answers, r.options, judge))
            for e in estimators:
                conf[e].append(scores.confidence(e))
        for e in estimators:
            values = conf[e]
            finite = [v for v in values if v is not None]
            floor = (min(finite) - 1.0) if finite else 0.0
            filled = [floor if v is None else v for v in values]
            row = {"k": k, "estimator": e, "augrc": None, "prr": None, "n": len(filled)}
            if len(filled) >= 2:
                row["augrc"] = metrics.augrc(filled, corr)
                try:
                    row["prr"] = metrics.prr(filled, corr)
                except metrics.PrrUndefined:
                    pass
            rows.append(row)
    return rows


def length_summary(records: Iterable[GenerationRecord]) -> list[dict]:
    """Mean and population std of answer and reasoning token counts per model, dataset and mode."""
    groups: dict[tuple[str, str, str], list[GenerationRecord]] = defaultdict(list)
    for r in records:
        if r.parse_ok and r.spans is not None:
            groups[(r.model, r.dataset, r.mode)].append(r)
    rows = []
    for (model, dataset, mode), rs in sorted(groups.items()):
        ans = np.array([r.spans.answer_len for r in rs], dtype=float)
        rea = np.array([r.spans.reasoning_len for r in rs], dtype=float)
        rows.append({
            "model": model, "dataset": dataset, "mode": mode, "n": len(rs),
            "answer_mean": float(ans.mean()), "answer_std": float(ans.std()),
            "reasoning_mean": float(rea.mean()), "reasoning_std": float(rea.std()),
        })
    return rows
