"""Uncertainty estimators over answer tokens, samples and self-probes.

Raw values keep their natural orientation (entropies and perplexity grow
with uncertainty).  :func:`to_confidence` maps each of them onto a common
"higher means accept first" scale before any ranking metric sees them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .parsing import majority_vote
from .records import GenerationRecord, SampleSet, SrcProbe, TokenScore

ESTIMATORS = ("msp", "ppl", "mte", "mc_se", "mc_nse", "src", "consistency")
SINGLE_GENERATION = ("msp", "ppl", "mte", "src")
MULTI_GENERATION = ("mc_se", "mc_nse", "consistency")

_IDENTITY = {"msp", "src", "consistency"}
_NEGATED = {"ppl", "mte", "mc_se", "mc_nse"}


class EstimatorUnavailable(ValueError):
    """The inputs for an estimator are missing for this record."""


def _checked_logprobs(values: Sequence[float]) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("empty answer span")
    if np.any(arr > 0) or np.any(np.isnan(arr)):
        raise ValueError("log-probabilities must be ≤ 0")
    return arr


def log_msp(answer_logprobs: Sequence[float]) -> float:
    """Log of the joint answer probability; no underflow for long answers."""
    return float(math.fsum(_checked_logprobs(answer_logprobs)))


def msp(answer_logprobs: Sequence[float]) -> float:
    return math.exp(log_msp(answer_logprobs))


def perplexity(answer_logprobs: Sequence[float]) -> float:
    arr = _checked_logprobs(answer_logprobs)
    return math.exp(-math.fsum(arr) / arr.size)


def mean_token_entropy(answer_entropies: Sequence[float | None]) -> float:
    if len(answer_entropies) == 0:
        raise ValueError("empty answer span")
    if any(h is None for h in answer_entropies):
        raise EstimatorUnavailable("no entropy")
    if any(h < 0 for h in answer_entropies):
        raise ValueError("entropies must be ≥ 0")
    return math.fsum(answer_entropies) / len(answer_entropies)


def truncated_entropy(alternatives: Sequence[tuple[str, float]]) -> float:
    """Entropy of the top-k candidates renormalized to sum to one."""
    lps = np.array([lp for _, lp in alternatives], dtype=float)
    if lps.size == 0:
        raise EstimatorUnavailable("no entropy")
    lps = lps - np.logaddexp.reduce(lps)
    p = np.exp(lps)
    nz = p > 0
    return float(max(0.0, -np.sum(p[nz] * lps[nz])))


def token_entropies(tokens: Sequence[TokenScore]) -> tuple[list[float], bool]:
    """Per-position entropies, preferring logged values.

    Returns the entropies and whether any of them had to be approximated
    from the top-k alternatives.
    """
    out, approx = [], False
    for tok in tokens:
        if tok.entropy is not None:
            out.append(tok.entropy)
        elif tok.alternatives:
            out.append(truncated_entropy(tok.alternatives))
            approx = True
        else:
            raise EstimatorUnavailable("no entropy")
    return out, approx


def mc_sequence_entropy(sample_seq_logprobs: Sequence[float]) -> float:
    arr = np.asarray(sample_seq_logprobs, dtype=float)
    if arr.size == 0:
        raise ValueError("no samples")
    return -math.fsum(arr) / arr.size


def mc_normalized_sequence_entropy(samples: Sequence[tuple[float, int]]) -> float:
    if len(samples) == 0:
        raise ValueError("no samples")
    if any(n < 1 for _, n in samples):
        raise ValueError("answer length must be ≥ 1")
    return -math.fsum(lp / n for lp, n in samples) / len(samples)


def src_confidence(logp_yes: float, logp_no: float) -> float:
    """Normalized probability of "yes" among {yes, no}."""
    if logp_yes == -math.inf and logp_no == -math.inf:
        raise ValueError("both yes and no have zero probability")
    m = max(logp_yes, logp_no)
    py, pn = math.exp(logp_yes - m), math.exp(logp_no - m)
    return py / (py + pn)


def consistency(sample_answers: Sequence[str | None], seq_logprobs: Sequence[float]) -> tuple[float, str]:
    """Share of all K samples (failures included) that match the majority answer."""
    winner, count = majority_vote(sample_answers, seq_logprobs)
    return count / len(sample_answers), winner


def to_confidence(name: str, value: float) -> float:
    if name in _IDENTITY:
        return value
    if name in _NEGATED:
        return -value
    raise KeyError(f"unknown estimator {name!r}")


# -- per-record scoring ----------------------------------------------------------

@dataclass
class UqScoreSet:
    """Raw estimator values for one record.  ``confidence`` applies the orientation."""

    record_id: str
    scores: dict[str, float] = field(default_factory=dict)
    unavailable: dict[str, str] = field(default_factory=dict)
    approx: list[str] = field(default_factory=list)
    log_msp: float | None = None
    majority_answer: str | None = None

    def confidence(self, name: str) -> float | None:
        if name not in self.scores:
            return None
        if name == "msp" and self.log_msp is not None:
            # rank in log space so long answers that underflow stay ordered
            return self.log_msp
        return to_confidence(name, self.scores[name])

    def to_dict(self) -> dict:
        d = {"record_id": self.record_id, "scores": dict(self.scores)}
        if self.log_msp is not None:
            d["log_msp"] = self.log_msp
        if self.unavailable:
            d["unavailable"] = dict(self.unavailable)
        if self.approx:
            d["approx"] = list(self.approx)
        if self.majority_answer is not None:
            d["majority_answer"] = self.majority_answer
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UqScoreSet":
        return cls(d["record_id"], dict(d.get("scores", {})), dict(d.get("unavailable", {})),
                   list(d.get("approx", [])), d.get("log_msp"), d.get("majority_answer"))


def score_record(
    record: GenerationRecord,
    sample_set: SampleSet | None = None,
    probe: SrcProbe | None = None,
    estimators: Sequence[str] = ESTIMATORS,
) -> UqScoreSet:
    """Compute every requested estimator that the available inputs allow."""
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise KeyError(f"unknown estimators {sorted(unknown)}")
    out = UqScoreSet(record.id)
    single = [e for e in estimators if e in ("msp", "ppl", "mte")]
    if single and not record.parse_ok:
        for e in single:
            out.unavailable[e] = "parse failure"
    elif single:
        lps = record.answer_logprobs()
        if "msp" in single:
            out.log_msp = log_msp(lps)
            out.scores["msp"] = math.exp(out.log_msp)
        if "ppl" in single:
            out.scores["ppl"] = perplexity(lps)
        if "mte" in single:
            try:
                ents, approx = token_entropies(record.answer_tokens())
                out.scores["mte"] = mean_token_entropy(ents)
                if approx:
                    out.approx.append("mte")
            except EstimatorUnavailable as exc:
                out.unavailable["mte"] = str(exc)

    if "src" in estimators:
        if not record.parse_ok:
            out.unavailable["src"] = "parse failure"
        elif probe is None:
            out.unavailable["src"] = "no probe"
        else:
            out.scores["src"] = src_confidence(probe.logp_yes, probe.logp_no)

    multi = [e for e in estimators if e in MULTI_GENERATION]
    if multi:
        if sample_set is None:
            for e in multi:
                out.unavailable[e] = "no samples"
            return out
        parsed = [s for s in sample_set.samples if s.parse_ok]
        if not parsed:
            for e in multi:
                out.unavailable[e] = "parse failure"
            return out
        if "mc_se" in multi:
            out.scores["mc_se"] = mc_sequence_entropy([s.seq_logprob for s in parsed])
        if "mc_nse" in multi:
            out.scores["mc_nse"] = mc_normalized_sequence_entropy([(s.seq_logprob, s.answer_len) for s in parsed])
        value, winner = consistency(sample_set.answers, sample_set.seq_logprobs)
        out.majority_answer = winner
        if "consistency" in multi:
            out.scores["consistency"] = value
    return out
