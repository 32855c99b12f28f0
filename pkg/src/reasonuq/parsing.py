"""Tagged-output extraction, answer normalization, correctness judging and voting."""

from __future__ import annotations

import re
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Sequence


class ParseFailure(ValueError):
    """No well-formed ``<answer>...</answer>`` pair in the output."""


class VoteFailure(ValueError):
    """Majority vote over samples that all failed to parse."""


class JudgeConfigError(ValueError):
    pass


def _tag_pattern(tag: str) -> re.Pattern:
    # content may not itself contain an opening or closing tag of the same kind
    return re.compile(rf"<{tag}>((?:(?!</?{tag}>).)*)</{tag}>", re.DOTALL)


_ANSWER_RE = _tag_pattern("answer")
_THINK_RE = _tag_pattern("think")
_OPEN_ANSWER_RE = re.compile(r"<answer>")
_OPEN_THINK_RE = re.compile(r"<think>")


@dataclass(frozen=True)
class ParsedOutput:
    answer_text: str
    answer_char_range: tuple[int, int]
    think_text: str | None = None
    think_char_range: tuple[int, int] | None = None
    tag_violation: bool = False


def _stripped_range(raw: str, start: int, end: int) -> tuple[int, int]:
    while start < end and raw[start].isspace():
        start += 1
    while end > start and raw[end - 1].isspace():
        end -= 1
    return start, end


def extract_tagged(raw_text: str) -> ParsedOutput:
    """Return the last well-formed answer pair and the last think pair.

    Character ranges point at the whitespace-trimmed tag content inside
    ``raw_text``.  ``tag_violation`` is set when either tag occurs more than
    once or an answer tag is left unclosed next to a well-formed one.
    """
    answers = list(_ANSWER_RE.finditer(raw_text))
    if not answers:
        raise ParseFailure("no well-formed <answer>...</answer> pair")
    last = answers[-1]
    a0, a1 = _stripped_range(raw_text, last.start(1), last.end(1))
    if a0 == a1:
        raise ParseFailure("empty answer")

    thinks = list(_THINK_RE.finditer(raw_text))
    think_text = think_range = None
    if thinks:
        t = thinks[-1]
        think_range = (t.start(1), t.end(1))
        think_text = t.group(1)

    violation = (
        len(answers) > 1
        or len(thinks) > 1
        or len(_OPEN_ANSWER_RE.findall(raw_text)) != len(answers)
        or len(_OPEN_THINK_RE.findall(raw_text)) != len(thinks)
    )
    return ParsedOutput(
        answer_text=raw_text[a0:a1],
        answer_char_range=(a0, a1),
        think_text=think_text,
        think_char_range=think_range,
        tag_violation=violation,
    )


# -- normalization -------------------------------------------------------------

JUDGE_KINDS = ("exact_mc", "open_ended_exact", "vqa_soft")


@dataclass(frozen=True)
class JudgeConfig:
    kind: str = "open_ended_exact"
    case_fold: bool = True
    strip_articles: bool = True
    strip_punct: bool = True

    def __post_init__(self):
        if self.kind not in JUDGE_KINDS:
            raise JudgeConfigError(f"unknown judge kind {self.kind!r}; expected one of {JUDGE_KINDS}")


_ARTICLES_RE = re.compile(r"(?<!\w)(?:a|an|the)(?!\w)", re.IGNORECASE)
_WS_RE = re.compile(r"\s+")


def _strip_punctuation(text: str) -> str:
    out = []
    n = len(text)
    for i, ch in enumerate(text):
        if unicodedata.category(ch).startswith("P"):
            # keep decimal points inside numbers: "4.5" stays "4.5"
            if ch == "." and 0 < i < n - 1 and text[i - 1].isdigit() and text[i + 1].isdigit():
                out.append(ch)
            continue
        out.append(ch)
    return "".join(out)


def normalize_answer(text: str, judge: JudgeConfig | None = None) -> str:
    """Deterministic, idempotent answer canonicalization.

    >>> normalize_answer("The Cat.")
    'cat'
    """
    judge = judge or JudgeConfig()
    s = text
    if judge.case_fold:
        s = s.casefold()
    if judge.strip_punct:
        s = _strip_punctuation(s)
    if judge.strip_articles:
        s = _ARTICLES_RE.sub(" ", s)
    return _WS_RE.sub(" ", s).strip()


def judge_correct(
    pred: str | None,
    gold_answers: Sequence[str],
    options: Sequence[str] | None = None,
    judge: JudgeConfig | None = None,
) -> float:
    """Correctness score in [0, 1] for an already-normalized prediction."""
    judge = judge or JudgeConfig()
    if judge.kind == "exact_mc" and not options:
        raise JudgeConfigError("exact_mc judging requires the record's options")
    if not pred:
        return 0.0
    gold = [normalize_answer(g, judge) for g in gold_answers]
    if judge.kind == "exact_mc":
        matches = [o for o in (normalize_answer(o, judge) for o in options) if o == pred]
        return 1.0 if len(matches) == 1 and pred in gold else 0.0
    if judge.kind == "open_ended_exact":
        return 1.0 if pred in gold else 0.0
    # VQA soft accuracy over annotator answers
    return min(sum(g == pred for g in gold) / 3.0, 1.0)


def majority_vote(answers: Sequence[str | None], seq_logprobs: Sequence[float]) -> tuple[str, int]:
    """Most frequent parsed answer and its count.

    Parse failures (``None``) never win.  Ties go to the answer whose best
    sample has the highest sequence log-probability, then to the lowest
    index of that best sample.
    """
    if len(answers) != len(seq_logprobs):
        raise ValueError("answers and seq_logprobs differ in length")
    counts = Counter(a for a in answers if a is not None)
    if not counts:
        raise VoteFailure("no parseable answers to vote over")
    best: dict[str, tuple[float, int]] = {}
    for i, (a, lp) in enumerate(zip(answers, seq_logprobs)):
        if a is None:
            continue
        if a not in best or lp > best[a][0]:
            best[a] = (lp, i)
    top = max(counts.values())
    tied = [a for a, c in counts.items() if c == top]
    winner = min(tied, key=lambda a: (-best[a][0], best[a][1]))
    return winner, top
