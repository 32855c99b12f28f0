"""Answer-mention masking, the random-mask control, and re-scoring records.

Masking works on surface strings; the backend re-tokenizes the masked
context.  The answer itself is never touched, so a masked record keeps the
correctness of its source.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .parsing import ParseFailure, extract_tagged
from .prompts import answer_prompt
from .records import GenerationRecord, SpanPair, TokenScore

MASK = "[MASK]"
VARIANTS = ("masked", "random_masked")

_NUMERIC_EDGE = re.compile(r"\d")


def answer_pattern(answer: str) -> re.Pattern:
    """Case-insensitive, boundary-respecting matcher for an answer phrase.

    A match may not touch letters or digits on either side.  When the answer
    begins or ends with a digit it additionally may not be preceded by a
    decimal point or followed by a decimal point and a digit, so "4" never
    matches inside "4.5" or "3.4" while "4." at a sentence end still does.
    Multi-word answers match across any run of whitespace.
    """
    words = answer.split()
    if not words:
        raise ValueError("predicted answer is empty")
    body = r"\s+".join(re.escape(w) for w in words)
    lead = r"(?<![^\W_])"
    trail = r"(?![^\W_])"
    if _NUMERIC_EDGE.match(words[0][0]):
        lead += r"(?<!\.)"
    if _NUMERIC_EDGE.match(words[-1][-1]):
        trail += r"(?!\.\d)"
    return re.compile(lead + body + trail, re.IGNORECASE)


def find_answer_mentions(trace: str, answer: str) -> list[tuple[int, int]]:
    return [m.span() for m in answer_pattern(answer).finditer(trace)]


@dataclass(frozen=True)
class MaskResult:
    masked_trace: str
    mask_count: int
    masked_char_ranges: tuple[tuple[int, int], ...]
    originals: tuple[str, ...] = field(default=())

    def unmask(self) -> str:
        """Rebuild the input trace from the bookkeeping."""
        out, pos, shift = [], 0, 0
        for (start, end), original in zip(self.masked_char_ranges, self.originals):
            m_start = start + shift
            out.append(self.masked_trace[pos:m_start])
            out.append(original)
            pos = m_start + len(MASK)
            shift += len(MASK) - (end - start)
        out.append(self.masked_trace[pos:])
        return "".join(out)


def _apply_masks(trace: str, ranges: Sequence[tuple[int, int]]) -> MaskResult:
    parts, pos = [], 0
    for start, end in ranges:
        parts.append(trace[pos:start])
        parts.append(MASK)
        pos = end
    parts.append(trace[pos:])
    return MaskResult(
        masked_trace="".join(parts),
        mask_count=len(ranges),
        masked_char_ranges=tuple(ranges),
        originals=tuple(trace[s:e] for s, e in ranges),
    )


def mask_answer_mentions(trace: str, predicted_answer: str) -> MaskResult:
    """Replace every standalone occurrence of the answer with ``[MASK]``."""
    return _apply_masks(trace, find_answer_mentions(trace, predicted_answer))


def mask_random_tokens(trace: str, count: int, seed: int) -> MaskResult:
    """Mask ``count`` whitespace-delimited tokens chosen uniformly without replacement."""
    spans = [m.span() for m in re.finditer(r"\S+", trace)]
    if count < 0 or count > len(spans):
        raise ValueError(f"cannot mask {count} of {len(spans)} tokens")
    chosen = np.sort(np.random.default_rng(seed).choice(len(spans), size=count, replace=False))
    return _apply_masks(trace, [spans[i] for i in chosen])


# -- records ------------------------------------------------------------------------

def _parsed(record: GenerationRecord):
    if not record.parse_ok:
        raise ParseFailure(f"record {record.id} did not parse")
    return extract_tagged(record.raw_text)


def reasoning_trace(record: GenerationRecord) -> str:
    """Reasoning text between the think tags, or an empty string."""
    return _parsed(record).think_text or ""


def predicted_answer_text(record: GenerationRecord) -> str:
    """The answer exactly as the model wrote it inside the answer tags."""
    return _parsed(record).answer_text


@dataclass(frozen=True)
class ScoringRequest:
    record_id: str
    prompt: str
    context_text: str
    forced_continuation: str
    variant: str
    image_ref: str | None = None
    mask_count: int = 0

    def to_dict(self) -> dict:
        d = {
            "record_id": self.record_id,
            "variant": self.variant,
            "prompt": self.prompt,
            "context_text": self.context_text,
            "forced_continuation": self.forced_continuation,
            "mask_count": self.mask_count,
        }
        if self.image_ref is not None:
            d["image_ref"] = self.image_ref
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScoringRequest":
        return cls(d["record_id"], d["prompt"], d["context_text"], d["forced_continuation"],
                   d["variant"], d.get("image_ref"), d.get("mask_count", 0))


def _answer_char_start(record: GenerationRecord, parsed) -> int:
    texts = [t.text for t in record.tokens]
    if "".join(texts) == record.raw_text:
        return sum(len(t) for t in texts[:record.spans.answer[0]])
    return parsed.answer_char_range[0]


def build_rescore_request(record: GenerationRecord, mask_result: MaskResult, variant: str) -> ScoringRequest:
    """Prompt plus masked reasoning as context; the original answer as continuation."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    parsed = _parsed(record)
    if parsed.think_char_range is None:
        raise ParseFailure(f"record {record.id} has no reasoning trace")
    t0, t1 = parsed.think_char_range
    a0 = _answer_char_start(record, parsed)
    context = record.raw_text[:t0] + mask_result.masked_trace + record.raw_text[t1:a0]
    return ScoringRequest(
        record_id=record.id,
        prompt=answer_prompt(record.dataset, record.mode, record.question, record.options),
        context_text=context,
        forced_continuation=record.answer_text(),
        variant=variant,
        image_ref=record.image_ref,
        mask_count=mask_result.mask_count,
    )


def apply_rescore(
    record: GenerationRecord,
    scored: Sequence[float] | Sequence[TokenScore],
    variant: str,
    request: ScoringRequest | None = None,
) -> GenerationRecord:
    """Copy of ``record`` whose answer tokens carry the re-scored likelihoods."""
    if not record.parse_ok:
        raise ParseFailure(f"record {record.id} did not parse")
    a0, a1 = record.spans.answer
    original = record.tokens[a0:a1]
    new_tokens = [
        s if isinstance(s, TokenScore) else TokenScore(text="", logprob=float(s)) for s in scored
    ]
    if not new_tokens:
        raise ValueError(f"record {record.id}: backend returned no answer tokens")
    retokenized = len(new_tokens) != len(original)
    if not retokenized:
        new_tokens = [
            t if t.text == o.text else replace(t, text=o.text) for t, o in zip(new_tokens, original)
        ]
    elif not any(t.text for t in new_tokens):
        new_tokens[0] = replace(new_tokens[0], text=record.answer_text())
    tokens = record.tokens[:a0] + tuple(new_tokens) + record.tokens[a1:]
    meta = dict(record.meta or {})
    meta.update(retokenized=retokenized, original_answer_len=a1 - a0)
    if request is not None:
        meta.update(mask_count=request.mask_count, context_text=request.context_text)
    return replace(
        record,
        tokens=tokens,
        spans=SpanPair(record.spans.reasoning, (a0, a0 + len(new_tokens))),
        variant=variant,
        meta=meta,
    )
