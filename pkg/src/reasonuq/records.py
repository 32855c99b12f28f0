"""Data model for generation logs and the line-delimited interchange format.

Every file handled here is UTF-8 JSON Lines: one object per line.  Floats are
written with Python's shortest round-trip representation, so reading a file
back yields bit-identical values.  Optional fields are omitted when absent,
and fields this module does not know about are kept and written back
unchanged.

All log quantities are natural logs (nats).
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

MODES = ("no_cot", "cot", "thinking")


class RecordError(ValueError):
    """Base class for record file problems."""


class RecordParseError(RecordError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class RecordValidationError(RecordError):
    def __init__(self, field_name: str, message: str, lineno: int | None = None):
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(f"{where}{field_name}: {message}")
        self.field = field_name
        self.lineno = lineno


class DuplicateIdError(RecordError):
    pass


def _require(cond: bool, field_name: str, message: str) -> None:
    if not cond:
        raise RecordValidationError(field_name, message)


@dataclass(frozen=True)
class TokenScore:
    text: str
    logprob: float
    entropy: float | None = None
    alternatives: tuple[tuple[str, float], ...] | None = None

    def validate(self, where: str = "tokens") -> None:
        _require(isinstance(self.logprob, (int, float)) and self.logprob <= 0,
                 f"{where}.logprob", "logprob ≤ 0 violated")
        if self.entropy is not None:
            _require(self.entropy >= 0, f"{where}.entropy", "entropy ≥ 0 violated")
        if self.alternatives is not None:
            prev = math.inf
            for text, lp in self.alternatives:
                _require(lp <= 0, f"{where}.alternatives", "alternative logprob ≤ 0 violated")
                _require(lp <= prev, f"{where}.alternatives",
                         "alternatives must be sorted by descending logprob")
                prev = lp

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"text": self.text, "logprob": self.logprob}
        if self.entropy is not None:
            d["entropy"] = self.entropy
        if self.alternatives is not None:
            d["alternatives"] = [[t, lp] for t, lp in self.alternatives]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TokenScore":
        alts = d.get("alternatives")
        return cls(
            text=d["text"],
            logprob=d["logprob"],
            entropy=d.get("entropy"),
            alternatives=None if alts is None else tuple((t, lp) for t, lp in alts),
        )


@dataclass(frozen=True)
class SpanPair:
    """Half-open token index ranges of the reasoning trace and the final answer."""

    reasoning: tuple[int, int]
    answer: tuple[int, int]

    @property
    def answer_len(self) -> int:
        return self.answer[1] - self.answer[0]

    @property
    def reasoning_len(self) -> int:
        return self.reasoning[1] - self.reasoning[0]

    def validate(self, n_tokens: int) -> None:
        (r0, r1), (a0, a1) = self.reasoning, self.answer
        _require(0 <= r0 <= r1 <= n_tokens, "spans.reasoning", "range outside token list")
        _require(0 <= a0 < a1 <= n_tokens, "spans.answer", "answer span must be non-empty and inside token list")
        _require(r1 <= a0, "spans", "reasoning must precede and not overlap answer")

    def to_dict(self) -> dict:
        return {"reasoning": list(self.reasoning), "answer": list(self.answer)}

    @classmethod
    def from_dict(cls, d: dict) -> "SpanPair":
        return cls(reasoning=tuple(d["reasoning"]), answer=tuple(d["answer"]))


# canonical key order on disk
_RECORD_KEYS = (
    "id", "dataset", "model", "mode", "question", "options", "gold_answers",
    "image_ref", "raw_text", "tokens", "spans", "parsed_answer", "parse_ok",
    "correct", "logprob_kind", "variant", "tag_violation", "meta",
)
_OPTIONAL_KEYS = {"options", "image_ref", "spans", "parsed_answer", "correct",
                  "logprob_kind", "variant", "tag_violation", "meta"}


@dataclass(frozen=True)
class GenerationRecord:
    id: str
    dataset: str
    model: str
    mode: str
    question: str
    gold_answers: tuple[str, ...]
    raw_text: str
    tokens: tuple[TokenScore, ...]
    parse_ok: bool
    spans: SpanPair | None = None
    options: tuple[str, ...] | None = None
    image_ref: str | None = None
    parsed_answer: str | None = None
    correct: float | None = None
    logprob_kind: str | None = None
    variant: str | None = None
    tag_violation: bool | None = None
    meta: dict | None = None
    extra: dict = field(default_factory=dict, compare=True)

    def validate(self) -> None:
        _require(isinstance(self.id, str) and self.id != "", "id", "must be a non-empty string")
        _require(self.mode in MODES, "mode", f"must be one of {MODES}")
        _require(isinstance(self.parse_ok, bool), "parse_ok", "must be boolean")
        for i, tok in enumerate(self.tokens):
            tok.validate(f"tokens[{i}]")
        if self.spans is not None:
            self.spans.validate(len(self.tokens))
        if self.parse_ok:
            _require(self.spans is not None, "spans", "required when parse_ok")
            _require(self.parsed_answer is not None, "parsed_answer", "required when parse_ok")
        else:
            _require(self.parsed_answer is None, "parsed_answer", "must be absent when parse_ok is false")
        if self.correct is not None:
            _require(0 <= float(self.correct) <= 1, "correct", "must lie in [0, 1]")

    # -- convenience views --------------------------------------------------

    def answer_tokens(self) -> tuple[TokenScore, ...]:
        if self.spans is None:
            return ()
        a0, a1 = self.spans.answer
        return self.tokens[a0:a1]

    def answer_logprobs(self) -> list[float]:
        return [t.logprob for t in self.answer_tokens()]

    def answer_text(self) -> str:
        return "".join(t.text for t in self.answer_tokens())

    @property
    def reasoning_len(self) -> int:
        return 0 if self.spans is None else self.spans.reasoning_len

    def to_dict(self) -> dict:
        d: dict[str, Any] = {}
        for key in _RECORD_KEYS:
            value = getattr(self, key)
            if key in _OPTIONAL_KEYS and value is None:
                continue
            if key == "tokens":
                value = [t.to_dict() for t in value]
            elif key == "spans":
                value = value.to_dict()
            elif key in ("options", "gold_answers"):
                value = list(value)
            d[key] = value
        for key, value in self.extra.items():
            d.setdefault(key, value)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationRecord":
        missing = [k for k in _RECORD_KEYS if k not in _OPTIONAL_KEYS and k not in d]
        if missing:
            raise RecordValidationError(missing[0], "required field missing")
        try:
            tokens = tuple(TokenScore.from_dict(t) for t in d["tokens"])
            spans = SpanPair.from_dict(d["spans"]) if d.get("spans") is not None else None
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordValidationError("tokens/spans", f"malformed: {exc}") from None
        options = d.get("options")
        return cls(
            id=d["id"],
            dataset=d["dataset"],
            model=d["model"],
            mode=d["mode"],
            question=d["question"],
            gold_answers=tuple(d["gold_answers"]),
            raw_text=d["raw_text"],
            tokens=tokens,
            parse_ok=d["parse_ok"],
            spans=spans,
            options=None if options is None else tuple(options),
            image_ref=d.get("image_ref"),
            parsed_answer=d.get("parsed_answer"),
            correct=d.get("correct"),
            logprob_kind=d.get("logprob_kind"),
            variant=d.get("variant"),
            tag_violation=d.get("tag_violation"),
            meta=d.get("meta"),
            extra={k: v for k, v in d.items() if k not in _RECORD_KEYS},
        )


@dataclass(frozen=True)
class Sample:
    parsed_answer: str | None
    seq_logprob: float
    answer_len: int
    parse_ok: bool

    def to_dict(self) -> dict:
        d: dict[str, Any] = {}
        if self.parsed_answer is not None:
            d["parsed_answer"] = self.parsed_answer
        d.update(seq_logprob=self.seq_logprob, answer_len=self.answer_len, parse_ok=self.parse_ok)
        return d


@dataclass(frozen=True)
class SampleSet:
    """K stochastic generations for one input."""

    record_id: str
    samples: tuple[Sample, ...]
    seed: int
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        _require(len(self.samples) > 0, "samples", "must be non-empty")
        for i, s in enumerate(self.samples):
            _require(s.seq_logprob <= 0, f"samples[{i}].seq_logprob", "seq_logprob ≤ 0 violated")
            if s.parse_ok:
                _require(s.answer_len >= 1, f"samples[{i}].answer_len", "must be ≥ 1 when parse_ok")
                _require(s.parsed_answer is not None, f"samples[{i}].parsed_answer", "required when parse_ok")
            else:
                _require(s.parsed_answer is None, f"samples[{i}].parsed_answer",
                         "must be absent when parse_ok is false")

    @property
    def answers(self) -> list[str | None]:
        return [s.parsed_answer if s.parse_ok else None for s in self.samples]

    @property
    def seq_logprobs(self) -> list[float]:
        return [s.seq_logprob for s in self.samples]

    def to_dict(self) -> dict:
        d = {"record_id": self.record_id, "samples": [s.to_dict() for s in self.samples], "seed": self.seed}
        for k, v in self.extra.items():
            d.setdefault(k, v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SampleSet":
        for key in ("record_id", "samples", "seed"):
            if key not in d:
                raise RecordValidationError(key, "required field missing")
        samples = tuple(
            Sample(s.get("parsed_answer"), s["seq_logprob"], s["answer_len"], s["parse_ok"])
            for s in d["samples"]
        )
        return cls(d["record_id"], samples, d["seed"],
                   {k: v for k, v in d.items() if k not in ("record_id", "samples", "seed")})


@dataclass(frozen=True)
class SrcProbe:
    record_id: str
    logp_yes: float
    logp_no: float
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        _require(self.logp_yes <= 0, "logp_yes", "must be ≤ 0")
        _require(self.logp_no <= 0, "logp_no", "must be ≤ 0")
        _require(not (self.logp_yes == -math.inf and self.logp_no == -math.inf),
                 "logp_yes/logp_no", "not both -inf")

    def to_dict(self) -> dict:
        d = {"record_id": self.record_id, "logp_yes": self.logp_yes, "logp_no": self.logp_no}
        for k, v in self.extra.items():
            d.setdefault(k, v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SrcProbe":
        for key in ("record_id", "logp_yes", "logp_no"):
            if key not in d:
                raise RecordValidationError(key, "required field missing")
        return cls(d["record_id"], d["logp_yes"], d["logp_no"],
                   {k: v for k, v in d.items() if k not in ("record_id", "logp_yes", "logp_no")})


# -- generic JSON Lines plumbing ---------------------------------------------

def dumps_line(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def iter_jsonl(path: str | os.PathLike) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordParseError(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise RecordParseError(lineno, "expected a JSON object")
            yield lineno, obj


def write_jsonl(path: str | os.PathLike, objects: Iterable[dict]) -> None:
    """Write atomically: the target is replaced only once every line is written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            for obj in objects:
                fh.write(dumps_line(obj))
                fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_validated(path, factory, id_key):
    out = []
    seen: set[str] = set()
    for lineno, obj in iter_jsonl(path):
        try:
            item = factory(obj)
            item.validate()
        except RecordValidationError as exc:
            raise RecordValidationError(exc.field, str(exc).split(": ", 1)[-1], lineno) from None
        except (KeyError, TypeError) as exc:
            raise RecordParseError(lineno, f"malformed object ({exc})") from None
        key = getattr(item, id_key)
        if key in seen:
            raise DuplicateIdError(f"line {lineno}: duplicate id {key!r}")
        seen.add(key)
        out.append(item)
    return out


def read_records(path: str | os.PathLike) -> list[GenerationRecord]:
    """Read and validate a record file, preserving order."""
    return _read_validated(path, GenerationRecord.from_dict, "id")


def write_records(path: str | os.PathLike, records: Iterable[GenerationRecord]) -> None:
    write_jsonl(path, (r.to_dict() for r in records))


def read_sample_sets(path: str | os.PathLike) -> list[SampleSet]:
    return _read_validated(path, SampleSet.from_dict, "record_id")


def write_sample_sets(path: str | os.PathLike, sets: Iterable[SampleSet]) -> None:
    write_jsonl(path, (s.to_dict() for s in sets))


def read_probes(path: str | os.PathLike) -> list[SrcProbe]:
    return _read_validated(path, SrcProbe.from_dict, "record_id")


def write_probes(path: str | os.PathLike, probes: Iterable[SrcProbe]) -> None:
    write_jsonl(path, (p.to_dict() for p in probes))
