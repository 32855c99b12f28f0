"""High-level inference operations on top of a backend transport."""

from __future__ import annotations

import hashlib
import logging
import math
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from ..parsing import JudgeConfig, ParseFailure, extract_tagged, judge_correct, normalize_answer
from ..prompts import PROMPT_VERSION, answer_prompt, followup_prompt, src_prompt, user_message
from ..records import GenerationRecord, Sample, SpanPair, SrcProbe, TokenScore
from .backend import Backend, BackendConfig, BackendError, ContextOverflow, HttpBackend, UnsupportedBackend, canonical_json
from .presets import DecodingPreset

log = logging.getLogger(__name__)

SRC_TOKEN_RULE = "sum of content tokens between the answer tags"


@dataclass(frozen=True)
class Question:
    """One input item: what gets asked, plus what counts as right."""

    id: str
    dataset: str
    question: str
    gold_answers: tuple[str, ...]
    options: tuple[str, ...] | None = None
    image_ref: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "Question":
        options = d.get("options")
        return cls(str(d["id"]), d["dataset"], d["question"], tuple(d["gold_answers"]),
                   None if options is None else tuple(options), d.get("image_ref"))

    @classmethod
    def from_record(cls, r: GenerationRecord) -> "Question":
        return cls(r.id, r.dataset, r.question, r.gold_answers, r.options, r.image_ref)


@dataclass(frozen=True)
class Generation:
    index: int
    text: str
    tokens: tuple[TokenScore, ...]
    finish_reason: str | None = None


@dataclass
class SequentialResult:
    record_id: str
    values: list[float]
    requested: int
    stopped: str | None = None

    @property
    def completed(self) -> int:
        return len(self.values)


def derive_seed(base_seed: int, record_id: str, purpose: str) -> int:
    """Per-record, per-purpose seed that does not depend on scheduling."""
    digest = hashlib.sha256(f"{base_seed}:{record_id}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def _token_from_wire(entry: dict) -> TokenScore:
    alts = entry.get("top_logprobs")
    alternatives = None
    if alts:
        pairs = sorted(((a["token"], min(float(a["logprob"]), 0.0)) for a in alts), key=lambda t: -t[1])
        alternatives = tuple(pairs)
    ent = entry.get("entropy")
    return TokenScore(
        text=entry["token"],
        logprob=min(float(entry["logprob"]), 0.0),
        entropy=None if ent is None else max(float(ent), 0.0),
        alternatives=alternatives,
    )


def _token_offsets(tokens: Sequence[TokenScore]) -> list[int]:
    out = [0]
    for t in tokens:
        out.append(out[-1] + len(t.text))
    return out


def _covering(offsets: list[int], c0: int, c1: int) -> tuple[int, int]:
    """Half-open token range of tokens overlapping characters [c0, c1)."""
    idx = [i for i in range(len(offsets) - 1) if offsets[i] < c1 and offsets[i + 1] > c0]
    return (idx[0], idx[-1] + 1) if idx else (0, 0)


def locate_spans(raw_text: str, tokens: Sequence[TokenScore]):
    """Parse tagged output and map it onto token indices.

    Returns ``(parsed, spans)``.  Raises :class:`ParseFailure` when the text
    has no answer or the token texts do not reproduce the raw text.
    """
    parsed = extract_tagged(raw_text)
    offsets = _token_offsets(tokens)
    if offsets[-1] != len(raw_text) or "".join(t.text for t in tokens) != raw_text:
        raise ParseFailure("token texts do not reproduce the decoded output")
    answer = _covering(offsets, *parsed.answer_char_range)
    if answer[0] == answer[1]:
        raise ParseFailure("answer span covers no tokens")
    reasoning = (answer[0], answer[0])
    if parsed.think_char_range is not None and parsed.think_char_range[0] < parsed.think_char_range[1]:
        r = _covering(offsets, *parsed.think_char_range)
        if r[1] <= answer[0]:
            reasoning = r
    return parsed, SpanPair(reasoning, answer)


def record_from_generation(
    q: Question,
    gen: Generation,
    mode: str,
    model: str,
    judge: JudgeConfig,
    logprob_kind: str | None = "backend",
) -> GenerationRecord:
    meta = {"prompt_version": PROMPT_VERSION}
    try:
        parsed, spans = locate_spans(gen.text, gen.tokens)
    except ParseFailure as exc:
        meta["parse_error"] = str(exc)
        return GenerationRecord(
            id=q.id, dataset=q.dataset, model=model, mode=mode, question=q.question,
            gold_answers=q.gold_answers, raw_text=gen.text, tokens=gen.tokens, parse_ok=False,
            options=q.options, image_ref=q.image_ref, correct=0.0, logprob_kind=logprob_kind, meta=meta,
        )
    pred = normalize_answer(parsed.answer_text, judge)
    return GenerationRecord(
        id=q.id, dataset=q.dataset, model=model, mode=mode, question=q.question,
        gold_answers=q.gold_answers, raw_text=gen.text, tokens=gen.tokens, parse_ok=True,
        spans=spans, options=q.options, image_ref=q.image_ref, parsed_answer=pred,
        correct=judge_correct(pred, q.gold_answers, q.options, judge),
        logprob_kind=logprob_kind, tag_violation=parsed.tag_violation or None, meta=meta,
    )


def sample_from_generation(gen: Generation, judge: JudgeConfig) -> Sample:
    try:
        parsed, spans = locate_spans(gen.text, gen.tokens)
    except ParseFailure:
        return Sample(None, math.fsum(t.logprob for t in gen.tokens), 0, False)
    a0, a1 = spans.answer
    lp = math.fsum(t.logprob for t in gen.tokens[a0:a1])
    return Sample(normalize_answer(parsed.answer_text, judge), lp, a1 - a0, True)


class InferenceClient:
    """Generation, forced scoring and self-probing against one backend."""

    def __init__(
        self,
        backend: Backend,
        model: str,
        preset: DecodingPreset,
        config: BackendConfig | None = None,
        top_logprobs: int = 5,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.model = model
        self.preset = preset
        self.config = config or BackendConfig(base_url="stub:")
        self.top_logprobs = top_logprobs
        self._sleep = sleep
        self._jitter = random.Random(0)
        self.retry_count = 0
        self.capabilities: dict | None = None

    @classmethod
    def connect(cls, config: BackendConfig, model: str, preset: DecodingPreset, require_score: bool = False,
                **kwargs) -> "InferenceClient":
        """Open the backend named by ``config.base_url`` and probe its capabilities.

        ``stub:<world.json>`` runs the bundled stub in-process.
        """
        if config.base_url.startswith("stub:"):
            from .stub import StubBackend
            backend = StubBackend.from_file(config.base_url[len("stub:"):])
        else:
            backend = HttpBackend(config)
        client = cls(backend, model, preset, config, **kwargs)
        client.check_capabilities(require_score=require_score)
        return client

    # -- plumbing ----------------------------------------------------------------

    def _call(self, method: str, path: str, payload: dict | None = None) -> dict:
        body = None if payload is None else canonical_json(payload)
        attempt = 0
        while True:
            try:
                return self.backend.request(method, path, body)
            except BackendError as exc:
                if not exc.retryable or attempt >= self.config.retries:
                    raise
                delay = self.config.backoff * (2 ** attempt) * (1 + self._jitter.random())
                attempt += 1
                self.retry_count += 1
                log.warning("retry %d/%d for %s after %s", attempt, self.config.retries, path, exc)
                self._sleep(delay)

    def check_capabilities(self, require_score: bool = False) -> dict:
        caps = self._call("GET", "/v1/capabilities")
        self.capabilities = caps
        if not caps.get("chat"):
            raise UnsupportedBackend("backend does not offer chat completions")
        if require_score and not caps.get("score"):
            raise UnsupportedBackend("backend does not support continuation scoring")
        return caps

    def chat_payload(self, messages: list[dict], n: int, seed: int, want_logprobs: bool = True,
                     want_topk: int | None = None) -> dict:
        p = self.preset
        payload = {
            "model": self.model,
            "messages": messages,
            "n": n,
            "seed": seed,
            "temperature": p.temperature,
            "top_p": p.top_p,
            "top_k": p.top_k,
            "presence_penalty": p.presence_penalty,
            "max_tokens": p.max_tokens,
            "logprobs": want_logprobs,
        }
        if want_logprobs:
            payload["top_logprobs"] = self.top_logprobs if want_topk is None else want_topk
        return payload

    def _chat(self, messages: list[dict], n: int, seed: int, want_logprobs: bool = True,
              want_topk: int | None = None) -> list[Generation]:
        resp = self._call("POST", "/v1/chat/completions",
                          self.chat_payload(messages, n, seed, want_logprobs, want_topk))
        out = []
        for choice in sorted(resp.get("choices", []), key=lambda c: c.get("index", 0)):
            content = (choice.get("logprobs") or {}).get("content") or []
            out.append(Generation(
                index=choice.get("index", len(out)),
                text=choice["message"]["content"],
                tokens=tuple(_token_from_wire(e) for e in content),
                finish_reason=choice.get("finish_reason"),
            ))
        if len(out) != n:
            raise BackendError(f"asked for {n} completions, got {len(out)}")
        return out

    # -- operations --------------------------------------------------------------

    def generate(self, prompt: str, image_ref: str | None = None, n_samples: int = 1, seed: int = 0,
                 want_logprobs: bool = True, want_topk: int | None = None) -> list[Generation]:
        return self._chat([user_message(prompt, image_ref)], n_samples, seed, want_logprobs, want_topk)

    def score_payload(self, context_text: str, forced_continuation: str, image_ref: str | None = None,
                      prompt: str | None = None) -> dict:
        messages = []
        if prompt is not None:
            messages.append(user_message(prompt, image_ref))
        messages.append({"role": "assistant", "content": context_text})
        return {"model": self.model, "messages": messages, "continuation": forced_continuation,
                "top_logprobs": self.top_logprobs}

    def score_forced(self, context_text: str, forced_continuation: str, image_ref: str | None = None,
                     prompt: str | None = None) -> list[TokenScore]:
        """Token scores of exactly ``forced_continuation`` after the given context."""
        if forced_continuation == "":
            return []
        resp = self._call("POST", "/v1/score",
                          self.score_payload(context_text, forced_continuation, image_ref, prompt))
        return [_token_from_wire(e) for e in resp.get("tokens", [])]

    def _content_logprob(self, prefix: str, continuation: str, prompt: str, image_ref: str | None) -> float:
        tokens = self.score_forced(prefix, continuation, image_ref, prompt)
        if "".join(t.text for t in tokens) != continuation:
            raise BackendError("scored tokens do not reproduce the continuation")
        c0 = continuation.index(">") + 1
        c1 = continuation.rindex("</")
        a, b = _covering(_token_offsets(tokens), c0, c1)
        return math.fsum(t.logprob for t in tokens[a:b])

    def probe_src(self, record: GenerationRecord, seed: int = 0) -> SrcProbe:
        """Self-reported certainty: scored ``yes`` and ``no`` after the self-report prompt."""
        if not record.parse_ok or record.parsed_answer is None:
            raise ParseFailure(f"record {record.id} has no parsed answer to self-assess")
        parsed = extract_tagged(record.raw_text)
        prompt = src_prompt(record.mode, record.question, parsed.answer_text, record.options)
        prefix = ""
        if record.mode in ("cot", "thinking"):
            gen = self.generate(prompt, record.image_ref, 1, derive_seed(seed, record.id, "src"), False)[0]
            cut = gen.text.rfind("<answer>")
            prefix = gen.text[:cut] if cut >= 0 else gen.text
        lp_yes = self._content_logprob(prefix, "<answer>yes</answer>", prompt, record.image_ref)
        lp_no = self._content_logprob(prefix, "<answer>no</answer>", prompt, record.image_ref)
        extra = {"token_rule": SRC_TOKEN_RULE}
        if prefix:
            extra["reasoning"] = prefix
        return SrcProbe(record.id, lp_yes, lp_no, extra)

    def run_sequential_rounds(self, record: GenerationRecord, rounds: int, seed: int = 0) -> SequentialResult:
        """Summed answer log-probability each time the question is answered again.

        Every earlier reasoning trace and answer stays in the conversation.
        Round 1 is the record's own answer.  A context overflow ends the run
        early; the result says how many rounds completed.
        """
        if rounds < 1:
            raise ValueError("rounds must be ≥ 1")
        if not record.parse_ok:
            raise ParseFailure(f"record {record.id} did not parse")
        values = [math.fsum(record.answer_logprobs())]
        messages = [
            user_message(answer_prompt(record.dataset, record.mode, record.question, record.options),
                         record.image_ref),
            {"role": "assistant", "content": record.raw_text},
        ]
        follow = followup_prompt(record.options)
        for r in range(2, rounds + 1):
            messages = messages + [{"role": "user", "content": [{"type": "text", "text": follow}]}]
            try:
                gen = self._chat(messages, 1, derive_seed(seed, record.id, f"round{r}"))[0]
            except ContextOverflow as exc:
                return SequentialResult(record.id, values, rounds, f"context overflow: {exc}")
            try:
                _, spans = locate_spans(gen.text, gen.tokens)
            except ParseFailure as exc:
                return SequentialResult(record.id, values, rounds, f"parse failure: {exc}")
            a0, a1 = spans.answer
            values.append(math.fsum(t.logprob for t in gen.tokens[a0:a1]))
            messages = messages + [{"role": "assistant", "content": gen.text}]
        return SequentialResult(record.id, values, rounds)

    # -- batch helpers ------------------------------------------------------------

    def map_records(self, fn: Callable, items: Iterable, key: Callable = lambda x: x.id):
        """Apply ``fn`` to each item with bounded concurrency.

        Returns ``(results, failures)``: results keyed by item key, failures
        as ``{key: message}``.  A failing item never stops the others.
        """
        items = list(items)
        results, failures = {}, {}

        def run(item):
            try:
                return key(item), fn(item), None
            except (BackendError, ParseFailure, ValueError) as exc:
                return key(item), None, f"{type(exc).__name__}: {exc}"

        with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
            for k, value, err in pool.map(run, items):
                if err is None:
                    results[k] = value
                else:
                    failures[k] = err
        return results, failures
