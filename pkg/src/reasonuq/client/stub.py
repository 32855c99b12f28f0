"""Deterministic in-repo backend speaking the same protocol as a real server.

The stub simulates a model from a *world* file: for each question, a
probability over candidate answers without reasoning (``probs``) and with
reasoning (``probs_cot``).  Answer tokens are scored as

    L = log p(a) * exp(-gamma * m)

where ``m`` counts standalone mentions of the answer in the assistant text
that precedes it, so a reasoning trace that keeps naming its answer pushes
the answer likelihood toward 1 whether or not the answer is right.  Replacing
the mentions with ``[MASK]`` removes the boost.

Every response is a pure function of the request bytes.  A script mapping
request hashes to fixed responses overrides the simulation, and
``fail_first`` makes the first requests fail with HTTP 500 for retry tests.

World file layout::

    {"gamma": 1.0, "min_mentions": 0, "max_mentions": 4, "parse_fail_rate": 0.0,
     "max_context_chars": null, "score": true,
     "items": [{"question": "...", "candidates": [...],
                "probs": [...], "probs_cot": [...]}]}
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from ..interventions import find_answer_mentions
from ..parsing import normalize_answer
from ..prompts import message_text

TOKEN_RE = re.compile(r"<[^<>\s]+>|\s*[^\s<]+|\s+|<")
_QUESTION_RE = re.compile(r"^Question: (.*)$", re.MULTILINE)
_SRC_RE = re.compile(
    r"You previously answered the question: (.*?) with the answer:\n(.*?)"
    r"(?: out of the possible options: .*)?\.\n\nYour task is now to self-report",
    re.DOTALL,
)
_ANSWER_CONTENT_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
# an answer still open at the end of the scored text counts as well
_ANSWER_SCORED_RE = re.compile(r"<answer>(.*?)(?:</answer>|\Z)", re.DOTALL)

UNKNOWN_PROB = 0.02
FILLER = (
    "Looking at the image, the main object is in the center.",
    "The background gives some context about the scene.",
    "The colours and shapes narrow down the possibilities.",
    "Several details are consistent with one reading.",
    "Some cues are ambiguous, so I weigh them carefully.",
    "The question asks about a specific property.",
    "Common sense about such scenes helps here.",
    "I compare the options against what is visible.",
)
MENTIONS = (
    "This points to {a}.",
    "So the answer is likely {a}.",
    "{a} fits the visual cues.",
    "I am fairly sure it is {a}.",
)


def tokenize(text: str) -> list[str]:
    return TOKEN_RE.findall(text)


def request_hash(method: str, path: str, body: bytes | None) -> str:
    h = hashlib.sha256(f"{method} {path}\n".encode())
    h.update(body or b"")
    return h.hexdigest()


def _unit(*parts) -> float:
    """Deterministic pseudo-uniform in [0, 1) from arbitrary parts."""
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


def _token_entry(text: str, logprob: float, entropy: float, alternatives: list[tuple[str, float]]) -> dict:
    alts = sorted([(text, logprob)] + alternatives, key=lambda t: -t[1])
    return {
        "token": text,
        "logprob": logprob,
        "entropy": entropy,
        "top_logprobs": [{"token": t, "logprob": lp} for t, lp in alts],
    }


def _filler_entry(text: str, position: int) -> dict:
    u, v = _unit("lp", position, text), _unit("h", position, text)
    lp = -(0.02 + 0.6 * u)
    p = math.exp(lp)
    alt = math.log((1 - p) / 2)
    return _token_entry(text, lp, 0.05 + 1.5 * v, [("_", alt), ("__", alt)])


def _answer_entry(text: str, lp: float, others: list[str]) -> dict:
    p = math.exp(lp)
    rest = 1.0 - p
    if rest <= 0:
        return _token_entry(text, lp, 0.0, [])
    alt = math.log(rest / 2)
    ent = -p * lp - rest * alt
    names = (others + ["_", "__"])[:2]
    return _token_entry(text, lp, max(ent, 0.0), [(names[0], alt), (names[1], alt)])


class StubBackend:
    def __init__(self, world: dict, script: dict[str, dict] | None = None, fail_first: int = 0):
        self.world = world
        self.gamma = float(world.get("gamma", 1.0))
        self.min_mentions = int(world.get("min_mentions", 0))
        self.max_mentions = int(world.get("max_mentions", 4))
        self.parse_fail_rate = float(world.get("parse_fail_rate", 0.0))
        self.max_context_chars = world.get("max_context_chars")
        self.supports_score = bool(world.get("score", True))
        self.items = {it["question"]: it for it in world.get("items", [])}
        self.script = dict(script or {})
        self._fail_left = fail_first
        self._lock = threading.Lock()
        self.calls: list[str] = []

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "StubBackend":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")), **kwargs)

    # -- transport -------------------------------------------------------------

    def request(self, method: str, path: str, body: bytes | None = None) -> dict:
        from .backend import error_from_body

        status, data = self.handle(method, path, body)
        if status >= 400:
            raise error_from_body(status, data)
        return data

    def handle(self, method: str, path: str, body: bytes | None) -> tuple[int, dict]:
        with self._lock:
            self.calls.append(path)
            if self._fail_left > 0 and path != "/v1/capabilities":
                self._fail_left -= 1
                return 500, {"error": {"code": "server_error", "message": "scripted failure"}}
        key = request_hash(method, path, body)
        if key in self.script:
            resp = dict(self.script[key])
            return int(resp.pop("__status", 200)), resp
        if method == "GET" and path == "/v1/capabilities":
            return 200, {"chat": True, "score": self.supports_score}
        if method != "POST":
            return 404, {"error": {"code": "not_found", "message": f"{method} {path}"}}
        try:
            payload = json.loads(body or b"{}")
        except ValueError:
            return 400, {"error": {"code": "bad_request", "message": "invalid JSON"}}
        if path == "/v1/chat/completions":
            handler = self._chat
        elif path == "/v1/score" and self.supports_score:
            handler = self._score
        else:
            return 404, {"error": {"code": "not_found", "message": path}}
        overflow = self._overflow(payload)
        if overflow:
            return 400, {"error": {"code": "context_length_exceeded", "message": overflow}}
        return 200, handler(payload, body or b"")

    # -- simulation ------------------------------------------------------------

    def _overflow(self, payload: dict) -> str | None:
        if self.max_context_chars is None:
            return None
        size = sum(len(message_text(m)) for m in payload.get("messages", []))
        size += len(payload.get("continuation", ""))
        if size > self.max_context_chars:
            return f"context of {size} chars exceeds {self.max_context_chars}"
        return None

    def _conversation(self, messages: list[dict]):
        users = [message_text(m) for m in messages if m["role"] == "user"]
        first = users[0] if users else ""
        src = _SRC_RE.search(first)
        if src:
            question, answer = src.group(1), src.group(2)
        else:
            m = _QUESTION_RE.search(first)
            question, answer = (m.group(1) if m else ""), None
        return first, users[-1] if users else "", question, answer

    def _reasoning_condition(self, model: str, first_user: str) -> bool:
        return "<think>" in first_user or "Thinking" in model

    def _answer_prob(self, question: str, answer: str, reasoning: bool) -> tuple[float, list[str]]:
        item = self.items.get(question)
        if item is None:
            return UNKNOWN_PROB, []
        probs = item["probs_cot"] if reasoning and "probs_cot" in item else item["probs"]
        key = normalize_answer(answer)
        others = [c for c in item["candidates"] if normalize_answer(c) != key]
        for cand, p in zip(item["candidates"], probs):
            if normalize_answer(cand) == key:
                return float(p), others
        return UNKNOWN_PROB, others

    def _src_yes_prob(self, question: str, answer: str, reasoning: bool) -> float:
        p, _ = self._answer_prob(question, answer, reasoning)
        return min(max(0.15 + 0.7 * p + 0.1 * (_unit("src", question, answer) - 0.5), 0.01), 0.99)

    def _score_text(self, model: str, messages: list[dict], prefix: str, text: str) -> list[dict]:
        """Per-token entries for ``text`` continuing the assistant ``prefix``."""
        first, _, question, src_answer = self._conversation(messages)
        reasoning = self._reasoning_condition(model, first)
        history = "".join(message_text(m) for m in messages if m["role"] == "assistant")
        tokens = tokenize(text)
        entries = [None] * len(tokens)
        full = prefix + text
        starts = np.cumsum([len(prefix)] + [len(t) for t in tokens])
        for match in _ANSWER_SCORED_RE.finditer(full):
            c0, c1 = match.span(1)
            content = match.group(1).strip()
            idx = [i for i in range(len(tokens)) if starts[i] < c1 and starts[i + 1] > c0]
            if not content or not idx:
                continue
            if src_answer is not None:
                s = self._src_yes_prob(question, src_answer, reasoning)
                low = content.lower()
                p = s if low == "yes" else (1 - s) if low == "no" else UNKNOWN_PROB
                lp_total, others = math.log(p), (["no"] if low == "yes" else ["yes"])
            else:
                p, others = self._answer_prob(question, content, reasoning)
                m = len(find_answer_mentions(history + full[:c0], content))
                lp_total = math.log(p) * math.exp(-self.gamma * m)
            # the whole answer's mass is split over the tokens being scored
            n_ans = len(tokenize(match.group(1)))
            per = lp_total / max(n_ans, len(idx))
            for i in idx:
                entries[i] = _answer_entry(tokens[i], per, others)
        return [e if e is not None else _filler_entry(t, i) for i, (t, e) in enumerate(zip(tokens, entries))]

    def _compose(self, rng: np.random.Generator, model: str, messages: list[dict], seed_key) -> str:
        first, last, question, src_answer = self._conversation(messages)
        reasoning_cond = self._reasoning_condition(model, first)
        think = reasoning_cond or "<think>" in last
        if src_answer is not None:
            s = self._src_yes_prob(question, src_answer, reasoning_cond)
            answer = "yes" if rng.random() < s else "no"
        else:
            prior = [_ANSWER_CONTENT_RE.findall(message_text(m)) for m in messages if m["role"] == "assistant"]
            prior = [a[-1].strip() for a in prior if a]
            item = self.items.get(question)
            if prior:
                answer = prior[-1]
            elif item is None:
                answer = "unknown"
            else:
                probs = np.asarray(item["probs_cot"] if reasoning_cond and "probs_cot" in item else item["probs"])
                answer = item["candidates"][int(rng.choice(len(probs), p=probs / probs.sum()))]
        body = f"<answer>{answer}</answer>"
        if _unit("fail", *seed_key) < self.parse_fail_rate:
            body = f"<answer>{answer}"
        if not think:
            return body
        m = int(rng.integers(self.min_mentions, self.max_mentions + 1))
        n_fill = int(rng.integers(2, 5))
        sentences = [FILLER[i] for i in rng.choice(len(FILLER), size=n_fill, replace=False)]
        sentences += [MENTIONS[int(rng.integers(len(MENTIONS)))].format(a=answer) for _ in range(m)]
        order = rng.permutation(len(sentences))
        trace = " ".join(sentences[i] for i in order)
        return f"<think>{trace}</think>\n{body}"

    def _chat(self, payload: dict, body: bytes) -> dict:
        model = payload.get("model", "")
        messages = payload["messages"]
        n = int(payload.get("n", 1))
        digest = hashlib.sha256(body).digest()
        base = int.from_bytes(digest[:8], "big")
        choices = []
        for i in range(n):
            rng = np.random.default_rng([base, i])
            text = self._compose(rng, model, messages, (base, i))
            choice = {"index": i, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}
            if payload.get("logprobs"):
                choice["logprobs"] = {"content": self._score_text(model, messages, "", text)}
            choices.append(choice)
        return {"object": "chat.completion", "model": model, "choices": choices}

    def _score(self, payload: dict, body: bytes) -> dict:
        messages = payload["messages"]
        prefix = ""
        history = messages
        if messages and messages[-1]["role"] == "assistant":
            prefix = message_text(messages[-1])
            history = messages[:-1]
        entries = self._score_text(payload.get("model", ""), history, prefix, payload.get("continuation", ""))
        k = payload.get("top_logprobs")
        if k is not None:
            for e in entries:
                e["top_logprobs"] = e["top_logprobs"][:k]
        return {"tokens": entries}


class _Handler(BaseHTTPRequestHandler):
    backend: StubBackend

    def _reply(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else None
        status, data = self.backend.handle(self.command, self.path, body)
        raw = json.dumps(data).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    do_GET = _reply
    do_POST = _reply

    def log_message(self, format, *args):
        pass


class StubServer:
    """Serve a :class:`StubBackend` over HTTP on a background thread."""

    def __init__(self, backend: StubBackend, host: str = "127.0.0.1", port: int = 0):
        handler = type("StubHandler", (_Handler,), {"backend": backend})
        self.backend = backend
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "StubServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
