import json
import math

import httpx
import pytest

from conftest import FIXTURE
from reasonuq import estimators as est
from reasonuq.client import (
    BackendConfig,
    BackendError,
    ContextOverflow,
    HttpBackend,
    InferenceClient,
    Question,
    StubBackend,
    StubServer,
    UnsupportedBackend,
    canonical_json,
    load_preset,
    locate_spans,
    preset_names,
    record_from_generation,
)
from reasonuq.client.stub import request_hash, tokenize
from reasonuq.parsing import JudgeConfig, ParseFailure
from reasonuq.prompts import answer_prompt
from reasonuq.records import TokenScore
from test_records import make_record


def questions():
    return [Question.from_dict(json.loads(line)) for line in (FIXTURE / "questions.jsonl").read_text().splitlines()]


def make_client(world, script=None, fail_first=0, **cfg):
    backend = StubBackend(world, script=script, fail_first=fail_first)
    config = BackendConfig(base_url="stub:", **cfg)
    client = InferenceClient(backend, "Qwen3-VL-8B-Instruct", load_preset("Qwen3-VL-8B-Instruct"), config,
                             sleep=lambda s: None)
    client.check_capabilities()
    return client


def primary(client, q, mode="cot", seed=0):
    gen = client.generate(answer_prompt(q.dataset, mode, q.question, q.options), q.image_ref, 1, seed)[0]
    return record_from_generation(q, gen, mode, client.model, JudgeConfig())


def test_presets_match_decoding_table():
    table = {
        "Gemma3-Series": (1.0, 0.95, 64, 1.0),
        "Qwen3-VL-8B-Instruct": (1.0, 1.0, 40, 2.0),
        "Qwen3-VL-8B-Thinking": (1.0, 0.95, 20, 1.5),
        "Qwen3-VL-32B-Instruct": (0.7, 0.80, 20, 1.5),
    }
    assert preset_names() == sorted(table)
    for name, values in table.items():
        p = load_preset(name)
        assert (p.temperature, p.top_p, p.top_k, p.presence_penalty) == values
    assert load_preset("google/gemma-3-4b-it") == load_preset("Gemma3-Series")
    assert load_preset("Qwen3-VL-8B-Instruct", temperature=0.5).temperature == 0.5
    with pytest.raises(KeyError):
        load_preset("gpt-unknown")
    with pytest.raises(ValueError):
        load_preset("Gemma3-Series", temperature=0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        BackendConfig(base_url="http://x", timeout=0)
    with pytest.raises(ValueError):
        BackendConfig(base_url="http://x", max_in_flight=0)


def test_stub_tokens_concatenate_to_text():
    text = "<think>It is 4.5 apples, not 4.</think>\n<answer>4</answer>"
    assert "".join(tokenize(text)) == text


def test_single_completion_has_logprobs(world):
    client = make_client(world)
    (gen,) = client.generate("Question: " + questions()[0].question, n_samples=1)
    assert gen.index == 0 and gen.tokens and "".join(t.text for t in gen.tokens) == gen.text
    assert all(t.logprob <= 0 for t in gen.tokens)


def test_ten_completions_indexed(world):
    client = make_client(world)
    q = questions()[0]
    gens = client.generate(answer_prompt(q.dataset, "cot", q.question), n_samples=10, seed=3)
    assert [g.index for g in gens] == list(range(10))
    assert len({g.text for g in gens}) > 1


def test_retries_then_succeeds(world, caplog):
    client = make_client(world, fail_first=2)
    gens = client.generate("Question: " + questions()[0].question)
    assert len(gens) == 1 and client.retry_count == 2
    assert sum("retry" in r.message for r in caplog.records) == 2


def test_retry_budget_exhausted(world):
    client = make_client(world, fail_first=5, retries=2)
    with pytest.raises(BackendError):
        client.generate("Question: x")
    assert client.retry_count == 2


def test_record_from_generation_spans(world):
    client = make_client(world)
    q = questions()[0]
    rec = primary(client, q)
    rec.validate()
    assert rec.parse_ok and rec.spans.reasoning_len > 0 and rec.answer_text().strip()
    assert rec.meta["prompt_version"]
    no_cot = primary(client, q, "no_cot")
    assert no_cot.spans.reasoning_len == 0


def test_parse_failure_record():
    q = questions()[0]
    tokens = tuple(TokenScore(t, -0.1) for t in tokenize("<answer>cat"))
    from reasonuq.client import Generation
    rec = record_from_generation(q, Generation(0, "<answer>cat", tokens), "no_cot", "m", JudgeConfig())
    assert not rec.parse_ok and rec.correct == 0.0 and rec.spans is None and "parse_error" in rec.meta
    rec.validate()


def test_locate_spans_rejects_mismatched_tokens():
    with pytest.raises(ParseFailure):
        locate_spans("<answer>cat</answer>", [TokenScore("<answer>", -0.1), TokenScore("dog", -0.1)])


def test_scripted_src_gives_three_quarters(world):
    rec = make_record(id="s1", question="What?", raw_text="<answer>cat</answer>")
    client = make_client(world)
    from reasonuq.prompts import src_prompt
    prompt = src_prompt(rec.mode, rec.question, "cat", rec.options)
    script = {}
    for word, lp in (("yes", math.log(0.6)), ("no", math.log(0.2))):
        body = canonical_json(client.score_payload("", f"<answer>{word}</answer>", None, prompt))
        script[request_hash("POST", "/v1/score", body)] = {"tokens": [
            {"token": "<answer>", "logprob": -0.01}, {"token": word, "logprob": lp},
            {"token": "</answer>", "logprob": -0.02}]}
    client = make_client(world, script=script)
    probe = client.probe_src(rec)
    assert probe.logp_yes == math.log(0.6) and probe.logp_no == math.log(0.2)
    assert est.src_confidence(probe.logp_yes, probe.logp_no) == pytest.approx(0.75)
    assert probe.extra["token_rule"]


def test_equal_scores_give_half(world):
    rec = make_record(id="s1", question="What?", raw_text="<answer>cat</answer>")
    client = make_client(world)
    from reasonuq.prompts import src_prompt
    prompt = src_prompt(rec.mode, rec.question, "cat", rec.options)
    script = {}
    for word in ("yes", "no"):
        body = canonical_json(client.score_payload("", f"<answer>{word}</answer>", None, prompt))
        script[request_hash("POST", "/v1/score", body)] = {"tokens": [
            {"token": "<answer>", "logprob": 0.0}, {"token": word, "logprob": -0.7},
            {"token": "</answer>", "logprob": 0.0}]}
    probe = make_client(world, script=script).probe_src(rec)
    assert est.src_confidence(probe.logp_yes, probe.logp_no) == 0.5


def test_src_needs_parsed_answer(world):
    failed = make_record(parse_ok=False, parsed_answer=None, spans=None)
    with pytest.raises(ParseFailure):
        make_client(world).probe_src(failed)


def test_src_with_reasoning_records_prefix(world):
    client = make_client(world)
    rec = primary(client, questions()[0])
    probe = client.probe_src(rec, seed=1)
    assert probe.extra["reasoning"].startswith("<think>")
    assert 0 < est.src_confidence(probe.logp_yes, probe.logp_no) < 1


def test_score_forced_examples(world):
    client = make_client(world)
    assert client.score_forced("<think>x</think>", "") == []
    a = client.score_forced("<think>cat</think><answer>", "cat</answer>")
    b = client.score_forced("<think>cat</think><answer>", "cat</answer>")
    assert a == b and "".join(t.text for t in a) == "cat</answer>"


def test_scripted_scores_echo_exactly(world):
    client = make_client(world)
    body = canonical_json(client.score_payload("ctx", "ab"))
    tokens = [{"token": "a", "logprob": -0.123456789012345}, {"token": "b", "logprob": -2.5}]
    client = make_client(world, script={request_hash("POST", "/v1/score", body): {"tokens": tokens}})
    got = client.score_forced("ctx", "ab")
    assert [(t.text, t.logprob) for t in got] == [("a", -0.123456789012345), ("b", -2.5)]


def test_masked_context_lowers_answer_likelihood(world):
    client = make_client(world)
    q = questions()[0]
    prompt = answer_prompt(q.dataset, "cot", q.question)
    ans = "green"
    full = sum(t.logprob for t in client.score_forced(f"<think>It is {ans}. So {ans}.</think>\n<answer>",
                                                         ans + "</answer>", None, prompt)[:1])
    masked = sum(t.logprob for t in client.score_forced("<think>It is [MASK]. So [MASK].</think>\n<answer>",
                                                           ans + "</answer>", None, prompt)[:1])
    assert full > masked


def test_score_capability_required(world):
    backend = StubBackend({**world, "score": False})
    client = InferenceClient(backend, "m", load_preset("Qwen3-VL-8B-Instruct"))
    client.check_capabilities()
    with pytest.raises(UnsupportedBackend):
        client.check_capabilities(require_score=True)


def test_connect_to_stub_file():
    client = InferenceClient.connect(BackendConfig(base_url=f"stub:{FIXTURE / 'world.json'}"),
                                     "m", load_preset("Qwen3-VL-8B-Instruct"), require_score=True)
    assert client.capabilities == {"chat": True, "score": True}


def test_payloads_are_byte_identical(world):
    a, b = make_client(world), make_client(world)
    msgs = [{"role": "user", "content": [{"type": "text", "text": "hi"}]}]
    assert canonical_json(a.chat_payload(msgs, 10, 7)) == canonical_json(b.chat_payload(msgs, 10, 7))
    assert canonical_json(a.score_payload("c", "x", "img://1", "p")) == canonical_json(b.score_payload("c", "x", "img://1", "p"))


def test_generation_is_deterministic(world):
    q = questions()[1]
    assert primary(make_client(world), q, seed=4) == primary(make_client(world), q, seed=4)


def test_sequential_rounds(world):
    client = make_client(world)
    rec = primary(client, questions()[0])
    one = client.run_sequential_rounds(rec, 1)
    assert one.values == [math.fsum(rec.answer_logprobs())]
    three = client.run_sequential_rounds(rec, 3)
    assert three.completed == 3 and three.stopped is None
    assert all(b >= a for a, b in zip(three.values, three.values[1:]))
    assert all(v <= 0 for v in three.values)
    with pytest.raises(ValueError):
        client.run_sequential_rounds(rec, 0)


def test_sequential_rounds_stop_on_overflow(world):
    client = make_client(world)
    rec = primary(client, questions()[0])
    limit = len(rec.raw_text) + 2 * len(answer_prompt(rec.dataset, rec.mode, rec.question, rec.options))
    small = make_client({**world, "max_context_chars": limit})
    res = small.run_sequential_rounds(rec, 6)
    assert 1 <= res.completed < 6 and res.stopped.startswith("context overflow")


def test_overflow_error_type(world):
    client = make_client({**world, "max_context_chars": 5})
    with pytest.raises(ContextOverflow):
        client.generate("a long prompt")


def test_map_records_collects_failures(world):
    client = make_client(world, max_in_flight=3)

    def fn(q):
        if q.id.endswith("3"):
            raise ParseFailure("boom")
        return q.id.upper()

    results, failures = client.map_records(fn, questions()[:6])
    assert sorted(failures) == ["mathvista-0003"] and len(results) == 5


def test_http_stub_server_round_trip(world):
    with StubServer(StubBackend(world)) as server:
        caps = httpx.get(server.url + "/v1/capabilities").json()
        assert caps == {"chat": True, "score": True}
        config = BackendConfig(base_url=server.url, retries=0)
        client = InferenceClient(HttpBackend(config), "Qwen3-VL-8B-Instruct",
                                 load_preset("Qwen3-VL-8B-Instruct"), config)
        client.check_capabilities(require_score=True)
        local = make_client(world)
        q = questions()[2]
        assert primary(client, q, seed=2) == primary(local, q, seed=2)
        with pytest.raises(BackendError) as err:
            client._call("POST", "/v1/nope", {})
        assert err.value.status == 404


def test_http_unreachable_backend_raises():
    config = BackendConfig(base_url="http://127.0.0.1:9", retries=0, timeout=2)
    client = InferenceClient(HttpBackend(config), "m", load_preset("Qwen3-VL-8B-Instruct"), config)
    with pytest.raises(BackendError):
        client.check_capabilities()
