import asyncio
import json

import httpx
import pytest

from multiquery.backends import (
    MODES,
    AuthError,
    BackendError,
    BackendRequest,
    BackendResponse,
    ContextLengthError,
    FailureModeProfile,
    MissingRecording,
    MockBackend,
    OpenAICompatBackend,
    RecordingBackend,
    ReplayBackend,
    ReplayStore,
    Source,
    TransportError,
    Usage,
)
from multiquery.model import MultiQueryJob
from multiquery.parsing import Grade, parse
from multiquery.prompt import DecodingParams, estimate_tokens, render

QUERIES = [f"What was said about topic {i}?" for i in range(5)]
JOB = MultiQueryJob.build("m", " ".join(f"word{i}" for i in range(200)), QUERIES)


def request(job=JOB, model="mock", params=None):
    return BackendRequest(render(job), params or DecodingParams(), model)


def complete(backend, req):
    return asyncio.run(backend.complete(req))


# --------------------------------------------------------------------------
# mock


def test_profile_parsing_and_validation():
    p = FailureModeProfile.parse("wellformed=0.8, hallucination=0.2", seed=4)
    assert p.probabilities == {"wellformed": 0.8, "hallucination": 0.2} and p.seed == 4
    assert FailureModeProfile.parse("truncated").probabilities == {"truncated": 1.0}
    with pytest.raises(ValueError):
        FailureModeProfile({"wellformed": 0.5})
    with pytest.raises(ValueError):
        FailureModeProfile({"nonsense": 1.0})


EXPECTED = {
    "wellformed": (Grade.STRICT, 5),
    "numbered_no_array": (Grade.SALVAGED, 5),
    "hallucination": (Grade.FAILED, 0),
    "truncated": (Grade.SALVAGED, 4),
    "stray_brackets": (Grade.SALVAGED, 5),
    "wrong_keys": (Grade.SALVAGED, 5),
    "yaml_instead_of_json": (Grade.FAILED, 0),
}


@pytest.mark.parametrize("mode", MODES)
def test_each_mode_parses_as_its_failure_class(mode):
    backend = MockBackend(FailureModeProfile.single(mode))
    resp = complete(backend, request())
    rep = parse(resp.text, QUERIES)
    assert (rep.grade, rep.matched_count) == EXPECTED[mode]
    assert rep.outcome.truncation_detected == (mode == "truncated")
    assert rep.outcome.keys_normalized == (mode == "wrong_keys")
    assert resp.source is Source.MOCK
    assert resp.usage == Usage(estimate_tokens(request().prompt.text), estimate_tokens(resp.text))
    assert backend.modes == [mode]


@pytest.mark.parametrize("mode", ["truncated", "wrong_keys", "stray_brackets", "numbered_no_array"])
def test_single_query_modes_still_recoverable(mode):
    job = JOB.subset(0, 1)
    resp = complete(MockBackend(FailureModeProfile.single(mode)), request(job))
    assert parse(resp.text, job.query_texts).matched_count == 1


def test_mock_is_deterministic_per_request():
    profile = FailureModeProfile.parse("wellformed=0.5,truncated=0.5", seed=9)
    a = MockBackend(profile)
    b = MockBackend(profile)
    other = MultiQueryJob.build("z", "different text entirely", ["q?"])
    complete(a, request(other))  # a has seen an extra request first
    assert complete(a, request()).text == complete(b, request()).text


def test_mock_summaries_echo_query():
    resp = complete(MockBackend(), request())
    rep = parse(resp.text, QUERIES)
    assert all(p.summary.startswith(f"On {p.query_text}:") for p in rep.pairs)


def test_single_query_profile_used_for_one_query_prompts():
    backend = MockBackend(FailureModeProfile.single("hallucination"),
                          single_query_profile=FailureModeProfile.single("wellformed"))
    assert parse(complete(backend, request()).text, QUERIES).grade is Grade.FAILED
    one = JOB.subset(2, 3)
    assert parse(complete(backend, request(one)).text, one.query_texts).grade is Grade.STRICT


# --------------------------------------------------------------------------
# OpenAI-compatible client


def completion_body(text="[]", usage=True):
    body = {"choices": [{"message": {"role": "assistant", "content": text}}]}
    if usage:
        body["usage"] = {"prompt_tokens": 11, "completion_tokens": 7}
    return body


def client(handler, **kw):
    kw.setdefault("backoff", 0.0)
    return OpenAICompatBackend("http://llm.test/v1", "gpt-4o", "sk-test", transport=httpx.MockTransport(handler), **kw)


def test_live_request_shape_and_usage():
    seen = {}

    def handler(req: httpx.Request):
        seen["url"] = str(req.url)
        seen["auth"] = req.headers["authorization"]
        seen["body"] = json.loads(req.content)
        return httpx.Response(200, json=completion_body("hello"))

    req = request(model="gpt-4o", params=DecodingParams(temperature=0.5, max_output_tokens=123))
    resp = complete(client(handler), req)
    assert seen["url"] == "http://llm.test/v1/chat/completions"
    assert seen["auth"] == "Bearer sk-test"
    assert seen["body"] == {
        "model": "gpt-4o",
        "messages": [{"role": "user", "content": req.prompt.text}],
        "temperature": 0.5,
        "max_tokens": 123,
    }
    assert resp.text == "hello" and resp.usage == Usage(11, 7) and not resp.usage_estimated
    assert resp.source is Source.LIVE


def test_missing_usage_is_estimated():
    resp = complete(client(lambda r: httpx.Response(200, json=completion_body("a b c", usage=False))), request())
    assert resp.usage_estimated
    assert resp.usage.output_tokens == estimate_tokens("a b c")


def test_retries_rate_limits_and_server_errors():
    statuses = iter([429, 503, 200])

    def handler(req):
        code = next(statuses)
        return httpx.Response(code, json=completion_body("ok") if code == 200 else {"error": "busy"})

    assert complete(client(handler), request()).text == "ok"


def test_gives_up_after_attempts():
    calls = []

    def handler(req):
        calls.append(1)
        raise httpx.ConnectError("down")

    with pytest.raises(TransportError):
        complete(client(handler, attempts=2), request())
    assert len(calls) == 2


@pytest.mark.parametrize("status, body, exc", [
    (401, {"error": "bad key"}, AuthError),
    (400, {"error": {"code": "context_length_exceeded"}}, ContextLengthError),
    (400, {"error": "other"}, BackendError),
    (200, {"nothing": True}, BackendError),
])
def test_error_mapping(status, body, exc):
    with pytest.raises(exc):
        complete(client(lambda r: httpx.Response(status, json=body)), request())


def test_missing_key_is_auth_error(monkeypatch):
    monkeypatch.delenv("MULTIQUERY_API_KEY", raising=False)
    backend = OpenAICompatBackend("http://llm.test/v1", "m", transport=httpx.MockTransport(lambda r: None))
    with pytest.raises(AuthError):
        complete(backend, request())


# --------------------------------------------------------------------------
# record / replay


def test_record_then_replay(tmp_path):
    store = ReplayStore(tmp_path)
    rec = RecordingBackend(MockBackend(FailureModeProfile.single("truncated")), store)
    original = complete(rec, request())
    assert len(store) == 1
    replayed = complete(ReplayBackend(store), request())
    assert replayed.text == original.text and replayed.usage == original.usage
    assert replayed.source is Source.REPLAY


def test_store_is_append_only(tmp_path):
    store = ReplayStore(tmp_path)
    req = request()
    assert store.record(req, BackendResponse("first", Usage(1, 1)))
    assert not store.record(req, BackendResponse("second", Usage(1, 1)))
    assert store.replay(req).text == "first"


def test_replay_key_covers_model_and_params(tmp_path):
    store = ReplayStore(tmp_path)
    store.record(request(), BackendResponse("x", Usage()))
    with pytest.raises(MissingRecording):
        store.replay(request(model="gpt-4o"))
    with pytest.raises(MissingRecording):
        store.replay(request(params=DecodingParams(temperature=0.2)))
