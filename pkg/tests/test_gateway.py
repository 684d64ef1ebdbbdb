import asyncio

import pytest

from multiquery.backends import BackendResponse, FailureModeProfile, MockBackend, TransportError, Usage
from multiquery.gateway import (
    CoalescePolicy,
    Fallback,
    Gateway,
    GatewayTimeout,
    JobResult,
    run_job,
    run_single_query_job,
)
from multiquery.model import MatchMethod, MultiQueryJob
from multiquery.parsing import Grade

CONTEXT = " ".join(f"token{i}" for i in range(300))
QUERIES = [f"Question number {i}?" for i in range(1, 9)]


def job(n=8, context=CONTEXT, jid="j"):
    return MultiQueryJob.build(jid, context, QUERIES[:n])


def mock(mode="wellformed", single="wellformed"):
    return MockBackend(FailureModeProfile.single(mode), single_query_profile=FailureModeProfile.single(single))


def run(coro):
    return asyncio.run(coro)


class Flaky:
    """Delegates to a mock, failing the calls whose 1-based number is in ``fail``."""

    model_name = "mock"

    def __init__(self, fail, inner=None):
        self.fail = set(fail)
        self.inner = inner or mock()
        self.n = 0

    async def complete(self, request):
        self.n += 1
        if self.n in self.fail:
            raise TransportError("connection reset")
        return await self.inner.complete(request)


class Slow:
    model_name = "mock"

    async def complete(self, request):
        await asyncio.sleep(5)
        return BackendResponse("[]", Usage())


# --------------------------------------------------------------------------
# whole jobs


def test_wellformed_job_is_one_call():
    res = run(run_job(job(), policy=CoalescePolicy(), backend=mock()))
    assert res.backend_calls == 1 and res.fallback_invocations == 0
    assert res.grade is Grade.STRICT
    assert [p.query_index for p in res.pairs] == list(range(1, 9))
    assert all(p.matched for p in res.pairs)


def test_hallucination_with_empty_fallback():
    res = run(run_job(job(), policy=CoalescePolicy(fallback=Fallback.EMPTY), backend=mock("hallucination")))
    assert res.backend_calls == 1
    assert res.grade is Grade.FAILED
    assert all(p.summary == "" and p.match_method is MatchMethod.UNMATCHED for p in res.pairs)


def test_hallucination_with_retry_single():
    res = run(run_job(job(), policy=CoalescePolicy(), backend=mock("hallucination")))
    assert res.backend_calls == 9 and res.fallback_invocations == 8
    assert all(p.matched and p.retried for p in res.pairs)
    # the merged report reflects the multi-query parse only
    assert res.report.grade is Grade.FAILED and res.report.matched_count == 0


def test_truncated_retries_only_the_missing_tail():
    res = run(run_job(job(), backend=mock("truncated")))
    assert res.backend_calls == 2 and res.fallback_invocations == 1
    assert [p.retried for p in res.pairs] == [False] * 7 + [True]
    assert all(p.matched for p in res.pairs)


def test_retry_budget_caps_calls():
    pol = CoalescePolicy(max_single_retries_per_job=3)
    res = run(run_job(job(), policy=pol, backend=mock("hallucination")))
    assert res.backend_calls == 4 and res.fallback_invocations == 3
    assert sum(p.matched for p in res.pairs) == 3


def test_chunking():
    res = run(run_job(job(), policy=CoalescePolicy(max_queries_per_prompt=3), backend=mock()))
    assert res.backend_calls == 3
    assert len(res.chunk_reports) == 3
    assert [p.query_index for p in res.pairs] == list(range(1, 9))
    assert [p.query_text for p in res.pairs] == QUERIES


def test_failed_chunk_is_annotated_and_isolated():
    pol = CoalescePolicy(max_queries_per_prompt=3)
    res = run(run_job(job(), policy=pol, backend=Flaky({2})))
    assert res.backend_calls == 3
    assert len(res.errors) == 1
    err = res.errors[0]
    assert err.chunk == 1 and err.query_indices == (4, 5, 6) and err.error_type == "TransportError"
    assert [p.matched for p in res.pairs] == [True] * 3 + [False] * 3 + [True] * 2
    assert not any(p.retried for p in res.pairs)


def test_failed_retry_is_recorded():
    res = run(run_job(job(1), backend=Flaky({2}, mock("hallucination", "hallucination"))))
    assert res.backend_calls == 2
    assert res.pairs[0].retried and not res.pairs[0].matched
    assert res.errors[0].chunk == -1


def test_single_query_arm():
    res = run(run_single_query_job(job(), backend=mock()))
    assert res.mode == "single" and res.backend_calls == 8
    assert [p.query_index for p in res.pairs] == list(range(1, 9))
    assert all(p.matched for p in res.pairs)


def test_job_result_round_trip():
    res = run(run_job(job(), policy=CoalescePolicy(max_queries_per_prompt=5), backend=Flaky({1})))
    back = JobResult.from_record(res.to_record())
    assert back.to_record() == res.to_record()
    assert back.pairs == res.pairs


def test_usage_is_summed():
    res = run(run_job(job(), policy=CoalescePolicy(max_queries_per_prompt=4), backend=mock()))
    assert res.usage_total == res.call_usages[0] + res.call_usages[1]


# --------------------------------------------------------------------------
# policy


@pytest.mark.parametrize("kw", [
    {"window_ms": -1},
    {"max_queries_per_prompt": 0},
    {"max_single_retries_per_job": -2},
    {"fallback": "Sometimes"},
])
def test_policy_validation(kw):
    with pytest.raises(ValueError):
        CoalescePolicy(**kw)


def test_policy_record_overrides():
    base = CoalescePolicy(window_ms=10)
    pol = CoalescePolicy.from_record({"fallback": "Empty", "window_ms": None}, base)
    assert pol.fallback is Fallback.EMPTY and pol.window_ms == 10
    assert CoalescePolicy.from_record(pol.to_record()) == pol


# --------------------------------------------------------------------------
# online gateway


def test_fresh_metrics_have_no_ratio():
    snap = Gateway(mock()).metrics_snapshot()
    assert snap["requests_in"] == 0 and snap["backend_calls"] == 0
    assert "coalesce_ratio" not in snap


def test_gateway_run_job_metrics():
    async def go():
        gw = Gateway(mock())
        await gw.run_job(job())
        return gw.metrics_snapshot()

    snap = run(go())
    assert snap["requests_in"] == 8 and snap["backend_calls"] == 1
    assert snap["coalesce_ratio"] == 8.0
    assert snap["grades"]["Strict"] == 1


def test_submit_single_coalesces_by_context():
    async def go():
        backend = mock()
        gw = Gateway(backend, policy=CoalescePolicy(window_ms=50))
        a = [gw.submit_single(CONTEXT, q) for q in QUERIES[:4]]
        b = [gw.submit_single("another meeting entirely", q) for q in QUERIES[:2]]
        out = await asyncio.gather(*a, *b)
        return out, backend.calls, gw.metrics_snapshot()

    out, calls, snap = run(go())
    assert calls == 2
    assert [p.query_text for p in out] == QUERIES[:4] + QUERIES[:2]
    assert all(p.query_index == 1 and p.matched for p in out)
    assert snap["coalesce_ratio"] == 3.0


def test_submit_single_flushes_at_cap_and_shares_duplicates():
    async def go():
        backend = mock()
        gw = Gateway(backend, policy=CoalescePolicy(window_ms=10_000, max_queries_per_prompt=2))
        out = await asyncio.wait_for(asyncio.gather(
            gw.submit_single(CONTEXT, QUERIES[0]),
            gw.submit_single(CONTEXT, QUERIES[0]),
            gw.submit_single(CONTEXT, QUERIES[1]),
        ), 2)
        return out, backend.calls

    out, calls = run(go())
    assert calls == 1
    assert out[0] == out[1]


def test_submit_single_one_query_ratio():
    async def go():
        gw = Gateway(mock(), policy=CoalescePolicy(window_ms=1))
        await gw.submit_single(CONTEXT, QUERIES[0])
        return gw.metrics_snapshot()

    assert run(go())["coalesce_ratio"] == 1.0


def test_submit_single_timeout():
    async def go():
        gw = Gateway(Slow(), policy=CoalescePolicy(window_ms=0))
        with pytest.raises(GatewayTimeout):
            await gw.submit_single(CONTEXT, QUERIES[0], timeout=0.05)
        for t in list(gw._tasks):
            t.cancel()

    run(go())


def test_submit_single_backend_error_reaches_every_waiter():
    async def go():
        gw = Gateway(Flaky({1}), policy=CoalescePolicy(window_ms=10, fallback=Fallback.EMPTY))
        return await asyncio.gather(
            gw.submit_single(CONTEXT, QUERIES[0]),
            gw.submit_single(CONTEXT, QUERIES[1]),
            return_exceptions=True,
        )

    out = run(go())
    assert all(isinstance(x, TransportError) for x in out)


def test_submit_single_rejects_empty_query():
    async def go():
        with pytest.raises(ValueError):
            await Gateway(mock()).submit_single(CONTEXT, "   ")

    run(go())


def test_drain_flushes_open_batches():
    async def go():
        backend = mock()
        gw = Gateway(backend, policy=CoalescePolicy(window_ms=60_000))
        task = asyncio.ensure_future(gw.submit_single(CONTEXT, QUERIES[0]))
        await asyncio.sleep(0)
        await gw.drain()
        return (await task), backend.calls

    pair, calls = run(go())
    assert calls == 1 and pair.matched
