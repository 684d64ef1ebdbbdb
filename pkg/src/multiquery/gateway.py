"""Coalescing of same-context queries into multi-query backend calls.

:func:`run_job` is the library entry point for a whole job. :class:`Gateway`
adds online batching: single (context, query) requests that arrive within a
window and share a context fingerprint are sent as one prompt.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum

from .backends.base import BackendError, BackendRequest, Usage
from .costs import CostLedger, PricingTable, UnknownModel
from .model import MatchMethod, MultiQueryJob, QuerySummaryPair, make_queries
from .parsing import GRADE_ORDER, Grade, ParseOutcome, ParseReport, parse
from .prompt import DecodingParams, PromptError, PromptTemplate, render, template_for

logger = logging.getLogger(__name__)


class Fallback(str, Enum):
    EMPTY = "Empty"
    RETRY_SINGLE = "RetrySingle"


class GatewayTimeout(Exception):
    """A submitted request did not resolve before its deadline."""


@dataclass(frozen=True)
class CoalescePolicy:
    window_ms: float = 250.0
    max_queries_per_prompt: int = 10
    fallback: Fallback = Fallback.RETRY_SINGLE
    # None means one retry per query in the job.
    max_single_retries_per_job: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "fallback", Fallback(self.fallback))
        if self.window_ms < 0:
            raise ValueError("window_ms must be >= 0")
        if self.max_queries_per_prompt < 1:
            raise ValueError("max_queries_per_prompt must be >= 1")
        if self.max_single_retries_per_job is not None and self.max_single_retries_per_job < 0:
            raise ValueError("max_single_retries_per_job must be >= 0")

    def to_record(self) -> dict:
        return {
            "window_ms": self.window_ms,
            "max_queries_per_prompt": self.max_queries_per_prompt,
            "fallback": self.fallback.value,
            "max_single_retries_per_job": self.max_single_retries_per_job,
        }

    @classmethod
    def from_record(cls, record: dict | None, base: "CoalescePolicy | None" = None) -> "CoalescePolicy":
        base = base or cls()
        record = {k: v for k, v in (record or {}).items() if v is not None or k == "max_single_retries_per_job"}
        return replace(base, **record)


@dataclass(frozen=True)
class ChunkError:
    chunk: int
    query_indices: tuple[int, ...]
    error_type: str
    message: str
    exception: BaseException | None = field(default=None, compare=False, repr=False)

    def to_record(self) -> dict:
        return {
            "chunk": self.chunk,
            "query_indices": list(self.query_indices),
            "error_type": self.error_type,
            "message": self.message,
        }

    @classmethod
    def from_exception(cls, chunk: int, indices, exc: BaseException) -> "ChunkError":
        return cls(chunk, tuple(indices), type(exc).__name__, str(exc), exc)


@dataclass
class JobResult:
    job_id: str
    pairs: list[QuerySummaryPair]
    report: ParseReport
    backend_calls: int
    usage_total: Usage
    fallback_invocations: int = 0
    chunk_reports: list[ParseReport] = field(default_factory=list)
    call_usages: list[Usage] = field(default_factory=list)
    errors: list[ChunkError] = field(default_factory=list)
    mode: str = "multi"
    model: str = ""
    truncated: bool = False

    @property
    def grade(self) -> Grade:
        return self.report.grade

    def to_record(self) -> dict:
        return {
            "job_id": self.job_id,
            "mode": self.mode,
            "model": self.model,
            "pairs": [p.to_record() for p in self.pairs],
            "report": self.report.to_record(),
            "chunk_reports": [r.to_record() for r in self.chunk_reports],
            "backend_calls": self.backend_calls,
            "usage_total": self.usage_total.to_record(),
            "call_usages": [u.to_record() for u in self.call_usages],
            "fallback_invocations": self.fallback_invocations,
            "errors": [e.to_record() for e in self.errors],
            "truncated": self.truncated,
        }

    @classmethod
    def from_record(cls, record: dict) -> "JobResult":
        return cls(
            job_id=record["job_id"],
            pairs=[QuerySummaryPair.from_record(p) for p in record["pairs"]],
            report=ParseReport.from_record(record["report"]),
            backend_calls=int(record["backend_calls"]),
            usage_total=Usage.from_record(record.get("usage_total")),
            fallback_invocations=int(record.get("fallback_invocations", 0)),
            chunk_reports=[ParseReport.from_record(r) for r in record.get("chunk_reports", ())],
            call_usages=[Usage.from_record(u) for u in record.get("call_usages", ())],
            errors=[
                ChunkError(e["chunk"], tuple(e["query_indices"]), e["error_type"], e["message"])
                for e in record.get("errors", ())
            ],
            mode=record.get("mode", "multi"),
            model=record.get("model", ""),
            truncated=bool(record.get("truncated", False)),
        )


def merge_reports(reports: list[ParseReport], pairs) -> ParseReport:
    """Combine chunk reports: worst grade wins, flags are OR'd."""
    if not reports:
        return ParseReport(ParseOutcome(Grade.FAILED, ()), tuple(pairs), 0)
    worst = max((r.grade for r in reports), key=GRADE_ORDER.__getitem__)
    stages: list[str] = []
    for r in reports:
        stages.extend(s for s in r.outcome.stages_applied if s not in stages)
    outcome = ParseOutcome(
        worst,
        tuple(stages),
        truncation_detected=any(r.outcome.truncation_detected for r in reports),
        keys_normalized=any(r.outcome.keys_normalized for r in reports),
    )
    return ParseReport(outcome, tuple(pairs), sum(r.raw_record_count for r in reports))


def _reindex(pairs, offset: int) -> list[QuerySummaryPair]:
    return [replace(p, query_index=p.query_index + offset) for p in pairs]


def _model_name(backend) -> str:
    return getattr(backend, "model_name", "mock")


class _Run:
    """Mutable state shared by the calls of one job."""

    def __init__(self, job, template, params, backend):
        self.job = job
        self.template = template or template_for(job.output_format)
        self.params = params or DecodingParams()
        self.backend = backend
        self.model = _model_name(backend)
        self.calls = 0
        self.usages: list[Usage] = []
        self.truncated = False

    async def call(self, sub: MultiQueryJob) -> ParseReport:
        prompt = render(sub, self.template, self.params)
        self.truncated |= prompt.truncated
        self.calls += 1
        response = await self.backend.complete(BackendRequest(prompt, self.params, self.model))
        self.usages.append(response.usage)
        return parse(response.text, sub.queries, self.template.output_format)

    def single(self, query_text: str) -> MultiQueryJob:
        return MultiQueryJob(self.job.transcript, make_queries([query_text]), None, self.job.output_format)

    def result(self, pairs, parsed_pairs, reports, errors, fallbacks, mode) -> JobResult:
        return JobResult(
            job_id=self.job.id,
            pairs=pairs,
            report=merge_reports(reports, parsed_pairs),
            backend_calls=self.calls,
            usage_total=sum(self.usages, Usage()),
            fallback_invocations=fallbacks,
            chunk_reports=reports,
            call_usages=list(self.usages),
            errors=errors,
            mode=mode,
            model=self.model,
            truncated=self.truncated,
        )


async def run_job(
    job: MultiQueryJob,
    template: PromptTemplate | None = None,
    params: DecodingParams | None = None,
    policy: CoalescePolicy | None = None,
    backend=None,
) -> JobResult:
    """Answer every query of ``job`` with as few backend calls as the policy allows.

    Jobs longer than ``max_queries_per_prompt`` are split into consecutive
    chunks. A chunk whose call or render fails is recorded in ``errors`` and
    its queries come back empty; the other chunks are unaffected.
    """
    if backend is None:
        raise ValueError("a backend is required")
    policy = policy or CoalescePolicy()
    run = _Run(job, template, params, backend)
    size = policy.max_queries_per_prompt
    n = len(job.queries)

    reports: list[ParseReport] = []
    pairs: list[QuerySummaryPair] = []
    errors: list[ChunkError] = []
    for chunk, start in enumerate(range(0, n, size)):
        sub = job.subset(start, start + size)
        try:
            report = await run.call(sub)
        except (BackendError, PromptError) as exc:
            logger.warning("job %s chunk %d failed: %s", job.id, chunk, exc)
            errors.append(ChunkError.from_exception(chunk, range(start + 1, start + len(sub.queries) + 1), exc))
            report = ParseReport(
                ParseOutcome(Grade.FAILED, ()),
                tuple(QuerySummaryPair(q.index, q.text, "", MatchMethod.UNMATCHED) for q in sub.queries),
            )
        reports.append(report)
        pairs.extend(_reindex(report.pairs, start))

    # The merged report keeps what parsing alone recovered; retries only touch ``pairs``.
    parsed_pairs = list(pairs)
    fallbacks = 0
    if policy.fallback is Fallback.RETRY_SINGLE:
        errored = {i for e in errors for i in e.query_indices}
        budget = n if policy.max_single_retries_per_job is None else policy.max_single_retries_per_job
        for pos, pair in enumerate(pairs):
            if pair.matched or pair.query_index in errored:
                continue
            if fallbacks >= budget:
                break
            fallbacks += 1
            try:
                retry = await run.call(run.single(pair.query_text))
            except (BackendError, PromptError) as exc:
                errors.append(ChunkError.from_exception(-1, (pair.query_index,), exc))
                pairs[pos] = replace(pair, retried=True)
                continue
            got = retry.pairs[0]
            pairs[pos] = QuerySummaryPair(pair.query_index, pair.query_text, got.summary, got.match_method, True)

    return run.result(pairs, parsed_pairs, reports, errors, fallbacks, "multi")


async def run_single_query_job(
    job: MultiQueryJob,
    template: PromptTemplate | None = None,
    params: DecodingParams | None = None,
    backend=None,
) -> JobResult:
    """Baseline arm: one prompt, with its own copy of the transcript, per query."""
    if backend is None:
        raise ValueError("a backend is required")
    run = _Run(job, template, params, backend)
    reports, pairs, errors = [], [], []
    for q in job.queries:
        try:
            report = await run.call(run.single(q.text))
        except (BackendError, PromptError) as exc:
            errors.append(ChunkError.from_exception(q.index - 1, (q.index,), exc))
            report = ParseReport(
                ParseOutcome(Grade.FAILED, ()), (QuerySummaryPair(1, q.text, "", MatchMethod.UNMATCHED),)
            )
        reports.append(report)
        pairs.extend(_reindex(report.pairs, q.index - 1))
    return run.result(pairs, list(pairs), reports, errors, 0, "single")


# --------------------------------------------------------------------------
# online coalescing


class _Batch:
    def __init__(self, key: str, context: str):
        self.key = key
        self.context = context
        self.slots: dict[str, list[asyncio.Future]] = {}
        self.timer: asyncio.TimerHandle | None = None


class Gateway:
    """Online front end over one backend.

    All coroutine methods must run on one event loop. Counters are guarded by
    a lock so :meth:`metrics_snapshot` is safe to call from other threads.
    """

    def __init__(
        self,
        backend,
        *,
        policy: CoalescePolicy | None = None,
        template: PromptTemplate | None = None,
        params: DecodingParams | None = None,
        pricing: PricingTable | None = None,
        deadline_s: float | None = 60.0,
        transcripts: dict[str, str] | None = None,
    ):
        self.backend = backend
        self.policy = policy or CoalescePolicy()
        self.template = template
        self.params = params or DecodingParams()
        self.pricing = pricing
        self.deadline_s = deadline_s
        self.transcripts = dict(transcripts or {})
        self._open: dict[str, _Batch] = {}
        self._tasks: set[asyncio.Task] = set()
        self._batch_ids = itertools.count(1)
        self._lock = threading.Lock()
        self._requests_in = 0
        self._backend_calls = 0
        self._fallbacks = 0
        self._grades: Counter = Counter()
        self._usage = Usage()
        self._ledger = CostLedger(pricing) if pricing is not None else None
        self._cost_known = True

    # -- accounting ---------------------------------------------------------

    def _account(self, result: JobResult) -> None:
        with self._lock:
            self._backend_calls += result.backend_calls
            self._fallbacks += result.fallback_invocations
            self._usage = self._usage + result.usage_total
            for r in result.chunk_reports:
                self._grades[r.grade.value] += 1
        if self._ledger is not None:
            for u in result.call_usages:
                try:
                    self._ledger.add_call(result.model, u.input_tokens, u.output_tokens)
                except UnknownModel:
                    self._cost_known = False

    def metrics_snapshot(self) -> dict:
        with self._lock:
            snap = {
                "requests_in": self._requests_in,
                "backend_calls": self._backend_calls,
                "grades": {g.value: self._grades.get(g.value, 0) for g in Grade},
                "fallback_invocations": self._fallbacks,
                "tokens_in": self._usage.input_tokens,
                "tokens_out": self._usage.output_tokens,
            }
        if snap["backend_calls"]:
            snap["coalesce_ratio"] = snap["requests_in"] / snap["backend_calls"]
        if self._ledger is not None and self._cost_known:
            snap["estimated_cost_usd"] = float(self._ledger.totals.total_usd)
        return snap

    # -- whole jobs ---------------------------------------------------------

    async def run_job(self, job: MultiQueryJob, policy: CoalescePolicy | None = None) -> JobResult:
        with self._lock:
            self._requests_in += len(job.queries)
        result = await run_job(job, self.template, self.params, policy or self.policy, self.backend)
        self._account(result)
        return result

    # -- single requests ----------------------------------------------------

    async def submit_single(self, context_text: str, query_text: str, timeout: float | None = None) -> QuerySummaryPair:
        """Queue one query; resolves to its pair once the batch has run."""
        query_text = query_text.strip()
        if not query_text:
            raise ValueError("query is empty")
        probe = MultiQueryJob.build("probe", context_text or " ", [query_text])  # validates the query
        key = probe.transcript.fingerprint.hex
        loop = asyncio.get_running_loop()
        future = loop.create_future()

        with self._lock:
            self._requests_in += 1
        batch = self._open.get(key)
        if batch is None:
            batch = self._open[key] = _Batch(key, context_text)
            batch.timer = loop.call_later(self.policy.window_ms / 1000.0, self._flush, batch)
        batch.slots.setdefault(query_text, []).append(future)
        if len(batch.slots) >= self.policy.max_queries_per_prompt:
            self._flush(batch)

        deadline = self.deadline_s if timeout is None else timeout
        try:
            return await asyncio.wait_for(asyncio.shield(future), deadline)
        except asyncio.TimeoutError:
            raise GatewayTimeout(f"no answer within {deadline} s") from None

    def _flush(self, batch: _Batch) -> None:
        if self._open.get(batch.key) is batch:
            del self._open[batch.key]
        if batch.timer is not None:
            batch.timer.cancel()
            batch.timer = None
        if not batch.slots:
            return
        task = asyncio.get_running_loop().create_task(self._run_batch(batch))
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    async def _run_batch(self, batch: _Batch) -> None:
        queries = list(batch.slots)
        job_id = f"ctx-{batch.key[:12]}-{next(self._batch_ids)}"
        try:
            job = MultiQueryJob.build(job_id, batch.context, queries)
            result = await run_job(job, self.template, self.params, self.policy, self.backend)
        except Exception as exc:  # deliver anything to every waiter
            for futures in batch.slots.values():
                for f in futures:
                    if not f.done():
                        f.set_exception(exc)
            return
        self._account(result)
        failed = {i: e.exception or BackendError(e.message) for e in result.errors for i in e.query_indices}
        for pair, futures in zip(result.pairs, batch.slots.values()):
            exc = failed.get(pair.query_index) if not pair.matched else None
            for f in futures:
                if f.done():
                    continue
                if exc is not None:
                    f.set_exception(exc)
                else:
                    f.set_result(replace(pair, query_index=1))

    async def drain(self) -> None:
        """Flush open batches and wait for in-flight ones."""
        for batch in list(self._open.values()):
            self._flush(batch)
        while self._tasks:
            await asyncio.gather(*list(self._tasks), return_exceptions=True)
