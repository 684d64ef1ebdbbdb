"""HTTP front end for :class:`~multiquery.gateway.Gateway`."""

from __future__ import annotations

from typing import Any

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .backends.base import BackendError
from .gateway import CoalescePolicy, Gateway, GatewayTimeout
from .model import MultiQueryJob, OutputFormat


class JobBody(BaseModel):
    # Either {"id", "text"}, {"id"} naming a loaded transcript, or the raw text.
    transcript: dict[str, str] | str
    queries: list[str]
    references: list[str] | None = None
    format: str = Field(default="json", alias="output_format")
    policy: dict[str, Any] | None = None

    model_config = {"populate_by_name": True}


class QueryBody(BaseModel):
    context: str
    query: str
    timeout_s: float | None = None


def _job_from_body(body: JobBody, gateway: Gateway) -> MultiQueryJob:
    t = body.transcript
    if isinstance(t, str):
        tid, text = "inline", t
    else:
        tid = t.get("id") or "inline"
        text = t.get("text")
        if text is None:
            if tid not in gateway.transcripts:
                raise HTTPException(404, f"unknown transcript id {tid!r}")
            text = gateway.transcripts[tid]
    return MultiQueryJob.build(tid, text, body.queries, body.references or None, OutputFormat.coerce(body.format))


def create_app(gateway: Gateway) -> FastAPI:
    app = FastAPI(title="multiquery gateway")
    app.state.gateway = gateway

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok"}

    @app.get("/v1/metrics")
    async def metrics():
        return gateway.metrics_snapshot()

    @app.post("/v1/jobs")
    async def jobs(body: JobBody):
        try:
            job = _job_from_body(body, gateway)
            policy = CoalescePolicy.from_record(body.policy, gateway.policy) if body.policy else None
        except (ValueError, TypeError) as exc:
            raise HTTPException(422, str(exc)) from None
        result = await gateway.run_job(job, policy)
        return result.to_record()

    @app.post("/v1/query")
    async def query(body: QueryBody):
        try:
            pair = await gateway.submit_single(body.context, body.query, body.timeout_s)
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from None
        except GatewayTimeout as exc:
            raise HTTPException(504, str(exc)) from None
        except BackendError as exc:
            raise HTTPException(502, f"{type(exc).__name__}: {exc}") from None
        return pair.to_record()

    return app


def serve(gateway: Gateway, host: str = "127.0.0.1", port: int = 8000) -> None:
    import uvicorn

    uvicorn.run(create_app(gateway), host=host, port=port, log_level="info")
