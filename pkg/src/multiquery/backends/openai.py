"""OpenAI-compatible chat-completions client."""

from __future__ import annotations

import asyncio
import logging
import os
import time

import httpx

from ..prompt import token_counter_for
from .base import (
    AuthError,
    BackendError,
    BackendRequest,
    BackendResponse,
    ContextLengthError,
    Source,
    TransportError,
    Usage,
)

logger = logging.getLogger(__name__)

API_KEY_ENV = "MULTIQUERY_API_KEY"
BASE_URL_ENV = "MULTIQUERY_BASE_URL"
MODEL_ENV = "MULTIQUERY_MODEL"

_CONTEXT_MARKERS = ("context_length_exceeded", "context length", "maximum context", "too many tokens")


class OpenAICompatBackend:
    """Single-message chat completions over HTTP.

    The rendered prompt is sent verbatim as the only user message. Transport
    failures, 429 and 5xx responses are retried with exponential backoff; 401
    and 403 raise :class:`AuthError`, and a 400 that mentions the context
    window raises :class:`ContextLengthError`.
    """

    def __init__(
        self,
        base_url: str | None = None,
        model: str | None = None,
        api_key: str | None = None,
        *,
        max_concurrency: int = 4,
        timeout: float = 120.0,
        attempts: int = 3,
        backoff: float = 1.0,
        path: str = "/chat/completions",
        transport: httpx.AsyncBaseTransport | None = None,
    ):
        self.base_url = (base_url or os.environ.get(BASE_URL_ENV, "https://api.openai.com/v1")).rstrip("/")
        self.model_name = model or os.environ.get(MODEL_ENV, "gpt-4o")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self.path = path
        self._transport = transport
        self.max_concurrency = max_concurrency
        self._semaphores: dict[int, asyncio.Semaphore] = {}

    def payload(self, request: BackendRequest) -> dict:
        return {
            "model": request.model_name or self.model_name,
            "messages": [{"role": "user", "content": request.prompt.text}],
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_output_tokens,
        }

    async def complete(self, request: BackendRequest) -> BackendResponse:
        if not self.api_key:
            raise AuthError(f"no API key; set {API_KEY_ENV}")
        headers = {"Authorization": f"Bearer {self.api_key}"}
        body = self.payload(request)
        url = self.base_url + self.path

        loop_id = id(asyncio.get_running_loop())
        semaphore = self._semaphores.setdefault(loop_id, asyncio.Semaphore(self.max_concurrency))
        async with semaphore:
            async with httpx.AsyncClient(timeout=self.timeout, transport=self._transport) as client:
                last_error: Exception | None = None
                for attempt in range(self.attempts):
                    if attempt:
                        await asyncio.sleep(self.backoff * 2 ** (attempt - 1))
                    started = time.perf_counter()
                    try:
                        resp = await client.post(url, json=body, headers=headers)
                    except httpx.TransportError as exc:
                        last_error = exc
                        logger.warning("attempt %d: transport error %s", attempt + 1, exc)
                        continue
                    latency_ms = (time.perf_counter() - started) * 1000.0
                    if resp.status_code == 429 or resp.status_code >= 500:
                        last_error = BackendError(f"HTTP {resp.status_code}")
                        logger.warning("attempt %d: HTTP %d", attempt + 1, resp.status_code)
                        continue
                    return self._decode(resp, request, latency_ms)
        raise TransportError(f"gave up after {self.attempts} attempts: {last_error}")

    def _decode(self, resp: httpx.Response, request: BackendRequest, latency_ms: float) -> BackendResponse:
        if resp.status_code in (401, 403):
            raise AuthError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code == 400 and any(m in resp.text.lower() for m in _CONTEXT_MARKERS):
            raise ContextLengthError(resp.text[:500])
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion body: {exc}") from exc

        usage = data.get("usage") or {}
        prompt_tokens = usage.get("prompt_tokens")
        completion_tokens = usage.get("completion_tokens")
        estimated = prompt_tokens is None or completion_tokens is None
        if estimated:
            count = token_counter_for(request.model_name)
            prompt_tokens = prompt_tokens if prompt_tokens is not None else count(request.prompt.text)
            completion_tokens = completion_tokens if completion_tokens is not None else count(text)
        return BackendResponse(
            text,
            Usage(int(prompt_tokens), int(completion_tokens)),
            latency_ms,
            Source.LIVE,
            usage_estimated=estimated,
        )
