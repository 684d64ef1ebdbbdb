from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol

from ..prompt import DecodingParams, RenderedPrompt


class Source(str, Enum):
    LIVE = "Live"
    REPLAY = "Replay"
    MOCK = "Mock"


class BackendError(Exception):
    """Base class for failures talking to a completion backend."""


class TransportError(BackendError):
    pass


class AuthError(BackendError):
    pass


class ContextLengthError(BackendError):
    pass


class MissingRecording(BackendError):
    pass


@dataclass(frozen=True)
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0

    def __post_init__(self) -> None:
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be non-negative")

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(self.input_tokens + other.input_tokens, self.output_tokens + other.output_tokens)

    def to_record(self) -> dict:
        return {"input_tokens": self.input_tokens, "output_tokens": self.output_tokens}

    @classmethod
    def from_record(cls, record: dict | None) -> "Usage":
        record = record or {}
        return cls(int(record.get("input_tokens", 0)), int(record.get("output_tokens", 0)))


@dataclass(frozen=True)
class BackendRequest:
    prompt: RenderedPrompt
    params: DecodingParams = field(default_factory=DecodingParams)
    model_name: str = "mock"

    def digest(self) -> str:
        """Replay key: prompt bytes, model and decoding parameters."""
        payload = {
            "prompt_sha256": hashlib.sha256(self.prompt.text.encode("utf-8")).hexdigest(),
            "model": self.model_name,
            "params": self.params.to_record(),
        }
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class BackendResponse:
    text: str
    usage: Usage
    latency_ms: float = 0.0
    source: Source = Source.MOCK
    usage_estimated: bool = False

    def to_record(self) -> dict:
        return {
            "text": self.text,
            "usage": self.usage.to_record(),
            "latency_ms": self.latency_ms,
            "source": self.source.value,
            "usage_estimated": self.usage_estimated,
        }

    @classmethod
    def from_record(cls, record: dict) -> "BackendResponse":
        return cls(
            record["text"],
            Usage.from_record(record.get("usage")),
            float(record.get("latency_ms", 0.0)),
            Source(record.get("source", Source.MOCK.value)),
            bool(record.get("usage_estimated", False)),
        )


class Backend(Protocol):
    model_name: str

    async def complete(self, request: BackendRequest) -> BackendResponse: ...
