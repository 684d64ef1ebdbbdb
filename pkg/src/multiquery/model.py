"""Shared domain types for multi-query prompting.

Every other module builds on these values. They are frozen dataclasses, so
they can be handed between tasks and threads without copying.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum


class OutputFormat(str, Enum):
    JSON = "json"
    YAML = "yaml"

    @classmethod
    def coerce(cls, value: "OutputFormat | str") -> "OutputFormat":
        if isinstance(value, cls):
            return value
        return cls(str(value).strip().lower())


class MatchMethod(str, Enum):
    EXACT = "Exact"
    NORMALIZED = "Normalized"
    FUZZY = "Fuzzy"
    POSITIONAL = "Positional"
    UNMATCHED = "Unmatched"


def word_count(text: str) -> int:
    """Number of maximal non-whitespace runs in ``text``."""
    return len(text.split())


def normalize_context(text: str | bytes) -> str:
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    return " ".join(text.split())


@dataclass(frozen=True)
class ContextFingerprint:
    digest: bytes

    @property
    def hex(self) -> str:
        return self.digest.hex()

    def __str__(self) -> str:
        return self.hex


def fingerprint(text: str | bytes) -> ContextFingerprint:
    """SHA-256 over whitespace-normalized text.

    Case is preserved: transcripts that differ only in case are different
    contexts and must not be coalesced.
    """
    normalized = normalize_context(text)
    return ContextFingerprint(hashlib.sha256(normalized.encode("utf-8")).digest())


@dataclass(frozen=True)
class Transcript:
    id: str
    text: str
    word_count: int = field(init=False)

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("transcript id must be non-empty")
        object.__setattr__(self, "word_count", word_count(self.text))

    @property
    def fingerprint(self) -> ContextFingerprint:
        return fingerprint(self.text)


@dataclass(frozen=True)
class Query:
    index: int
    text: str

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError(f"query index must be >= 1, got {self.index}")
        if not self.text.strip():
            raise ValueError("query text must be non-empty")
        # The numbered query block is line oriented; an embedded line break
        # would make two different query lists render identically.
        if "\n" in self.text or "\r" in self.text:
            raise ValueError("query text must be a single line")


def make_queries(texts) -> tuple[Query, ...]:
    return tuple(Query(i, t) for i, t in enumerate(texts, start=1))


@dataclass(frozen=True)
class MultiQueryJob:
    transcript: Transcript
    queries: tuple[Query, ...]
    references: tuple[str, ...] | None = None
    output_format: OutputFormat = OutputFormat.JSON

    def __post_init__(self) -> None:
        object.__setattr__(self, "queries", tuple(self.queries))
        object.__setattr__(self, "output_format", OutputFormat.coerce(self.output_format))
        if not self.queries:
            raise ValueError("a job needs at least one query")
        indices = [q.index for q in self.queries]
        if indices != list(range(1, len(indices) + 1)):
            raise ValueError(f"query indices must be 1..n in order, got {indices}")
        if self.references is not None:
            object.__setattr__(self, "references", tuple(self.references))
            if len(self.references) != len(self.queries):
                raise ValueError(
                    f"{len(self.references)} references for {len(self.queries)} queries"
                )

    @classmethod
    def build(
        cls,
        transcript_id: str,
        transcript_text: str,
        queries,
        references=None,
        output_format: OutputFormat | str = OutputFormat.JSON,
    ) -> "MultiQueryJob":
        return cls(
            Transcript(transcript_id, transcript_text),
            make_queries(queries),
            tuple(references) if references is not None else None,
            OutputFormat.coerce(output_format),
        )

    @property
    def id(self) -> str:
        return self.transcript.id

    @property
    def query_texts(self) -> list[str]:
        return [q.text for q in self.queries]

    def subset(self, start: int, stop: int) -> "MultiQueryJob":
        """Consecutive slice of the queries, re-indexed from 1."""
        texts = self.query_texts[start:stop]
        refs = self.references[start:stop] if self.references is not None else None
        return MultiQueryJob(self.transcript, make_queries(texts), refs, self.output_format)

    def to_record(self) -> dict:
        record = {
            "transcript": {"id": self.transcript.id, "text": self.transcript.text},
            "queries": self.query_texts,
            "references": list(self.references) if self.references is not None else [],
        }
        if self.output_format is not OutputFormat.JSON:
            record["output_format"] = self.output_format.value
        return record

    @classmethod
    def from_record(cls, record: dict) -> "MultiQueryJob":
        transcript = record["transcript"]
        refs = record.get("references") or None
        return cls.build(
            transcript["id"],
            transcript["text"],
            record["queries"],
            refs,
            record.get("output_format", "json"),
        )


@dataclass(frozen=True)
class QuerySummaryPair:
    query_index: int
    query_text: str
    summary: str
    match_method: MatchMethod
    retried: bool = False

    @property
    def matched(self) -> bool:
        return self.match_method is not MatchMethod.UNMATCHED

    def to_record(self) -> dict:
        return {
            "query_index": self.query_index,
            "query_text": self.query_text,
            "summary": self.summary,
            "match_method": self.match_method.value,
            "retried": self.retried,
        }

    @classmethod
    def from_record(cls, record: dict) -> "QuerySummaryPair":
        return cls(
            int(record["query_index"]),
            record["query_text"],
            record.get("summary", ""),
            MatchMethod(record["match_method"]),
            bool(record.get("retried", False)),
        )
