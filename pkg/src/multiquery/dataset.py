"""Single-query QFS records to multi-query jobs.

Input files are line-delimited JSON, one record per line::

    {"transcript_id": ..., "transcript_text": ..., "query_text": ..., "reference_summary": ...}

The upstream QMSum release (one meeting per line with ``meeting_transcripts``,
``general_query_list`` and ``specific_query_list``) is also accepted and is
flattened to the same records by :func:`load_records` with ``fmt="qmsum"``.

Output job files hold one :class:`~multiquery.model.MultiQueryJob` per line::

    {"transcript": {"id": ..., "text": ...}, "queries": [...], "references": [...]}
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .model import MultiQueryJob, OutputFormat
from .records import read_jsonl, write_jsonl

RECORD_FIELDS = ("transcript_id", "transcript_text", "query_text", "reference_summary")
SPLITS = ("train", "validation", "test")


class DatasetError(Exception):
    pass


class SchemaError(DatasetError):
    def __init__(self, line: int, field: str, message: str = ""):
        self.line = line
        self.field = field
        super().__init__(f"line {line}: {message or 'missing or invalid field'} {field!r}")


class EmptyRecordField(DatasetError):
    def __init__(self, index: int, field: str):
        self.index = index
        self.field = field
        super().__init__(f"record {index}: field {field!r} is empty")


class ConflictingTranscript(DatasetError):
    pass


@dataclass(frozen=True)
class SingleQueryRecord:
    transcript_id: str
    transcript_text: str
    query_text: str
    reference_summary: str

    def to_record(self) -> dict:
        return {name: getattr(self, name) for name in RECORD_FIELDS}


@dataclass(frozen=True)
class DatasetSplit:
    name: str
    jobs: tuple[MultiQueryJob, ...]

    def __post_init__(self) -> None:
        if self.name not in SPLITS:
            raise ValueError(f"unknown split {self.name!r}; expected one of {SPLITS}")
        object.__setattr__(self, "jobs", tuple(self.jobs))
        seen = set()
        for job in self.jobs:
            fp = job.transcript.fingerprint
            if fp in seen:
                raise ConflictingTranscript(
                    f"transcript {job.id!r} duplicates the text of another job in the split"
                )
            seen.add(fp)

    @property
    def query_count(self) -> int:
        return sum(len(job.queries) for job in self.jobs)

    def query_histogram(self) -> dict[int, int]:
        return dict(sorted(Counter(len(job.queries) for job in self.jobs).items()))


def _load_flat(path: Path) -> list[SingleQueryRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(lineno, "<record>", f"invalid JSON ({exc.msg}):") from None
            if not isinstance(obj, dict):
                raise SchemaError(lineno, "<record>", "expected an object:")
            values = []
            for name in RECORD_FIELDS:
                value = obj.get(name)
                if not isinstance(value, str) or not value.strip():
                    raise SchemaError(lineno, name)
                values.append(value)
            records.append(SingleQueryRecord(*values))
    return records


def _meeting_text(turns) -> str:
    lines = []
    for turn in turns:
        speaker = str(turn.get("speaker", "")).strip()
        content = str(turn.get("content", "")).strip()
        lines.append(f"{speaker}: {content}" if speaker else content)
    return "\n".join(lines)


def _load_qmsum(path: Path) -> list[SingleQueryRecord]:
    # Upstream meetings carry no id; the file stem and line number stand in.
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                meeting = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(lineno, "<meeting>", f"invalid JSON ({exc.msg}):") from None
            turns = meeting.get("meeting_transcripts")
            if not isinstance(turns, list) or not turns:
                raise SchemaError(lineno, "meeting_transcripts")
            text = _meeting_text(turns)
            tid = f"{path.stem}-{lineno:04d}"
            for key in ("general_query_list", "specific_query_list"):
                for item in meeting.get(key) or []:
                    query = item.get("query")
                    answer = item.get("answer")
                    if not isinstance(query, str) or not query.strip():
                        raise SchemaError(lineno, f"{key}.query")
                    if not isinstance(answer, str) or not answer.strip():
                        raise SchemaError(lineno, f"{key}.answer")
                    records.append(SingleQueryRecord(tid, text, " ".join(query.split()), answer.strip()))
    return records


def load_records(path: str | Path, fmt: str = "jsonl") -> list[SingleQueryRecord]:
    """Read single-query records in file order.

    ``fmt`` is ``"jsonl"`` for flat records or ``"qmsum"`` for the upstream
    meeting-per-line layout. Raises :class:`SchemaError` with the offending
    line number on malformed input and ``OSError`` when the file cannot be read.
    """
    path = Path(path)
    if fmt == "jsonl":
        return _load_flat(path)
    if fmt == "qmsum":
        return _load_qmsum(path)
    raise ValueError(f"unknown record format {fmt!r}")


def convert(
    records: list[SingleQueryRecord],
    split: str = "test",
    output_format: OutputFormat | str = OutputFormat.JSON,
) -> DatasetSplit:
    """Group records by transcript into one job per transcript.

    Query order inside a job is first-appearance order in ``records``.
    Duplicate (transcript, query) pairs are kept so split sizes are preserved.
    """
    groups: dict[str, list[SingleQueryRecord]] = {}
    texts: dict[str, str] = {}
    for i, rec in enumerate(records):
        for name in RECORD_FIELDS:
            if not getattr(rec, name).strip():
                raise EmptyRecordField(i, name)
        known = texts.setdefault(rec.transcript_id, rec.transcript_text)
        if known != rec.transcript_text:
            raise ConflictingTranscript(
                f"transcript {rec.transcript_id!r} appears with two different texts"
            )
        groups.setdefault(rec.transcript_id, []).append(rec)

    jobs = [
        MultiQueryJob.build(
            tid,
            texts[tid],
            [r.query_text for r in group],
            [r.reference_summary for r in group],
            output_format,
        )
        for tid, group in groups.items()
    ]
    return DatasetSplit(split, tuple(jobs))


def expand(split: DatasetSplit) -> list[SingleQueryRecord]:
    """Inverse of :func:`convert`: one record per (job, query)."""
    out = []
    for job in split.jobs:
        refs = job.references or ("",) * len(job.queries)
        for query, ref in zip(job.queries, refs):
            out.append(SingleQueryRecord(job.id, job.transcript.text, query.text, ref))
    return out


def write_jobs(path: str | Path, jobs) -> int:
    return write_jsonl(path, (job.to_record() for job in jobs))


def read_jobs(path: str | Path) -> list[MultiQueryJob]:
    return [MultiQueryJob.from_record(r) for r in read_jsonl(path)]
