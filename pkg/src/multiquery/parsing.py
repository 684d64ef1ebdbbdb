"""Recover (query, summary) records from free-form model output.

:func:`parse` tries a fixed ladder of stages and stops at the first one that
yields at least one usable record:

========================  ========  =============================================
stage                     grade     what it accepts
========================  ========  =============================================
``strict``                Strict    the whole text is an array of exact records
``fenced``                Repaired  an array inside a fenced code block
``bracket_slice``         Repaired  an array surrounded only by prose
``record_scan``           Salvaged  every balanced ``{...}`` object in the text
``truncation_repair``     Salvaged  as above, after dropping a cut-off last record
========================  ========  =============================================

YAML mode runs the same ladder with YAML equivalents. Recovered records go
through :func:`normalize_keys` and are then matched to the input queries by
:func:`align`. Nothing in here raises on bad input; problems end up in the
returned :class:`ParseReport`.
"""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import yaml

from .model import MatchMethod, OutputFormat, Query, QuerySummaryPair

try:
    _YamlLoader = yaml.CSafeLoader
except AttributeError:  # pragma: no cover - libyaml missing
    _YamlLoader = yaml.SafeLoader


class Grade(str, Enum):
    STRICT = "Strict"
    REPAIRED = "Repaired"
    SALVAGED = "Salvaged"
    FAILED = "Failed"


GRADE_ORDER = {Grade.STRICT: 0, Grade.REPAIRED: 1, Grade.SALVAGED: 2, Grade.FAILED: 3}

JSON_STAGES = ("strict", "fenced", "bracket_slice", "record_scan", "truncation_repair")
YAML_STAGES = ("yaml_strict", "yaml_fenced", "yaml_slice", "yaml_item_scan", "yaml_truncation_repair")

FUZZY_THRESHOLD = 0.6

QUERY_KEYS = ("query", "question", "q")
SUMMARY_KEYS = ("summary", "answer", "response")


@dataclass(frozen=True)
class ParseOutcome:
    grade: Grade
    stages_applied: tuple[str, ...]
    truncation_detected: bool = False
    keys_normalized: bool = False

    def to_record(self) -> dict:
        return {
            "grade": self.grade.value,
            "stages_applied": list(self.stages_applied),
            "truncation_detected": self.truncation_detected,
            "keys_normalized": self.keys_normalized,
        }

    @classmethod
    def from_record(cls, record: dict) -> "ParseOutcome":
        return cls(
            Grade(record["grade"]),
            tuple(record.get("stages_applied", ())),
            bool(record.get("truncation_detected", False)),
            bool(record.get("keys_normalized", False)),
        )


@dataclass(frozen=True)
class ParseReport:
    outcome: ParseOutcome
    pairs: tuple[QuerySummaryPair, ...]
    raw_record_count: int = 0

    @property
    def grade(self) -> Grade:
        return self.outcome.grade

    @property
    def matched_count(self) -> int:
        return sum(p.matched for p in self.pairs)

    def to_record(self) -> dict:
        return {
            "outcome": self.outcome.to_record(),
            "pairs": [p.to_record() for p in self.pairs],
            "raw_record_count": self.raw_record_count,
        }

    @classmethod
    def from_record(cls, record: dict) -> "ParseReport":
        return cls(
            ParseOutcome.from_record(record["outcome"]),
            tuple(QuerySummaryPair.from_record(p) for p in record.get("pairs", ())),
            int(record.get("raw_record_count", 0)),
        )


# --------------------------------------------------------------------------
# key normalization

_NON_ALNUM = re.compile(r"[\W_]+", re.UNICODE)


def _key_name(key: str) -> str:
    return _NON_ALNUM.sub("", key.lower())


def normalize_keys(record: dict) -> tuple[dict | None, bool]:
    """Map a record onto ``{"query", "summary"}``.

    Returns ``(canonical, changed)``; ``canonical`` is ``None`` when the record
    is rejected. A record whose summary-like value is not a string is rejected
    rather than coerced.
    """
    if not isinstance(record, dict):
        return None, False
    by_name: dict[str, list] = {}
    for key, value in record.items():
        by_name.setdefault(_key_name(str(key)), []).append((key, value))

    def first(names):
        for name in names:
            if name in by_name:
                return by_name[name][0]
        return None

    summary_item = first(SUMMARY_KEYS)
    if summary_item is None or not isinstance(summary_item[1], str):
        return None, False

    query_item = first(QUERY_KEYS)
    if query_item is None:
        summary_fields = [k for k in record if _key_name(str(k)) in SUMMARY_KEYS]
        others = [(k, v) for k, v in record.items() if _key_name(str(k)) not in SUMMARY_KEYS]
        if len(summary_fields) == 1 and len(others) == 1 and isinstance(others[0][1], str):
            query_item = others[0]
        else:
            return None, False
    if not isinstance(query_item[1], str):
        return None, False

    canonical = {"query": query_item[1], "summary": summary_item[1]}
    changed = set(record) != {"query", "summary"}
    return canonical, changed


# --------------------------------------------------------------------------
# alignment

_ENUM_PREFIX = re.compile(r"^\s*(?:#\s*)?(?:\d+|[ivxlc]+|[a-z])\s*[.):\]]\s+", re.IGNORECASE)
_NUM_PREFIX = re.compile(r"^\s*#?\s*\d+\s+")


def _strip_punct(text: str) -> str:
    return "".join(" " if unicodedata.category(ch).startswith(("P", "S")) else ch for ch in text)


def normalize_query(text: str) -> str:
    """Lowercase, drop a leading enumeration such as ``1.``, strip punctuation."""
    text = text.lower()
    stripped = _ENUM_PREFIX.sub("", text, count=1)
    if stripped == text:
        stripped = _NUM_PREFIX.sub("", text, count=1)
    text = _strip_punct(stripped)
    return " ".join(text.split())


def jaccard(a: str, b: str) -> float:
    sa, sb = set(normalize_query(a).split()), set(normalize_query(b).split())
    if not sa and not sb:
        return 0.0
    return len(sa & sb) / len(sa | sb)


def _as_queries(queries) -> list[Query]:
    out = []
    for i, q in enumerate(queries, start=1):
        out.append(q if isinstance(q, Query) else Query(i, str(q)))
    return out


def align(records: Sequence[dict], queries) -> list[QuerySummaryPair]:
    """One-to-one greedy matching of records to queries.

    Tiers, in order: exact text, normalized text, token Jaccard >= 0.6
    (best pairs first), and finally position when the record and query
    counts are equal. Queries left over get an empty summary.
    """
    queries = _as_queries(queries)
    n = len(queries)
    chosen: dict[int, tuple[int, MatchMethod]] = {}
    used: set[int] = set()

    def assign(qi, ri, method):
        chosen[qi] = (ri, method)
        used.add(ri)

    for qi, q in enumerate(queries):
        for ri, rec in enumerate(records):
            if ri not in used and rec["query"] == q.text:
                assign(qi, ri, MatchMethod.EXACT)
                break

    norm_records = [normalize_query(r["query"]) for r in records]
    for qi, q in enumerate(queries):
        if qi in chosen:
            continue
        nq = normalize_query(q.text)
        for ri, nr in enumerate(norm_records):
            if ri not in used and nr == nq:
                assign(qi, ri, MatchMethod.NORMALIZED)
                break

    candidates = []
    for qi, q in enumerate(queries):
        if qi in chosen:
            continue
        for ri, rec in enumerate(records):
            if ri in used:
                continue
            score = jaccard(q.text, rec["query"])
            if score >= FUZZY_THRESHOLD:
                candidates.append((-score, qi, ri))
    for _, qi, ri in sorted(candidates):
        if qi not in chosen and ri not in used:
            assign(qi, ri, MatchMethod.FUZZY)

    if len(records) == n:
        for qi in range(n):
            if qi not in chosen and qi not in used:
                assign(qi, qi, MatchMethod.POSITIONAL)

    pairs = []
    for qi, q in enumerate(queries):
        if qi in chosen:
            ri, method = chosen[qi]
            pairs.append(QuerySummaryPair(q.index, q.text, records[ri]["summary"], method))
        else:
            pairs.append(QuerySummaryPair(q.index, q.text, "", MatchMethod.UNMATCHED))
    return pairs


# --------------------------------------------------------------------------
# scanning helpers

_SPECIAL = re.compile(r'[{}"\\\n]')
_BRACKET_SPECIAL = re.compile(r'[\[\]"\\\n]')
_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_+-]*)[^\n]*\n(.*?)```", re.DOTALL)
_STRUCTURAL = re.compile(r"[\[\]{}]")


def scan_objects(text: str) -> tuple[list[tuple[int, int]], int | None]:
    """Spans of top-level ``{...}`` objects, plus the start of an unclosed one.

    Quotes are only tracked inside objects, and a raw line break ends a
    string: JSON strings cannot contain one, and stray quotes in model output
    would otherwise swallow the rest of the text.
    """
    spans = []
    depth = 0
    start = -1
    in_str = False
    skip = -1
    for m in _SPECIAL.finditer(text):
        i = m.start()
        ch = text[i]
        if depth == 0:
            if ch == "{":
                depth, start, in_str = 1, i, False
            continue
        if in_str:
            if i == skip:
                continue
            if ch == "\\":
                skip = i + 1
            elif ch in "\"\n":
                in_str = False
            continue
        if ch == '"':
            in_str = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                spans.append((start, i + 1))
    return spans, (start if depth > 0 else None)


def _balanced_bracket_end(text: str, open_at: int) -> int | None:
    depth = 0
    in_str = False
    skip = -1
    for m in _BRACKET_SPECIAL.finditer(text, open_at):
        i = m.start()
        ch = text[i]
        if in_str:
            if i == skip:
                continue
            if ch == "\\":
                skip = i + 1
            elif ch in "\"\n":
                in_str = False
            continue
        if ch == '"':
            in_str = True
        elif ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
            if depth == 0:
                return i + 1
    return None


_NON_STRING = object()
_BARE_KEY = re.compile(r'[^":\n,{}]*')


def _read_string(body: str, pos: int) -> tuple[str, int, bool]:
    """Read a quoted string starting at ``body[pos] == '"'``."""
    i = pos + 1
    n = len(body)
    chunks = []
    while i < n:
        ch = body[i]
        if ch == "\\" and i + 1 < n:
            chunks.append(body[i : i + 2])
            i += 2
            continue
        if ch == '"':
            raw = "".join(chunks)
            try:
                value = json.loads('"' + raw + '"')
            except ValueError:
                value = raw.replace('\\"', '"').replace("\\n", "\n").replace("\\\\", "\\")
            return value, i + 1, True
        if ch == "\n":
            return "".join(chunks), i, False
        chunks.append(ch)
        i += 1
    return "".join(chunks), n, False


def _skip_value(body: str, pos: int) -> int:
    depth = 0
    in_str = False
    i = pos
    n = len(body)
    while i < n:
        ch = body[i]
        if in_str:
            if ch == "\\":
                i += 1
            elif ch in "\"\n":
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch in "{[":
            depth += 1
        elif ch in "}]":
            depth -= 1
            if depth < 0:
                return i
        elif depth == 0 and ch in ",\n":
            return i
        i += 1
    return n


def lenient_object(body: str) -> dict | None:
    """Key/value pairs from the inside of a brace-delimited record.

    Tolerates keys with a missing opening quote (``.getText": "..."``),
    missing commas between pairs, and trailing commas. Returns ``None`` when a
    pair cannot be delimited.
    """
    out: dict = {}
    pos = 0
    n = len(body)
    while True:
        while pos < n and (body[pos].isspace() or body[pos] == ","):
            pos += 1
        if pos >= n:
            return out
        if body[pos] == '"':
            key, pos, ok = _read_string(body, pos)
            if not ok:
                return None
        else:
            m = _BARE_KEY.match(body, pos)
            key = m.group().strip()
            pos = m.end()
            if pos < n and body[pos] == '"':
                pos += 1
        while pos < n and body[pos] in " \t":
            pos += 1
        if pos >= n or body[pos] != ":":
            return None
        pos += 1
        while pos < n and body[pos].isspace():
            pos += 1
        if pos < n and body[pos] == '"':
            value, pos, ok = _read_string(body, pos)
            if not ok:
                return None
        else:
            end = _skip_value(body, pos)
            if end == pos:
                return None
            value, pos = _NON_STRING, end
        out[key] = value


def parse_object(text: str):
    try:
        return json.loads(text)
    except (ValueError, RecursionError):
        pass
    return lenient_object(text[1:-1])


# --------------------------------------------------------------------------
# stages


@dataclass
class _Attempt:
    records: list
    raw_count: int
    truncation: bool = False
    grade: Grade | None = None
    exact: bool = False


def _exact_records(obj) -> list | None:
    if not isinstance(obj, list):
        return None
    for item in obj:
        if not (
            isinstance(item, dict)
            and set(item) == {"query", "summary"}
            and isinstance(item["query"], str)
            and isinstance(item["summary"], str)
        ):
            return None
    return obj


def _json_strict(text: str) -> _Attempt | None:
    records = _exact_records(json.loads(text))
    if records is None:
        return None
    return _Attempt(records, len(records), exact=True)


def _json_fenced(text: str) -> _Attempt | None:
    for m in _FENCE.finditer(text):
        try:
            attempt = _json_strict(m.group(2))
        except (ValueError, RecursionError):
            continue
        if attempt is not None and attempt.records:
            return attempt
    return None


def _json_bracket_slice(text: str) -> _Attempt | None:
    open_at = text.find("[")
    if open_at < 0:
        return None
    end = _balanced_bracket_end(text, open_at)
    if end is None:
        return None
    outside = text[:open_at] + text[end:]
    if _STRUCTURAL.search(outside):
        return None
    return _json_strict(text[open_at:end])


def _records_from_spans(text: str, spans) -> list:
    out = []
    for start, end in spans:
        obj = parse_object(text[start:end])
        out.append(obj if isinstance(obj, dict) else None)
    return out


def _json_record_scan(text: str) -> _Attempt | None:
    spans, dangling = scan_objects(text)
    if dangling is not None or not spans:
        return None
    records = _records_from_spans(text, spans)
    return _Attempt(records, len(records))


def _json_truncation_repair(text: str) -> _Attempt | None:
    spans, dangling = scan_objects(text)
    if dangling is None:
        return None
    head = text[:dangling].rstrip()
    open_at = head.find("[")
    if open_at >= 0:
        closed = head[open_at:].rstrip(", \t\r\n") + "]"
        try:
            obj = json.loads(closed)
        except (ValueError, RecursionError):
            obj = None
        if isinstance(obj, list) and obj and all(isinstance(x, dict) for x in obj):
            return _Attempt(list(obj), len(obj), truncation=True)
    records = _records_from_spans(text, spans)
    return _Attempt(records, len(records), truncation=True)


def _yaml_load(text: str):
    return yaml.load(text, Loader=_YamlLoader)


def _yaml_strict_obj(obj) -> _Attempt | None:
    records = _exact_records(obj)
    if records is not None:
        return _Attempt(records, len(records), exact=True)
    if isinstance(obj, dict) and set(obj) == {"query", "summary"}:
        if isinstance(obj["query"], str) and isinstance(obj["summary"], str):
            return _Attempt([obj], 1, grade=Grade.REPAIRED, exact=True)
    return None


def _yaml_strict(text: str) -> _Attempt | None:
    return _yaml_strict_obj(_yaml_load(text))


def _yaml_fenced(text: str) -> _Attempt | None:
    for m in _FENCE.finditer(text):
        try:
            attempt = _yaml_strict_obj(_yaml_load(m.group(2)))
        except Exception:
            continue
        if attempt is not None and attempt.records:
            attempt.grade = Grade.REPAIRED
            return attempt
    return None


_ITEM = re.compile(r"^([ \t]*)- ", re.MULTILINE)


def _yaml_block(text: str) -> tuple[list[str], int]:
    """Split the first block-style list into item texts.

    Returns the items and the number of lines the list occupies, counted from
    its first item; prose after the list is not part of it.
    """
    first = _ITEM.search(text)
    if first is None:
        return [], 0
    indent = first.group(1)
    lines = text[first.start():].split("\n")
    items: list[list[str]] = []
    consumed = 0
    for line in lines:
        if line.startswith(indent + "- "):
            items.append([line])
        elif not line.strip() or (line.startswith(indent) and line[len(indent):len(indent) + 1] in " \t"):
            items[-1].append(line)
        else:
            break
        consumed += 1
    out = []
    for item in items:
        head = item[0][len(indent):]
        body = ["  " + head[2:]] + [ln[len(indent):] for ln in item[1:]]
        out.append("\n".join(body).rstrip())
    return out, consumed


def _yaml_slice(text: str) -> _Attempt | None:
    items, consumed = _yaml_block(text)
    if items:
        first = _ITEM.search(text)
        block = "\n".join(text[first.start():].split("\n")[:consumed])
        try:
            attempt = _yaml_strict_obj(_yaml_load(block))
        except Exception:
            attempt = None
        if attempt is not None and attempt.records:
            attempt.grade = Grade.REPAIRED
            return attempt
    open_at = text.find("[")
    if open_at >= 0:
        end = _balanced_bracket_end(text, open_at)
        if end is not None and not _STRUCTURAL.search(text[:open_at] + text[end:]):
            try:
                attempt = _yaml_strict_obj(_yaml_load(text[open_at:end]))
            except Exception:
                attempt = None
            if attempt is not None and attempt.records:
                attempt.grade = Grade.REPAIRED
                return attempt
    return None


_YAML_PAIR = re.compile(r"^\s*([^:\n]+?)\s*:\s*(.*)$")


def _yaml_item(item: str):
    try:
        obj = _yaml_load(item)
    except Exception:
        obj = None
    if isinstance(obj, dict):
        return obj
    # one key per line, value to end of line
    out = {}
    for line in item.split("\n"):
        m = _YAML_PAIR.match(line)
        if not m:
            continue
        value = m.group(2).strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
            value = value[1:-1]
        out[m.group(1).strip()] = value
    return out or None


def _item_usable(obj) -> bool:
    return normalize_keys(obj)[0] is not None if isinstance(obj, dict) else False


def _yaml_item_scan(text: str) -> _Attempt | None:
    items = [_yaml_item(item) for item in _yaml_block(text)[0]]
    if not items or not _item_usable(items[-1]):
        return None
    return _Attempt(items, len(items))


def _yaml_truncation_repair(text: str) -> _Attempt | None:
    items = [_yaml_item(item) for item in _yaml_block(text)[0]]
    if len(items) < 2 or _item_usable(items[-1]):
        return None
    return _Attempt(items[:-1], len(items), truncation=True)


_STAGE_FUNCS = {
    "strict": (_json_strict, Grade.STRICT),
    "fenced": (_json_fenced, Grade.REPAIRED),
    "bracket_slice": (_json_bracket_slice, Grade.REPAIRED),
    "record_scan": (_json_record_scan, Grade.SALVAGED),
    "truncation_repair": (_json_truncation_repair, Grade.SALVAGED),
    "yaml_strict": (_yaml_strict, Grade.STRICT),
    "yaml_fenced": (_yaml_fenced, Grade.REPAIRED),
    "yaml_slice": (_yaml_slice, Grade.REPAIRED),
    "yaml_item_scan": (_yaml_item_scan, Grade.SALVAGED),
    "yaml_truncation_repair": (_yaml_truncation_repair, Grade.SALVAGED),
}


def _decode(raw) -> str:
    if isinstance(raw, (bytes, bytearray, memoryview)):
        return bytes(raw).decode("utf-8", errors="replace")
    return str(raw)


def _failed(queries, stages, raw_count) -> ParseReport:
    pairs = tuple(QuerySummaryPair(q.index, q.text, "", MatchMethod.UNMATCHED) for q in queries)
    return ParseReport(ParseOutcome(Grade.FAILED, tuple(stages)), pairs, raw_count)


def parse(raw, queries: Iterable, fmt: OutputFormat | str = OutputFormat.JSON) -> ParseReport:
    """Recover records from ``raw`` and align them to ``queries``."""
    text = _decode(raw)
    queries = _as_queries(queries)
    fmt = OutputFormat.coerce(fmt)
    ladder = YAML_STAGES if fmt is OutputFormat.YAML else JSON_STAGES

    applied: list[str] = []
    raw_seen = 0
    for name in ladder:
        func, grade = _STAGE_FUNCS[name]
        applied.append(name)
        try:
            attempt = func(text)
        except Exception:
            attempt = None
        if attempt is None:
            continue
        raw_seen = max(raw_seen, attempt.raw_count)

        canonical = []
        changed = False
        for rec in attempt.records:
            norm, was_changed = normalize_keys(rec) if rec is not None else (None, False)
            if norm is not None:
                canonical.append(norm)
                changed |= was_changed
        if not canonical and not (attempt.exact and not queries and not attempt.records):
            continue

        unique, seen = [], set()
        for rec in canonical:
            if rec["query"] not in seen:
                seen.add(rec["query"])
                unique.append(rec)

        outcome = ParseOutcome(
            attempt.grade or grade,
            tuple(applied),
            truncation_detected=attempt.truncation,
            keys_normalized=changed,
        )
        return ParseReport(outcome, tuple(align(unique, queries)), attempt.raw_count)

    return _failed(queries, applied, raw_seen)


_YAML_BREAKS = frozenset("\x85\u2028\u2029")


def serialize(pairs: Iterable, fmt: OutputFormat | str = OutputFormat.JSON) -> str:
    """Canonical well-formed array of ``{"query", "summary"}`` records."""
    fmt = OutputFormat.coerce(fmt)
    records = []
    for p in pairs:
        if isinstance(p, QuerySummaryPair):
            records.append({"query": p.query_text, "summary": p.summary})
        elif isinstance(p, dict):
            records.append({"query": p["query"], "summary": p["summary"]})
        else:
            q, s = p
            records.append({"query": q, "summary": s})
    if fmt is OutputFormat.YAML:
        if not records:
            return "[]\n"
        # PyYAML writes NEL and the Unicode line separators raw when
        # allow_unicode is on, and they then fold on load; escape instead.
        raw_ok = not any(ch in _YAML_BREAKS for r in records for v in r.values() for ch in v)
        return yaml.safe_dump(records, allow_unicode=raw_ok, sort_keys=False, width=float("inf"))
    return json.dumps(records, ensure_ascii=False, indent=2)
