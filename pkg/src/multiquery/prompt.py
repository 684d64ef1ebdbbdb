"""Rendering multi-query prompts under an input token budget."""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .model import ContextFingerprint, MultiQueryJob, OutputFormat, fingerprint, word_count

TokenCounter = Callable[[str], int]

# Prefixed to any marker string found inside a transcript or query so that a
# marker line in the rendered prompt is always one we emitted.
ESCAPE_SENTINEL = "\\"

JSON_INSTRUCTION = (
    "A list of queries followed by a transcript is given below. For each of the "
    "following queries, generate the query-focused summary of the given transcript "
    "in an Array of JSON objects. You must give your response only in the required "
    "Array of JSON objects format and your response for each JSON object should "
    "contain the corresponding values for the following keys: (i) query and (ii) summary."
)

YAML_INSTRUCTION = (
    "A list of queries followed by a transcript is given below. For each of the "
    "following queries, generate the query-focused summary of the given transcript "
    "in a YAML list of mappings. You must give your response only in the required "
    "YAML list of mappings format and your response for each mapping should "
    "contain the corresponding values for the following keys: (i) query and (ii) summary."
)


class PromptError(Exception):
    pass


class QueriesDontFit(PromptError):
    pass


def estimate_tokens(text: str) -> int:
    """ceil(words * 100 / 75), the word-based token heuristic."""
    return -(-word_count(text) * 4 // 3)


_token_counters: dict[str, TokenCounter] = {}


def register_token_counter(model: str, counter: TokenCounter) -> None:
    """Install an exact tokenizer for ``model``; others use :func:`estimate_tokens`."""
    _token_counters[model] = counter


def token_counter_for(model: str | None) -> TokenCounter:
    if model is None:
        return estimate_tokens
    return _token_counters.get(model, estimate_tokens)


@dataclass(frozen=True)
class DecodingParams:
    max_input_tokens: int = 20000
    max_output_tokens: int = 2000
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.max_input_tokens <= 0 or self.max_output_tokens <= 0:
            raise ValueError("token limits must be positive")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    def to_record(self) -> dict:
        return {
            "max_input_tokens": self.max_input_tokens,
            "max_output_tokens": self.max_output_tokens,
            "temperature": self.temperature,
        }

    @classmethod
    def from_record(cls, record: dict | None) -> "DecodingParams":
        record = record or {}
        return cls(
            int(record.get("max_input_tokens", 20000)),
            int(record.get("max_output_tokens", 2000)),
            float(record.get("temperature", 1.0)),
        )


@dataclass(frozen=True)
class PromptTemplate:
    instruction_text: str
    query_block_markers: tuple[str, str] = ("#Queries Begin", "#Queries End")
    transcript_block_markers: tuple[str, str] = ("#Transcript Begin", "#Transcript End")
    output_format: OutputFormat = OutputFormat.JSON
    name: str = "custom"

    def __post_init__(self) -> None:
        object.__setattr__(self, "output_format", OutputFormat.coerce(self.output_format))
        lowered = self.instruction_text.lower()
        for key in ("query", "summary"):
            if key not in lowered:
                raise ValueError(f"instruction must mention the record key {key!r}")
        for marker in self.markers:
            if not marker.strip():
                raise ValueError("markers must be non-empty")
            if marker in self.instruction_text:
                raise ValueError(f"marker {marker!r} appears inside the instruction")
        if len(set(self.markers)) != 4:
            raise ValueError("the four markers must be distinct")

    @property
    def markers(self) -> tuple[str, str, str, str]:
        return (*self.query_block_markers, *self.transcript_block_markers)


BUILTIN_TEMPLATES = {
    "json-default": PromptTemplate(JSON_INSTRUCTION, output_format=OutputFormat.JSON, name="json-default"),
    "yaml-default": PromptTemplate(YAML_INSTRUCTION, output_format=OutputFormat.YAML, name="yaml-default"),
}


def get_template(name_or_path: str | Path) -> PromptTemplate:
    key = str(name_or_path)
    if key in BUILTIN_TEMPLATES:
        return BUILTIN_TEMPLATES[key]
    return load_template(name_or_path)


def template_for(fmt: OutputFormat | str) -> PromptTemplate:
    return BUILTIN_TEMPLATES[f"{OutputFormat.coerce(fmt).value}-default"]


def load_template(path: str | Path) -> PromptTemplate:
    """Read a template from an INI-style file.

    ::

        [template]
        name = terse
        format = json
        instruction = Answer each query ... keys query and summary.

        [markers]
        queries_begin = #Queries Begin
        queries_end = #Queries End
        transcript_begin = #Transcript Begin
        transcript_end = #Transcript End

    The ``[markers]`` section is optional.
    """
    parser = configparser.ConfigParser(interpolation=None)
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    if not parser.has_section("template"):
        raise PromptError(f"{path}: missing [template] section")
    section = parser["template"]
    instruction = section.get("instruction", "").strip()
    if not instruction:
        raise PromptError(f"{path}: empty instruction")
    markers = parser["markers"] if parser.has_section("markers") else {}
    return PromptTemplate(
        instruction_text=" ".join(instruction.split()),
        query_block_markers=(
            markers.get("queries_begin", "#Queries Begin"),
            markers.get("queries_end", "#Queries End"),
        ),
        transcript_block_markers=(
            markers.get("transcript_begin", "#Transcript Begin"),
            markers.get("transcript_end", "#Transcript End"),
        ),
        output_format=OutputFormat.coerce(section.get("format", "json")),
        name=section.get("name", Path(path).stem),
    )


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    estimated_input_tokens: int
    truncated: bool
    job_fingerprint: ContextFingerprint
    output_format: OutputFormat = OutputFormat.JSON
    query_count: int = 0


def escape_markers(text: str, template: PromptTemplate) -> str:
    for marker in template.markers:
        if marker in text:
            text = text.replace(marker, ESCAPE_SENTINEL + marker)
    return text


def _layout(template: PromptTemplate, queries: list[str], transcript: str) -> str:
    qb, qe = template.query_block_markers
    tb, te = template.transcript_block_markers
    lines = [template.instruction_text, "", qb]
    lines.extend(f"{i}. {q}" for i, q in enumerate(queries, start=1))
    lines += [qe, "", tb, transcript, te]
    return "\n".join(lines)


_WORD = re.compile(r"\S+")


def _keep_words(text: str, n: int) -> str:
    if n <= 0:
        return ""
    end = 0
    for i, m in enumerate(_WORD.finditer(text)):
        if i == n - 1:
            end = m.end()
            break
    else:
        return text
    return text[:end]


def render(
    job: MultiQueryJob,
    template: PromptTemplate | None = None,
    params: DecodingParams | None = None,
    token_counter: TokenCounter | None = None,
) -> RenderedPrompt:
    """Lay out instruction, numbered queries and transcript.

    If the prompt is over ``params.max_input_tokens`` the transcript is cut
    from the end; the instruction and queries are never shortened. Raises
    :class:`QueriesDontFit` when they alone exceed the budget.
    """
    template = template or template_for(job.output_format)
    params = params or DecodingParams()
    count = token_counter or estimate_tokens

    queries = [escape_markers(q.text, template) for q in job.queries]
    transcript = escape_markers(job.transcript.text, template)
    text = _layout(template, queries, transcript)
    tokens = count(text)
    truncated = False

    if tokens > params.max_input_tokens:
        if count(_layout(template, queries, "")) > params.max_input_tokens:
            raise QueriesDontFit(
                f"instruction and {len(queries)} queries exceed {params.max_input_tokens} tokens"
            )
        truncated = True
        # Largest word prefix that fits; counters are monotone in word count.
        lo, hi = 0, word_count(transcript)
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if count(_layout(template, queries, _keep_words(transcript, mid))) <= params.max_input_tokens:
                lo = mid
            else:
                hi = mid - 1
        text = _layout(template, queries, _keep_words(transcript, lo))
        tokens = count(text)

    return RenderedPrompt(
        text=text,
        estimated_input_tokens=tokens,
        truncated=truncated,
        job_fingerprint=fingerprint(job.transcript.text),
        output_format=template.output_format,
        query_count=len(queries),
    )


def extract_queries(prompt_text: str, template: PromptTemplate | None = None) -> list[str]:
    """Recover the numbered query lines from a prompt rendered by :func:`render`."""
    template = template or BUILTIN_TEMPLATES["json-default"]
    qb, qe = template.query_block_markers
    lines = prompt_text.split("\n")
    try:
        start = lines.index(qb)
        stop = lines.index(qe, start + 1)
    except ValueError:
        return []
    out = []
    for i, line in enumerate(lines[start + 1 : stop], start=1):
        prefix = f"{i}. "
        out.append(line[len(prefix):] if line.startswith(prefix) else line)
    return out


def extract_transcript(prompt_text: str, template: PromptTemplate | None = None) -> str:
    template = template or BUILTIN_TEMPLATES["json-default"]
    tb, te = template.transcript_block_markers
    begin = prompt_text.find("\n" + tb + "\n")
    end = prompt_text.rfind("\n" + te)
    if begin < 0 or end < begin:
        return ""
    return prompt_text[begin + len(tb) + 2 : end]
