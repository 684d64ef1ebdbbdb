"""Deterministic offline backend that reproduces the common malformations.

Each request draws one failure mode from a :class:`FailureModeProfile`. The
draw is seeded by ``(seed, request digest)``, so a given request always gets
the same response no matter how many other requests came before it.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import re
from dataclasses import dataclass, field

from ..model import OutputFormat, fingerprint
from ..parsing import serialize
from ..prompt import PromptTemplate, estimate_tokens, extract_queries, extract_transcript
from .base import BackendRequest, BackendResponse, Source, Usage

MODES = (
    "wellformed",
    "numbered_no_array",
    "hallucination",
    "truncated",
    "stray_brackets",
    "wrong_keys",
    "yaml_instead_of_json",
)


def _seed(*parts) -> int:
    blob = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big")


@dataclass(frozen=True)
class FailureModeProfile:
    probabilities: dict[str, float] = field(default_factory=lambda: {"wellformed": 1.0})
    seed: int = 0

    def __post_init__(self) -> None:
        unknown = set(self.probabilities) - set(MODES)
        if unknown:
            raise ValueError(f"unknown failure modes: {sorted(unknown)}")
        if any(p < 0 for p in self.probabilities.values()):
            raise ValueError("probabilities must be non-negative")
        total = math.fsum(self.probabilities.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {total}, expected 1")

    @classmethod
    def single(cls, mode: str, seed: int = 0) -> "FailureModeProfile":
        return cls({mode: 1.0}, seed)

    @classmethod
    def parse(cls, spec: str, seed: int = 0) -> "FailureModeProfile":
        """``"wellformed=0.8,hallucination=0.2"``; a bare mode name means 1.0."""
        spec = spec.strip()
        if "=" not in spec:
            return cls.single(spec, seed)
        probs = {}
        for part in spec.split(","):
            name, _, value = part.partition("=")
            probs[name.strip()] = float(value)
        return cls(probs, seed)

    def to_record(self) -> dict:
        return {"probabilities": dict(self.probabilities), "seed": self.seed}

    def choose(self, rng: random.Random) -> str:
        x = rng.random()
        acc = 0.0
        last = None
        for mode in MODES:
            p = self.probabilities.get(mode, 0.0)
            if p <= 0:
                continue
            acc += p
            last = mode
            if x < acc:
                return mode
        return last


_BRACES = re.compile(r"[\[\]{}\"#]")


def synthesize_summary(context_id: str, transcript: str, query_index: int, query: str, words: int = 40) -> str:
    """Fixed pseudo-summary for ``(context, query)``: a transcript excerpt."""
    rng = random.Random(_seed(context_id, query_index, query))
    tokens = transcript.split() or query.split()
    n = min(len(tokens), words)
    start = rng.randrange(0, len(tokens) - n + 1) if tokens else 0
    excerpt = " ".join(tokens[start : start + n])
    return f"On {query}: {excerpt}".strip()


def _record_json(query: str, summary: str, key: str = "query", indent: int | None = 2) -> str:
    return json.dumps({key: query, "summary": summary}, ensure_ascii=False, indent=indent)


def _indent(text: str, prefix: str = "  ") -> str:
    return "\n".join(prefix + line for line in text.split("\n"))


def render_mode(mode: str, pairs: list[tuple[str, str]], fmt: OutputFormat, transcript: str = "") -> str:
    """Response text for ``pairs`` written the way ``mode`` goes wrong."""
    n = len(pairs)
    if mode == "wellformed":
        return serialize(pairs, fmt)
    if mode == "yaml_instead_of_json":
        return serialize(pairs, OutputFormat.YAML)
    if mode == "numbered_no_array":
        blocks = [f"#{i}\n{_record_json(q, s)}" for i, (q, s) in enumerate(pairs, start=1)]
        return "\n\n".join(blocks) + "\n]"
    if mode == "hallucination":
        words = _BRACES.sub("", " ".join(transcript.split()[:12])) or "the overlap issue"
        return f"What is the main research goal regarding {words}?"
    if mode == "truncated":
        preamble = "Based on the provided transcript, here are the JSON objects summarizing the key points of the meeting:\n\n"
        complete = [_indent(_record_json(q, s)) for q, s in pairs[:-1]] if n > 1 else [_indent(_record_json(*pairs[0]))]
        cut_query = pairs[-1][0] if n > 1 else ""
        dangling = "  {\n    \"query\": " + json.dumps(cut_query, ensure_ascii=False) + ","
        return preamble + "[\n" + ",\n".join(complete) + ",\n" + dangling + "\n"
    if mode == "stray_brackets":
        body = "\n]\n[\n".join("  " + _record_json(q, s, indent=None) for q, s in pairs)
        return "[\n" + body + "\n]\n[/JSONObjects]\n\n]"
    if mode == "wrong_keys":
        half = n // 2
        records = [
            {("text" if i >= half else "query"): q, "summary": s} for i, (q, s) in enumerate(pairs)
        ]
        return json.dumps(records, ensure_ascii=False, indent=4)
    raise ValueError(f"unknown mode {mode!r}")


class MockBackend:
    """Offline backend for tests and dry runs.

    ``single_query_profile``, when given, is used instead of ``profile`` for
    prompts that carry exactly one query (the retry path).
    """

    def __init__(
        self,
        profile: FailureModeProfile | None = None,
        *,
        seed: int | None = None,
        single_query_profile: FailureModeProfile | None = None,
        template: PromptTemplate | None = None,
        model_name: str = "mock",
        summary_words: int = 40,
    ):
        self.profile = profile or FailureModeProfile()
        self.seed = self.profile.seed if seed is None else seed
        self.single_query_profile = single_query_profile
        self.template = template
        self.model_name = model_name
        self.summary_words = summary_words
        self.calls = 0
        self.modes: list[str] = []

    def respond(self, request: BackendRequest) -> tuple[str, str]:
        text = request.prompt.text
        queries = extract_queries(text, self.template)
        transcript = extract_transcript(text, self.template)
        context_id = fingerprint(transcript).hex[:16]
        profile = self.profile
        if len(queries) == 1 and self.single_query_profile is not None:
            profile = self.single_query_profile
        rng = random.Random(_seed(self.seed, request.digest()))
        mode = profile.choose(rng)
        pairs = [
            (q, synthesize_summary(context_id, transcript, i, q, self.summary_words))
            for i, q in enumerate(queries, start=1)
        ]
        if not pairs:
            return mode, ""
        return mode, render_mode(mode, pairs, request.prompt.output_format, transcript)

    async def complete(self, request: BackendRequest) -> BackendResponse:
        mode, text = self.respond(request)
        self.calls += 1
        self.modes.append(mode)
        usage = Usage(estimate_tokens(request.prompt.text), estimate_tokens(text))
        return BackendResponse(text, usage, 0.0, Source.MOCK)
