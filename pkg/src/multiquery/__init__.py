"""Multi-query prompting: coalesce queries that share a context, parse the answers, measure them."""

__version__ = "0.1.0"

from .costs import CostLedger, PricingTable, cost_of, single_query_equivalent  # noqa: E402
from .evaluation import (  # noqa: E402
    compare_runs,
    format_accuracy,
    length_stats,
    paired_ttest,
    rouge,
    summarize_run,
)
from .gateway import CoalescePolicy, Gateway, JobResult, run_job, run_single_query_job  # noqa: E402
from .model import (  # noqa: E402
    ContextFingerprint,
    MatchMethod,
    MultiQueryJob,
    OutputFormat,
    Query,
    QuerySummaryPair,
    Transcript,
    fingerprint,
)
from .parsing import Grade, ParseReport, parse, serialize  # noqa: E402
from .prompt import DecodingParams, PromptTemplate, RenderedPrompt, render  # noqa: E402

__all__ = [
    "CoalescePolicy",
    "ContextFingerprint",
    "CostLedger",
    "DecodingParams",
    "Gateway",
    "Grade",
    "JobResult",
    "MatchMethod",
    "MultiQueryJob",
    "OutputFormat",
    "ParseReport",
    "PricingTable",
    "PromptTemplate",
    "Query",
    "QuerySummaryPair",
    "RenderedPrompt",
    "Transcript",
    "compare_runs",
    "cost_of",
    "fingerprint",
    "format_accuracy",
    "length_stats",
    "paired_ttest",
    "parse",
    "render",
    "rouge",
    "run_job",
    "run_single_query_job",
    "serialize",
    "single_query_equivalent",
    "summarize_run",
]
