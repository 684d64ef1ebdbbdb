"""Token and currency accounting.

Money is carried as integer micro-USD so ledger totals are exact sums of
their entries. Prices are quoted per million tokens, which makes a price of
``p`` USD per 1M tokens equal to ``p`` micro-USD per token.
"""

from __future__ import annotations

import configparser
import threading
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from importlib import resources
from pathlib import Path

from .model import MultiQueryJob, make_queries
from .prompt import DecodingParams, PromptTemplate, estimate_tokens, render, template_for
from .records import write_jsonl

MICRO = Decimal(1_000_000)


class UnknownModel(KeyError):
    pass


@dataclass(frozen=True)
class ModelPrice:
    input_usd_per_million_tokens: Decimal
    output_usd_per_million_tokens: Decimal

    def __post_init__(self) -> None:
        for name in ("input_usd_per_million_tokens", "output_usd_per_million_tokens"):
            value = Decimal(str(getattr(self, name)))
            if value < 0:
                raise ValueError(f"{name} must be >= 0")
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class PricingTable:
    prices: dict[str, ModelPrice]

    def __getitem__(self, model: str) -> ModelPrice:
        try:
            return self.prices[model]
        except KeyError:
            raise UnknownModel(model) from None

    def __contains__(self, model: str) -> bool:
        return model in self.prices

    @classmethod
    def from_ini(cls, text: str) -> "PricingTable":
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_string(text)
        prices = {}
        for model in parser.sections():
            section = parser[model]
            prices[model] = ModelPrice(
                Decimal(section["input_usd_per_million_tokens"]),
                Decimal(section["output_usd_per_million_tokens"]),
            )
        return cls(prices)

    @classmethod
    def load(cls, path: str | Path) -> "PricingTable":
        return cls.from_ini(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> "PricingTable":
        text = resources.files("multiquery").joinpath("data/pricing.ini").read_text(encoding="utf-8")
        return cls.from_ini(text)


def _micro(tokens: int, usd_per_million: Decimal) -> int:
    return int((Decimal(tokens) * usd_per_million).to_integral_value(rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class Cost:
    input_micro_usd: int = 0
    output_micro_usd: int = 0

    @property
    def total_micro_usd(self) -> int:
        return self.input_micro_usd + self.output_micro_usd

    @property
    def input_usd(self) -> Decimal:
        return Decimal(self.input_micro_usd) / MICRO

    @property
    def output_usd(self) -> Decimal:
        return Decimal(self.output_micro_usd) / MICRO

    @property
    def total_usd(self) -> Decimal:
        return Decimal(self.total_micro_usd) / MICRO

    def __add__(self, other: "Cost") -> "Cost":
        return Cost(self.input_micro_usd + other.input_micro_usd, self.output_micro_usd + other.output_micro_usd)


def cost_of(input_tokens: int, output_tokens: int, model: str, table: PricingTable) -> Cost:
    price = table[model]
    return Cost(
        _micro(input_tokens, price.input_usd_per_million_tokens),
        _micro(output_tokens, price.output_usd_per_million_tokens),
    )


@dataclass(frozen=True)
class BaselineEstimate:
    input_tokens: int
    output_tokens: int
    cost: Cost


def single_query_equivalent(
    job: MultiQueryJob,
    template: PromptTemplate | None,
    params: DecodingParams | None,
    table: PricingTable,
    model: str,
    summaries=None,
) -> BaselineEstimate:
    """What the job would cost with one prompt (and one transcript copy) per query.

    The output side reuses the observed ``summaries``; with none given it is 0.
    """
    template = template or template_for(job.output_format)
    input_tokens = 0
    for query in job.queries:
        single = MultiQueryJob(job.transcript, make_queries([query.text]), None, job.output_format)
        input_tokens += render(single, template, params).estimated_input_tokens
    output_tokens = sum(estimate_tokens(s) for s in (summaries or ()))
    return BaselineEstimate(input_tokens, output_tokens, cost_of(input_tokens, output_tokens, model, table))


@dataclass(frozen=True)
class LedgerEntry:
    model: str
    input_tokens: int
    output_tokens: int
    input_cost: int
    output_cost: int
    label: str = ""

    def to_record(self) -> dict:
        return {
            "label": self.label,
            "model": self.model,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "input_cost_micro_usd": self.input_cost,
            "output_cost_micro_usd": self.output_cost,
        }


@dataclass
class CostLedger:
    table: PricingTable
    entries: list[LedgerEntry] = field(default_factory=list)
    baseline_input_tokens: int = 0
    baseline_output_tokens: int = 0
    baseline: Cost = field(default_factory=Cost)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add_call(self, model: str, input_tokens: int, output_tokens: int, label: str = "") -> LedgerEntry:
        cost = cost_of(input_tokens, output_tokens, model, self.table)
        entry = LedgerEntry(model, input_tokens, output_tokens, cost.input_micro_usd, cost.output_micro_usd, label)
        with self._lock:
            self.entries.append(entry)
        return entry

    def add_baseline(self, estimate: BaselineEstimate) -> None:
        with self._lock:
            self.baseline_input_tokens += estimate.input_tokens
            self.baseline_output_tokens += estimate.output_tokens
            self.baseline = self.baseline + estimate.cost

    @property
    def totals(self) -> Cost:
        with self._lock:
            entries = list(self.entries)
        return Cost(sum(e.input_cost for e in entries), sum(e.output_cost for e in entries))

    @property
    def input_tokens(self) -> int:
        return sum(e.input_tokens for e in self.entries)

    @property
    def output_tokens(self) -> int:
        return sum(e.output_tokens for e in self.entries)

    @property
    def savings_ratio(self) -> float | None:
        actual = self.totals.input_micro_usd
        if actual <= 0 or self.baseline.input_micro_usd <= 0:
            return None
        return float(Fraction(self.baseline.input_micro_usd, actual))

    def summary(self) -> dict:
        totals = self.totals
        return {
            "calls": len(self.entries),
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "input_cost_usd": str(totals.input_usd),
            "output_cost_usd": str(totals.output_usd),
            "total_cost_usd": str(totals.total_usd),
            "single_query_equivalent": {
                "input_tokens": self.baseline_input_tokens,
                "output_tokens": self.baseline_output_tokens,
                "input_cost_usd": str(self.baseline.input_usd),
                "output_cost_usd": str(self.baseline.output_usd),
            },
            "savings_ratio": self.savings_ratio,
            # The savings ratio compares input cost only; output pricing is an extension.
            "savings_basis": "input",
        }

    def export(self, path: str | Path) -> int:
        """Write one line per ledger entry."""
        return write_jsonl(path, (e.to_record() for e in self.entries))
