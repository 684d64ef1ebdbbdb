import json
from decimal import Decimal

import pytest
from hypothesis import given
from hypothesis import strategies as st

from multiquery.costs import CostLedger, PricingTable, UnknownModel, cost_of, single_query_equivalent
from multiquery.model import MultiQueryJob
from multiquery.prompt import render

TABLE = PricingTable.default()


def test_transcript_price_example():
    assert cost_of(12_000, 0, "gpt-4o", TABLE).total_usd == Decimal("0.06")


def test_eight_copies_cost_eight_times():
    assert cost_of(8 * 12_000, 0, "gpt-4o", TABLE).total_usd == Decimal("0.48")


def test_unknown_model():
    with pytest.raises(UnknownModel):
        cost_of(1, 1, "nope", TABLE)


def test_ini_loading(tmp_path):
    path = tmp_path / "p.ini"
    path.write_text("[m]\ninput_usd_per_million_tokens = 1.5\noutput_usd_per_million_tokens = 0\n")
    table = PricingTable.load(path)
    assert "m" in table
    assert cost_of(1_000_000, 10, "m", table).total_usd == Decimal("1.5")
    with pytest.raises(ValueError):
        PricingTable.from_ini("[m]\ninput_usd_per_million_tokens = -1\noutput_usd_per_million_tokens = 0\n")


def test_rounds_half_up_to_micro_usd():
    table = PricingTable.from_ini("[m]\ninput_usd_per_million_tokens = 0.5\noutput_usd_per_million_tokens = 0\n")
    assert cost_of(1, 0, "m", table).input_micro_usd == 1
    assert cost_of(3, 0, "m", table).input_micro_usd == 2


counts = st.integers(min_value=0, max_value=10**8)


@given(counts, counts, counts, counts)
def test_additive(a, b, c, d):
    total = cost_of(a, b, "gpt-4o", TABLE) + cost_of(c, d, "gpt-4o", TABLE)
    assert total.total_micro_usd == cost_of(a + c, b + d, "gpt-4o", TABLE).total_micro_usd


@given(counts, counts, st.integers(min_value=0, max_value=1000))
def test_monotone(i, o, extra):
    assert cost_of(i + extra, o, "gpt-4o", TABLE).total_micro_usd >= cost_of(i, o, "gpt-4o", TABLE).total_micro_usd


CONTEXT = " ".join(f"w{i}" for i in range(2000))


def test_single_query_equivalent_scales_with_queries():
    job = MultiQueryJob.build("j", CONTEXT, [f"Question {i}?" for i in range(8)])
    est = single_query_equivalent(job, None, None, TABLE, "gpt-4o")
    multi = render(job).estimated_input_tokens
    ratio = est.input_tokens / multi
    assert 7 < ratio < 8


def test_one_query_saves_nothing():
    job = MultiQueryJob.build("j", CONTEXT, ["Only question?"])
    ledger = CostLedger(TABLE)
    ledger.add_call("gpt-4o", render(job).estimated_input_tokens, 50)
    ledger.add_baseline(single_query_equivalent(job, None, None, TABLE, "gpt-4o", ["a summary"]))
    assert ledger.savings_ratio == pytest.approx(1.0, abs=0.01)


def test_ledger_summary_and_export(tmp_path):
    ledger = CostLedger(TABLE)
    ledger.add_call("gpt-4o", 12_000, 100, "j1")
    ledger.add_call("gpt-4o", 1_000, 0, "j2")
    s = ledger.summary()
    assert s["calls"] == 2 and s["input_tokens"] == 13_000 and s["output_tokens"] == 100
    assert Decimal(s["total_cost_usd"]) == Decimal("0.0665")
    assert s["savings_ratio"] is None
    assert ledger.export(tmp_path / "l.jsonl") == 2
    rows = [json.loads(x) for x in (tmp_path / "l.jsonl").read_text().splitlines()]
    assert rows[0]["label"] == "j1" and rows[0]["input_cost_micro_usd"] == 60_000
