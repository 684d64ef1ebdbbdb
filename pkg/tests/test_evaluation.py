import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from multiquery.evaluation import (
    EmptyInput,
    JobSetMismatch,
    LengthMismatch,
    TooFewSamples,
    compare_runs,
    encode,
    format_accuracy,
    length_stats,
    paired_ttest,
    rouge,
    rouge_batch,
    rouge_counts,
    rouge_cross,
    summarize_run,
    tokenize,
)
from multiquery.gateway import JobResult
from multiquery.model import MatchMethod, MultiQueryJob, QuerySummaryPair
from multiquery.parsing import Grade, ParseOutcome, ParseReport


def test_tokenize():
    assert tokenize("The cat, (sat)... don't MAT!") == ["the", "cat", "sat", "don't", "mat"]
    assert tokenize("  ...  ") == []


def test_rouge_worked_example():
    s = rouge("the cat sat on the mat", "the cat lay on the mat")
    assert s.r1.f1 == pytest.approx(5 / 6)
    assert s.r2.f1 == pytest.approx(3 / 5)
    assert s.rl.f1 == pytest.approx(5 / 6)


def test_rouge_edge_cases():
    assert rouge("", "anything here").r1.f1 == 0.0
    assert rouge("same words", "same words").r2.f1 == 1.0
    assert rouge("word", "word").r2.f1 == 0.0  # no bigrams on either side
    s = rouge("a b c d", "a b")
    assert (s.r1.precision, s.r1.recall) == (0.5, 1.0)


def test_rouge_is_symmetric_in_f1():
    a, b = "we agreed to ship the remote next quarter", "the remote ships next quarter as agreed"
    x, y = rouge(a, b), rouge(b, a)
    for m in ("r1", "r2", "rl"):
        assert getattr(x, m).f1 == pytest.approx(getattr(y, m).f1)
        assert getattr(x, m).precision == pytest.approx(getattr(y, m).recall)


tokens = st.lists(st.sampled_from("abcd"), max_size=9)


@settings(max_examples=300, deadline=None)
@given(tokens, tokens)
def test_counts_match_oracle(c, r):
    counts = rouge_counts(*encode([c], [r]))
    assert counts.overlap1[0] == oracles.ngram_overlap(c, r, 1)
    assert counts.overlap2[0] == oracles.ngram_overlap(c, r, 2)
    assert counts.lcs[0] == oracles.lcs_bruteforce(c, r)


long_tokens = st.lists(st.sampled_from("abc"), min_size=60, max_size=140)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from("abc"), max_size=12), long_tokens)
def test_long_references_match_oracle(c, r):
    counts = rouge_counts(*encode([c], [r]))
    assert counts.overlap1[0] == oracles.ngram_overlap(c, r, 1)
    assert counts.overlap2[0] == oracles.ngram_overlap(c, r, 2)
    assert counts.lcs[0] == oracles.lcs_bruteforce(c, r)


def test_cross_matches_pairwise():
    seqs = oracles.all_sequences(3, 2)
    C, lc, R, lr = encode(seqs, seqs)
    lcs = np.zeros((len(seqs), len(seqs)), dtype=int)
    for a, b, counts in rouge_cross(C, lc, R, lr, block_pairs=7):
        lcs[a:b] = counts.lcs.reshape(b - a, len(seqs))
    assert (lcs == oracles.lcs_matrix(seqs, 2, 3)).all()


def test_batch_length_mismatch():
    with pytest.raises(LengthMismatch):
        rouge_batch(["a"], ["a", "b"])


def test_stemming_is_optional():
    pytest.importorskip("nltk")
    plain = rouge("meetings were scheduled", "meeting was schedule")
    stemmed = rouge("meetings were scheduled", "meeting was schedule", stem=True)
    assert stemmed.r1.f1 > plain.r1.f1


# --------------------------------------------------------------------------


def test_format_accuracy():
    grades = [Grade.STRICT] * 6 + [Grade.SALVAGED] * 2 + [Grade.FAILED] * 2
    acc = format_accuracy(grades)
    assert (acc.strict, acc.lenient, acc.n) == (0.6, 0.8, 10)
    with pytest.raises(EmptyInput):
        format_accuracy([])


def test_length_stats():
    s = length_stats(["one two three", "", "four five", "   "])
    assert s.mean == 2.5 and s.count == 2 and s.empty_count == 2
    assert (s.minimum, s.maximum, s.median) == (2, 3, 2.5)
    assert length_stats(["", ""]).mean is None


def test_ttest_against_integrated_density():
    a = [0.31, 0.42, 0.38, 0.27, 0.45, 0.33]
    b = [0.29, 0.35, 0.36, 0.30, 0.40, 0.28]
    res = paired_ttest(a, b)
    d = np.subtract(a, b)
    t = d.mean() / (d.std(ddof=1) / math.sqrt(len(d)))
    assert res.t == pytest.approx(t) and res.df == 5
    assert res.p == pytest.approx(oracles.t_two_sided_p(t, 5), rel=1e-6)


def test_ttest_antisymmetric():
    a, b = [1.0, 2.0, 4.0, 3.5], [0.5, 2.5, 3.0, 1.0]
    x, y = paired_ttest(a, b), paired_ttest(b, a)
    assert x.t == pytest.approx(-y.t) and x.p == pytest.approx(y.p)


def test_ttest_degenerate():
    assert paired_ttest([1, 2], [1, 2]).p == 1.0
    res = paired_ttest([2, 3], [1, 2])
    assert res.t == math.inf and res.p == 0.0 and res.significant
    with pytest.raises(TooFewSamples):
        paired_ttest([1], [2])
    with pytest.raises(LengthMismatch):
        paired_ttest([1, 2], [1, 2, 3])


# --------------------------------------------------------------------------


def make_result(job, summaries, grade=Grade.STRICT, mode="multi"):
    pairs = [
        QuerySummaryPair(q.index, q.text, s, MatchMethod.EXACT if s else MatchMethod.UNMATCHED)
        for q, s in zip(job.queries, summaries)
    ]
    report = ParseReport(ParseOutcome(grade, ()), tuple(pairs))
    return JobResult(job.id, pairs, report, 1, _usage(), chunk_reports=[report], mode=mode)


def _usage():
    from multiquery.backends import Usage

    return Usage(10, 5)


@pytest.fixture
def two_jobs():
    j1 = MultiQueryJob.build("a", "ctx one", ["q1?", "q2?"], ["the budget was approved", "design review next week"])
    j2 = MultiQueryJob.build("b", "ctx two", ["q3?", "q4?"], ["marketing wants a launch", "testing is late"])
    return [j1, j2]


def test_summarize_run(two_jobs):
    j1, j2 = two_jobs
    results = [
        make_result(j1, ["the budget was approved", ""], Grade.SALVAGED),
        make_result(j2, ["marketing wants a launch", "testing is late"]),
    ]
    s = summarize_run(results, two_jobs, micro=True)
    assert s.empty_pairs == 1
    assert s.macro["rouge1"]["f1"] == pytest.approx(3 / 4)
    assert s.accuracy.strict == 0.5 and s.accuracy.lenient == 1.0
    assert s.micro["rouge1"]["recall"] == pytest.approx(11 / 15)
    assert s.lengths.count == 3


def test_summarize_run_external_and_mismatch(two_jobs):
    j1, j2 = two_jobs
    results = [make_result(j1, ["x", "y"]), make_result(j2, ["z", "w"])]
    ext = {"bert": {("a", 1): 0.5, ("a", 2): 0.7, ("b", 1): 0.1, ("b", 2): 0.3}}
    s = summarize_run(results, two_jobs, external=ext)
    assert s.macro["bert"]["mean"] == pytest.approx(0.4)
    with pytest.raises(ValueError):
        summarize_run(results, two_jobs, external={"bert": {("a", 1): 0.5}})
    with pytest.raises(JobSetMismatch):
        summarize_run(results, [j1])


def test_compare_runs(two_jobs):
    j1, j2 = two_jobs
    multi = summarize_run(
        [make_result(j1, ["the budget", "review"]), make_result(j2, ["launch", "late"])], two_jobs, label="multi")
    single = summarize_run(
        [make_result(j1, ["the budget was approved", "design review next week"], mode="single"),
         make_result(j2, ["marketing wants a launch", "testing late"], mode="single")], two_jobs, label="single")
    cmp = compare_runs(multi, single)
    row = cmp.rows[0]
    assert row["metric"] == "rouge1_f1" and row["delta"] < 0
    table = cmp.to_table()
    assert "rouge1_f1" in table and "length (words)" in table
    with pytest.raises(JobSetMismatch):
        compare_runs(multi, summarize_run([make_result(j1, ["a", "b"])], [j1]))
