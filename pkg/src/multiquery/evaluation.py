"""Format accuracy, ROUGE, length statistics and paired significance tests.

ROUGE counts for a batch of (candidate, reference) pairs are computed from
one equality tensor per pair. Row ``i`` of it, packed into an integer, is the
bitmask of reference positions holding candidate token ``i``. From those masks:

* unigram overlap: candidate position ``i`` counts when its occurrence number
  among equal candidate tokens is at most ``popcount(M[i])``; summed, that is
  the clipped multiset intersection;
* bigram overlap: the same with ``M[i] & (M[i+1] >> 1)``;
* LCS: the bit-parallel recurrence ``U = V & M[i]; V = (V + U) | (V - U)``,
  after which the LCS length is the number of zero bits of ``V``.

References up to 63 tokens take the vectorized uint64 path; longer ones fall
back to the same recurrence on Python integers.
"""

from __future__ import annotations

import math
import statistics
import unicodedata
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .model import MultiQueryJob, QuerySummaryPair, word_count
from .parsing import Grade, ParseReport

LENIENT_GRADES = frozenset({Grade.STRICT, Grade.REPAIRED, Grade.SALVAGED})
_WORD_BITS = 63
_CHUNK_CELLS = 8_000_000  # pairs * Lc * Lr per vectorized block


class EmptyInput(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


class JobSetMismatch(ValueError):
    pass


# --------------------------------------------------------------------------
# tokenization


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def _strip_punct(word: str) -> str:
    start, end = 0, len(word)
    while start < end and _is_punct(word[start]):
        start += 1
    while end > start and _is_punct(word[end - 1]):
        end -= 1
    return word[start:end]


@lru_cache(maxsize=1)
def _stemmer():
    try:
        from nltk.stem.porter import PorterStemmer
    except ImportError as exc:  # pragma: no cover - depends on extras
        raise ImportError("stemming needs nltk: pip install 'multiquery[stem]'") from exc
    return PorterStemmer()


def tokenize(text: str, stem: bool = False) -> list[str]:
    """Lowercased whitespace words, surrounding punctuation removed."""
    tokens = [t for t in (_strip_punct(w) for w in text.lower().split()) if t]
    if stem:
        s = _stemmer()
        tokens = [s.stem(t) for t in tokens]
    return tokens


# --------------------------------------------------------------------------
# ROUGE


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, overlap: int, cand_total: int, ref_total: int) -> "PRF":
        p = overlap / cand_total if cand_total else 0.0
        r = overlap / ref_total if ref_total else 0.0
        return cls(p, r, f1(p, r))

    def to_record(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


def f1(p, r):
    """Harmonic mean; 0 when either side is 0. Works elementwise on arrays."""
    if isinstance(p, np.ndarray) or isinstance(r, np.ndarray):
        p, r = np.broadcast_arrays(np.asarray(p, float), np.asarray(r, float))
        out = np.zeros(p.shape)
        ok = (p > 0) & (r > 0)
        out[ok] = 2 * p[ok] * r[ok] / (p[ok] + r[ok])
        return out
    return 2 * p * r / (p + r) if p > 0 and r > 0 else 0.0


@dataclass(frozen=True)
class RougeScore:
    r1: PRF
    r2: PRF
    rl: PRF

    def to_record(self) -> dict:
        return {"rouge1": self.r1.to_record(), "rouge2": self.r2.to_record(), "rougeL": self.rl.to_record()}


@dataclass
class RougeCounts:
    """Per-pair integer counts; every array has one entry per pair."""

    overlap1: np.ndarray
    cand1: np.ndarray
    ref1: np.ndarray
    overlap2: np.ndarray
    cand2: np.ndarray
    ref2: np.ndarray
    lcs: np.ndarray

    def scores(self) -> dict[str, np.ndarray]:
        out = {}
        for name, ov, c, r in (
            ("rouge1", self.overlap1, self.cand1, self.ref1),
            ("rouge2", self.overlap2, self.cand2, self.ref2),
            ("rougeL", self.lcs, self.cand1, self.ref1),
        ):
            p = np.divide(ov, c, out=np.zeros(len(ov)), where=c > 0)
            rr = np.divide(ov, r, out=np.zeros(len(ov)), where=r > 0)
            out[name] = np.stack([p, rr, f1(p, rr)], axis=1)
        return out

    def score(self, i: int) -> RougeScore:
        return RougeScore(
            PRF.from_counts(int(self.overlap1[i]), int(self.cand1[i]), int(self.ref1[i])),
            PRF.from_counts(int(self.overlap2[i]), int(self.cand2[i]), int(self.ref2[i])),
            PRF.from_counts(int(self.lcs[i]), int(self.cand1[i]), int(self.ref1[i])),
        )


def encode(cands: Sequence[Sequence], refs: Sequence[Sequence]):
    """Map tokens to ids and pad: candidates with -1, references with -2."""
    vocab: dict = {}
    width_c = max((len(c) for c in cands), default=0)
    width_r = max((len(r) for r in refs), default=0)
    C = np.full((len(cands), width_c), -1, dtype=np.int64)
    R = np.full((len(refs), width_r), -2, dtype=np.int64)
    for M, seqs in ((C, cands), (R, refs)):
        for row, seq in enumerate(seqs):
            if seq:
                M[row, : len(seq)] = [vocab.setdefault(t, len(vocab)) for t in seq]
    lc = np.array([len(c) for c in cands], dtype=np.int64)
    lr = np.array([len(r) for r in refs], dtype=np.int64)
    return C, lc, R, lr


_NO_MATCH = np.iinfo(np.int16).max


def _occurrence_numbers(X: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """1-based occurrence count of ``X[k, i]`` within ``X[k, :i+1]``.

    Invalid (padding) positions get a value no popcount can reach.
    """
    L = X.shape[1]
    same = X[:, :, None] == X[:, None, :]
    occ = (same & np.tril(np.ones((L, L), dtype=bool))[None]).sum(2, dtype=np.int16)
    occ[~valid] = _NO_MATCH
    return occ


def _candidate_features(C: np.ndarray, lc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-candidate unigram and bigram occurrence numbers."""
    pos = np.arange(C.shape[1])[None, :]
    occ1 = _occurrence_numbers(C, pos < lc[:, None])
    if C.shape[1] < 2:
        return occ1, np.zeros((C.shape[0], 0), dtype=np.int16)
    base = int(max(C.max(initial=0), 0)) + 3
    B = (C[:, :-1] + 2) * base + (C[:, 1:] + 2)
    occ2 = _occurrence_numbers(B, pos[:, :-1] < (lc - 1)[:, None])
    return occ1, occ2


def _masks_by_pair(C: np.ndarray, R: np.ndarray) -> np.ndarray:
    """``M[k, i]``: bits ``j`` with ``R[k, j] == C[k, i]`` (references <= 63 tokens)."""
    n, Lc = C.shape
    eq = C[:, :, None] == R[:, None, :]
    packed = np.packbits(eq, axis=2, bitorder="little")
    if packed.shape[2] < 8:
        packed = np.concatenate([packed, np.zeros((n, Lc, 8 - packed.shape[2]), dtype=np.uint8)], axis=2)
    return np.ascontiguousarray(packed[:, :, :8]).view("<u8")[:, :, 0]


def _reference_table(R: np.ndarray, lr: np.ndarray, vocab_size: int) -> np.ndarray:
    """``T[r, t]``: bitmask of positions of token ``t`` in reference ``r``.

    Column ``vocab_size`` stays zero and serves candidate padding.
    """
    table = np.zeros((R.shape[0], vocab_size + 1), dtype=np.uint64)
    rows, cols = np.nonzero(np.arange(R.shape[1])[None, :] < lr[:, None])
    np.bitwise_or.at(table, (rows, R[rows, cols]), np.uint64(1) << cols.astype(np.uint64))
    return table


def _kernel(M: np.ndarray, occ1: np.ndarray, occ2: np.ndarray, lr: np.ndarray):
    """Overlap-1, overlap-2 and LCS from reference masks (see module docstring)."""
    n, Lc = M.shape
    if Lc == 0:
        z = np.zeros(n, dtype=np.int64)
        return z, z.copy(), z.copy()
    ov1 = np.count_nonzero(occ1 <= np.bitwise_count(M), axis=1)
    if Lc >= 2:
        M2 = M[:, :-1] & (M[:, 1:] >> np.uint64(1))
        ov2 = np.count_nonzero(occ2 <= np.bitwise_count(M2), axis=1)
    else:
        ov2 = np.zeros(n, dtype=np.int64)
    V = np.full(n, np.uint64(0xFFFFFFFFFFFFFFFF))
    U = np.empty_like(V)
    for i in range(Lc):
        np.bitwise_and(V, M[:, i], out=U)
        V = (V + U) | (V - U)
    low = (np.uint64(1) << lr.astype(np.uint64)) - np.uint64(1)
    lcs = lr - np.bitwise_count(V & low)
    return ov1, ov2, lcs.astype(np.int64)


def _counts_bigint(c: Sequence, r: Sequence) -> tuple[int, int, int]:
    masks: dict = {}
    for j, t in enumerate(r):
        masks[t] = masks.get(t, 0) | (1 << j)
    row = [masks.get(t, 0) for t in c]

    seen: dict = {}
    ov1 = 0
    for t, m in zip(c, row):
        seen[t] = seen.get(t, 0) + 1
        ov1 += seen[t] <= m.bit_count()
    seen = {}
    ov2 = 0
    for i in range(len(c) - 1):
        key = (c[i], c[i + 1])
        seen[key] = seen.get(key, 0) + 1
        ov2 += seen[key] <= (row[i] & (row[i + 1] >> 1)).bit_count()

    full = (1 << len(r)) - 1
    V = full
    for m in row:
        U = V & m
        V = ((V + U) | (V - U)) & full
    return ov1, ov2, len(r) - V.bit_count()


def _assemble(ov1, ov2, lcs, lc, lr) -> RougeCounts:
    return RougeCounts(ov1, lc.copy(), lr.copy(), ov2, np.maximum(lc - 1, 0), np.maximum(lr - 1, 0), lcs)


def rouge_counts(C: np.ndarray, lc: np.ndarray, R: np.ndarray, lr: np.ndarray) -> RougeCounts:
    """Counts for pairs ``(C[k], R[k])`` of padded id rows (see :func:`encode`)."""
    n = len(lc)
    if C.shape[0] != n or R.shape[0] != n or len(lr) != n:
        raise ValueError("candidate and reference batches differ in size")
    ov1 = np.zeros(n, dtype=np.int64)
    ov2 = np.zeros(n, dtype=np.int64)
    lcs = np.zeros(n, dtype=np.int64)

    small = np.flatnonzero(lr <= _WORD_BITS)
    if len(small):
        Lc = int(lc[small].max(initial=0))
        Lr = int(lr[small].max(initial=0))
        step = max(1, _CHUNK_CELLS // max(1, Lc * max(Lc, Lr)))
        for s in range(0, len(small), step):
            idx = small[s : s + step]
            Cb = C[idx, :Lc]
            occ1, occ2 = _candidate_features(Cb, lc[idx])
            M = _masks_by_pair(Cb, R[idx, :Lr])
            ov1[idx], ov2[idx], lcs[idx] = _kernel(M, occ1, occ2, lr[idx])
    for k in np.flatnonzero(lr > _WORD_BITS):
        ov1[k], ov2[k], lcs[k] = _counts_bigint(C[k, : lc[k]].tolist(), R[k, : lr[k]].tolist())
    return _assemble(ov1, ov2, lcs, lc, lr)


def rouge_cross(C: np.ndarray, lc: np.ndarray, R: np.ndarray, lr: np.ndarray, block_pairs: int = 1 << 20):
    """Counts for every (candidate, reference) combination, candidate-major.

    Yields ``(candidate_start, candidate_stop, RougeCounts)`` blocks whose
    entries run over references fastest, to keep memory bounded. Candidate
    features are computed once per candidate and reference masks once per
    reference. References over 63 tokens are not supported here.
    """
    if len(lr) and lr.max() > _WORD_BITS:
        raise ValueError("rouge_cross needs references of at most 63 tokens")
    vocab = int(max(C.max(initial=-1), R.max(initial=-1))) + 1
    table = _reference_table(R, lr, vocab)
    occ1, occ2 = _candidate_features(C, lc)
    Cpad = np.where(C >= 0, C, vocab)
    nr = len(lr)
    rows = max(1, block_pairs // max(1, nr))
    for a in range(0, len(lc), rows):
        b = min(a + rows, len(lc))
        # (refs, candidates, positions) -> pairs ordered candidate-major
        M = table[:, Cpad[a:b]].transpose(1, 0, 2).reshape((b - a) * nr, C.shape[1])
        o1 = np.repeat(occ1[a:b], nr, axis=0)
        o2 = np.repeat(occ2[a:b], nr, axis=0)
        lr_b = np.tile(lr, b - a)
        lc_b = np.repeat(lc[a:b], nr)
        yield a, b, _assemble(*_kernel(M, o1, o2, lr_b), lc_b, lr_b)


def rouge_batch(candidates: Sequence[str], references: Sequence[str], stem: bool = False) -> RougeCounts:
    if len(candidates) != len(references):
        raise LengthMismatch(f"{len(candidates)} candidates vs {len(references)} references")
    C, lc, R, lr = encode([tokenize(c, stem) for c in candidates], [tokenize(r, stem) for r in references])
    return rouge_counts(C, lc, R, lr)


def rouge(candidate: str, reference: str, stem: bool = False) -> RougeScore:
    """ROUGE-1/2/L of one candidate against one reference.

    Scores can differ slightly from other ROUGE packages, which tokenize and
    stem differently.
    """
    return rouge_batch([candidate], [reference], stem).score(0)


# --------------------------------------------------------------------------
# accuracy and lengths


@dataclass(frozen=True)
class FormatAccuracy:
    strict: float
    lenient: float
    n: int

    def to_record(self) -> dict:
        return {"strict": self.strict, "lenient": self.lenient, "n": self.n}


def _grade_of(item) -> Grade:
    if isinstance(item, ParseReport):
        return item.grade
    return Grade(item)


def format_accuracy(reports: Iterable) -> FormatAccuracy:
    grades = [_grade_of(r) for r in reports]
    if not grades:
        raise EmptyInput("no reports")
    strict = sum(g is Grade.STRICT for g in grades)
    lenient = sum(g in LENIENT_GRADES for g in grades)
    return FormatAccuracy(strict / len(grades), lenient / len(grades), len(grades))


@dataclass(frozen=True)
class LengthStats:
    mean: float | None
    count: int
    empty_count: int
    median: float | None = None
    stdev: float | None = None
    minimum: int | None = None
    maximum: int | None = None

    def to_record(self) -> dict:
        return {
            "mean": self.mean,
            "count": self.count,
            "empty_count": self.empty_count,
            "median": self.median,
            "stdev": self.stdev,
            "min": self.minimum,
            "max": self.maximum,
        }


def length_stats(items: Iterable) -> LengthStats:
    """Word-length statistics; empty summaries are only counted."""
    texts = [i.summary if isinstance(i, QuerySummaryPair) else i for i in items]
    lengths = [word_count(t) for t in texts if t and t.strip()]
    empty = len(texts) - len(lengths)
    if not lengths:
        return LengthStats(None, 0, empty)
    return LengthStats(
        mean=statistics.fmean(lengths),
        count=len(lengths),
        empty_count=empty,
        median=float(statistics.median(lengths)),
        stdev=statistics.stdev(lengths) if len(lengths) > 1 else 0.0,
        minimum=min(lengths),
        maximum=max(lengths),
    )


# --------------------------------------------------------------------------
# significance


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float
    significant: bool
    mean_delta: float
    alpha: float = 0.05

    def to_record(self) -> dict:
        return {
            "t": self.t,
            "df": self.df,
            "p": self.p,
            "significant": self.significant,
            "mean_delta": self.mean_delta,
            "alpha": self.alpha,
        }


def paired_ttest(scores_a: Sequence[float], scores_b: Sequence[float], alpha: float = 0.05) -> TTestResult:
    """Two-sided paired t-test on ``a - b``.

    With zero-variance deltas the statistic is degenerate: a zero mean gives
    ``t = 0, p = 1``; a non-zero mean gives ``t = ±inf, p = 0``.
    """
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch(f"{a.size} vs {b.size} scores")
    n = a.size
    if n < 2:
        raise TooFewSamples("need at least two paired samples")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            t, p = 0.0, 1.0
        else:
            t, p = math.copysign(math.inf, mean), 0.0
    else:
        t = mean / (sd / math.sqrt(n))
        p = float(2 * stats.t.sf(abs(t), df))
    return TTestResult(t, df, p, p <= alpha, mean, alpha)


# --------------------------------------------------------------------------
# run summaries


METRICS = ("rouge1", "rouge2", "rougeL")


@dataclass(frozen=True)
class PairScore:
    job_id: str
    query_index: int
    rouge: RougeScore
    length: int
    empty: bool
    external: Mapping[str, float] = field(default_factory=dict)

    @property
    def key(self) -> tuple[str, int]:
        return (self.job_id, self.query_index)

    def metric(self, name: str) -> float:
        if name in self.external:
            return self.external[name]
        return {"rouge1": self.rouge.r1, "rouge2": self.rouge.r2, "rougeL": self.rouge.rl}[name].f1

    def to_record(self) -> dict:
        rec = {
            "job_id": self.job_id,
            "query_index": self.query_index,
            **self.rouge.to_record(),
            "length": self.length,
            "empty": self.empty,
        }
        if self.external:
            rec["external"] = dict(self.external)
        return rec


@dataclass
class RunSummary:
    pair_scores: list[PairScore]
    macro: dict[str, dict[str, float]]
    micro: dict[str, dict[str, float]] | None
    lengths: LengthStats
    accuracy: FormatAccuracy | None
    empty_pairs: int
    external_metrics: tuple[str, ...] = ()
    label: str = ""

    @property
    def keys(self) -> list[tuple[str, int]]:
        return [s.key for s in self.pair_scores]

    def to_record(self) -> dict:
        return {
            "label": self.label,
            "pairs": len(self.pair_scores),
            "empty_pairs": self.empty_pairs,
            "macro": self.macro,
            "micro": self.micro,
            "lengths": self.lengths.to_record(),
            "format_accuracy": self.accuracy.to_record() if self.accuracy else None,
            "external_metrics": list(self.external_metrics),
            "per_pair": [s.to_record() for s in self.pair_scores],
        }


def _references_by_job(jobs) -> dict[str, tuple[str, ...]]:
    refs = {}
    for job in jobs:
        if isinstance(job, MultiQueryJob):
            if job.references is None:
                raise ValueError(f"job {job.id} has no references")
            refs[job.id] = job.references
        else:
            refs[job[0]] = tuple(job[1])
    return refs


def summarize_run(
    results,
    jobs,
    *,
    stem: bool = False,
    micro: bool = False,
    external: Mapping[str, Mapping[tuple[str, int], float]] | None = None,
    label: str = "",
) -> RunSummary:
    """Score every pair of ``results`` against the references in ``jobs``.

    ``results`` are JobResult objects or their records. Unparsed pairs keep
    their empty summary and score 0 in the macro averages. ``external`` holds
    per-pair scores computed elsewhere, keyed by ``(job_id, query_index)``.
    """
    from .gateway import JobResult

    refs = _references_by_job(jobs)
    results = [r if isinstance(r, JobResult) else JobResult.from_record(r) for r in results]
    results.sort(key=lambda r: r.job_id)

    keys, cands, golds, reports, pairs = [], [], [], [], []
    for res in results:
        if res.job_id not in refs:
            raise JobSetMismatch(f"no references for job {res.job_id}")
        job_refs = refs[res.job_id]
        reports.extend(res.chunk_reports or [res.report])
        for p in res.pairs:
            keys.append((res.job_id, p.query_index))
            cands.append(p.summary)
            golds.append(job_refs[p.query_index - 1])
            pairs.append(p)

    counts = rouge_batch(cands, golds, stem)
    external = external or {}
    for name, table in external.items():
        missing = [k for k in keys if k not in table]
        if missing:
            raise ValueError(f"external metric {name!r} lacks {len(missing)} pairs, e.g. {missing[0]}")

    scores = []
    for i, (key, p) in enumerate(zip(keys, pairs)):
        ext = {name: float(table[key]) for name, table in external.items()}
        scores.append(PairScore(key[0], key[1], counts.score(i), word_count(p.summary), not p.summary.strip(), ext))

    macro: dict[str, dict[str, float]] = {}
    arrays = counts.scores()
    for name in METRICS:
        m = arrays[name]
        macro[name] = dict(zip(("precision", "recall", "f1"), (float(x) for x in m.mean(axis=0)))) if len(m) else {
            "precision": 0.0, "recall": 0.0, "f1": 0.0}
    for name, table in external.items():
        vals = [s.external[name] for s in scores]
        macro[name] = {"mean": statistics.fmean(vals) if vals else 0.0}

    micro_scores = None
    if micro:
        micro_scores = {}
        for name, ov, c, r in (
            ("rouge1", counts.overlap1, counts.cand1, counts.ref1),
            ("rouge2", counts.overlap2, counts.cand2, counts.ref2),
            ("rougeL", counts.lcs, counts.cand1, counts.ref1),
        ):
            micro_scores[name] = PRF.from_counts(int(ov.sum()), int(c.sum()), int(r.sum())).to_record()

    return RunSummary(
        pair_scores=scores,
        macro=macro,
        micro=micro_scores,
        lengths=length_stats(pairs),
        accuracy=format_accuracy(reports) if reports else None,
        empty_pairs=sum(s.empty for s in scores),
        external_metrics=tuple(external),
        label=label,
    )


@dataclass
class Comparison:
    rows: list[dict]
    length_multi: float | None
    length_single: float | None
    labels: tuple[str, str] = ("multi", "single")

    def to_record(self) -> dict:
        return {
            "labels": list(self.labels),
            "metrics": self.rows,
            "mean_length": {self.labels[0]: self.length_multi, self.labels[1]: self.length_single},
        }

    def to_table(self) -> str:
        a, b = self.labels
        header = ["metric", a, b, "delta", "t", "p", "sig"]
        lines = []
        for row in self.rows:
            lines.append([
                row["metric"],
                f"{row[a]:.4f}",
                f"{row[b]:.4f}",
                f"{row['delta']:+.4f}",
                f"{row['t']:.3f}",
                f"{row['p']:.4f}",
                "*" if row["significant"] else "",
            ])
        fmt = lambda v: "-" if v is None else f"{v:.1f}"  # noqa: E731
        lines.append(["length (words)", fmt(self.length_multi), fmt(self.length_single), "", "", "", ""])
        widths = [max(len(str(r[i])) for r in [header] + lines) for i in range(len(header))]
        out = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths)).rstrip()]
        out.append("  ".join("-" * w for w in widths))
        out.extend("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in lines)
        return "\n".join(out)


def compare_runs(multi: RunSummary, single: RunSummary, alpha: float = 0.05) -> Comparison:
    """Side-by-side macro F1 with a paired t-test per metric."""
    if sorted(multi.keys) != sorted(single.keys):
        raise JobSetMismatch("the two runs cover different (job, query) pairs")
    a_label, b_label = multi.label or "multi", single.label or "single"
    if a_label == b_label:
        b_label += "_2"
    by_key = {s.key: s for s in single.pair_scores}
    ordered_b = [by_key[s.key] for s in multi.pair_scores]
    rows = []
    for name in METRICS + tuple(m for m in multi.external_metrics if m in single.external_metrics):
        xa = [s.metric(name) for s in multi.pair_scores]
        xb = [s.metric(name) for s in ordered_b]
        mean_a = statistics.fmean(xa) if xa else 0.0
        mean_b = statistics.fmean(xb) if xb else 0.0
        test = paired_ttest(xa, xb, alpha) if len(xa) >= 2 else None
        rows.append({
            "metric": name + ("_f1" if name in METRICS else ""),
            a_label: mean_a,
            b_label: mean_b,
            "delta": mean_a - mean_b,
            "t": test.t if test else float("nan"),
            "p": test.p if test else float("nan"),
            "significant": bool(test and test.significant),
        })
    return Comparison(rows, multi.lengths.mean, single.lengths.mean, (a_label, b_label))
