"""``multiquery`` command line: convert, run, parse, eval, cost, serve.

Exit codes: 0 success, 1 an evaluation threshold failed, 2 invalid input,
3 a backend call failed (results are still written).
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from .backends import (
    BackendError,
    FailureModeProfile,
    MockBackend,
    OpenAICompatBackend,
    RecordingBackend,
    ReplayBackend,
    ReplayStore,
)
from .costs import CostLedger, PricingTable, UnknownModel, single_query_equivalent
from .dataset import DatasetError, convert, load_records, read_jobs, write_jobs
from .evaluation import compare_runs, summarize_run
from .gateway import CoalescePolicy, Gateway, JobResult, run_job, run_single_query_job
from .model import make_queries
from .parsing import parse
from .prompt import DecodingParams, PromptError, get_template
from .records import atomic_write_text, read_jsonl, write_jsonl

logger = logging.getLogger("multiquery")

EXIT_OK, EXIT_THRESHOLD, EXIT_INPUT, EXIT_BACKEND = 0, 1, 2, 3


class UsageError(Exception):
    """Bad arguments or input files; maps to exit code 2."""


# --------------------------------------------------------------------------
# run manifests


@dataclass
class RunManifest:
    """Everything that determines a batch run.

    ``backend`` is a mapping with ``kind`` one of ``mock``, ``replay`` or
    ``live``. Mock takes ``profile`` (e.g. ``"wellformed=0.8,hallucination=0.2"``)
    and optional ``single_query_profile``; replay takes ``store``; live takes
    ``base_url`` and ``model`` and reads the key from the environment.
    """

    dataset: str
    output_dir: str
    template: str = "json-default"
    params: dict = field(default_factory=dict)
    backend: dict = field(default_factory=lambda: {"kind": "mock", "profile": "wellformed"})
    policy: dict = field(default_factory=dict)
    mode: str = "multi"
    seed: int = 0
    concurrency: int = 4

    def __post_init__(self) -> None:
        if self.mode not in ("multi", "single"):
            raise UsageError(f"mode must be 'multi' or 'single', not {self.mode!r}")
        if self.backend.get("kind") not in ("mock", "replay", "live"):
            raise UsageError(f"unknown backend kind {self.backend.get('kind')!r}")
        if self.concurrency < 1:
            raise UsageError("concurrency must be >= 1")

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        base = Path(path).parent
        with open(path, encoding="utf-8") as fh:
            record = json.load(fh)
        try:
            manifest = cls(**record)
        except TypeError as exc:
            raise UsageError(f"{path}: {exc}") from None
        # Relative paths in a manifest are relative to the manifest file.
        manifest.dataset = str(base / manifest.dataset)
        manifest.output_dir = str(base / manifest.output_dir)
        if "store" in manifest.backend:
            manifest.backend = {**manifest.backend, "store": str(base / manifest.backend["store"])}
        return manifest

    def to_record(self) -> dict:
        return asdict(self)


def build_backend(spec: dict, seed: int = 0):
    kind = spec.get("kind", "mock")
    model = spec.get("model")
    if kind == "mock":
        profile = FailureModeProfile.parse(spec.get("profile", "wellformed"), seed)
        single = spec.get("single_query_profile")
        return MockBackend(
            profile,
            seed=seed,
            single_query_profile=FailureModeProfile.parse(single, seed) if single else None,
            model_name=model or "mock",
        )
    if kind == "replay":
        if "store" not in spec:
            raise UsageError("replay backend needs 'store'")
        return ReplayBackend(spec["store"], model_name=model or "mock")
    if kind == "live":
        return OpenAICompatBackend(spec.get("base_url"), model, max_concurrency=int(spec.get("max_concurrency", 4)))
    raise UsageError(f"unknown backend kind {kind!r}")


@dataclass
class RunOutcome:
    results: list[JobResult]
    results_path: Path
    backend_failures: int


async def _run_all(jobs, manifest: RunManifest, backend, template, params, policy) -> list[JobResult]:
    gate = asyncio.Semaphore(manifest.concurrency)

    async def one(job):
        async with gate:
            if manifest.mode == "single":
                return await run_single_query_job(job, template, params, backend)
            return await run_job(job, template, params, policy, backend)

    return list(await asyncio.gather(*(one(j) for j in jobs)))


def execute_run(manifest: RunManifest) -> RunOutcome:
    """Run every job of the manifest and write results, manifest and recordings."""
    try:
        jobs = read_jobs(manifest.dataset)
        template = get_template(manifest.template)
        params = DecodingParams.from_record(manifest.params)
        policy = CoalescePolicy.from_record(manifest.policy)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from None
    # The template decides the requested output format.
    jobs = [replace(j, output_format=template.output_format) for j in jobs]

    out = Path(manifest.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    backend = build_backend(manifest.backend, manifest.seed)
    if manifest.backend.get("kind") != "replay":
        backend = RecordingBackend(backend, ReplayStore(out / "recordings"))

    results = asyncio.run(_run_all(jobs, manifest, backend, template, params, policy))
    results.sort(key=lambda r: r.job_id)
    path = out / "results.jsonl"
    write_jsonl(path, (r.to_record() for r in results))
    atomic_write_text(out / "manifest.json", json.dumps(manifest.to_record(), indent=2, sort_keys=True) + "\n")
    failures = sum(len(r.errors) for r in results)
    return RunOutcome(results, path, failures)


def load_results(path: str | Path) -> list[JobResult]:
    try:
        return [JobResult.from_record(r) for r in read_jsonl(path)]
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------
# subcommands


def cmd_convert(args) -> int:
    try:
        records = load_records(args.input, args.input_format)
        split = convert(records, args.split, args.output_format)
    except (DatasetError, OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    write_jobs(args.output, split.jobs)
    summary = {
        "split": split.name,
        "records": len(records),
        "jobs": len(split.jobs),
        "queries": split.query_count,
        "query_histogram": split.query_histogram(),
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _manifest_from_args(args) -> RunManifest:
    if args.manifest:
        manifest = RunManifest.load(args.manifest)
    else:
        if not (args.jobs and args.out):
            raise UsageError("give a manifest or both --jobs and --out")
        manifest = RunManifest(dataset=args.jobs, output_dir=args.out)
    backend = dict(manifest.backend)
    for key, value in (("kind", args.backend), ("profile", args.profile), ("store", args.store),
                       ("model", args.model), ("base_url", args.base_url),
                       ("single_query_profile", args.single_query_profile)):
        if value is not None:
            backend[key] = value
    manifest.backend = backend
    for name in ("mode", "seed", "template", "concurrency"):
        value = getattr(args, name)
        if value is not None:
            setattr(manifest, name, value)
    if args.out:
        manifest.output_dir = args.out
    if args.fallback:
        manifest.policy = {**manifest.policy, "fallback": args.fallback}
    if args.max_queries_per_prompt:
        manifest.policy = {**manifest.policy, "max_queries_per_prompt": args.max_queries_per_prompt}
    manifest.__post_init__()
    return manifest


def cmd_run(args) -> int:
    outcome = execute_run(_manifest_from_args(args))
    grades = {}
    for r in outcome.results:
        for rep in r.chunk_reports:
            grades[rep.grade.value] = grades.get(rep.grade.value, 0) + 1
    print(json.dumps({
        "results": str(outcome.results_path),
        "jobs": len(outcome.results),
        "backend_calls": sum(r.backend_calls for r in outcome.results),
        "grades": grades,
        "errors": outcome.backend_failures,
    }, indent=2))
    return EXIT_BACKEND if outcome.backend_failures else EXIT_OK


def cmd_parse(args) -> int:
    try:
        raw = Path(args.raw).read_bytes()
        queries = [q for q in Path(args.queries).read_text(encoding="utf-8").splitlines() if q.strip()]
        make_queries(queries)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    report = parse(raw, queries, args.format)
    print(f"grade {report.grade.value}, {report.matched_count} pairs")
    if report.outcome.truncation_detected:
        print("truncation detected")
    if report.outcome.keys_normalized:
        print("keys normalized")
    if args.verbose:
        print(json.dumps(report.to_record(), indent=2, ensure_ascii=False))
    return EXIT_OK


def _external(specs) -> dict:
    tables = {}
    for spec in specs or ():
        name, _, path = spec.partition("=")
        if not path:
            raise UsageError(f"--external expects name=path, got {spec!r}")
        table = {}
        for rec in read_jsonl(path):
            table[(rec["job_id"], int(rec["query_index"]))] = float(rec["score"])
        tables[name] = table
    return tables


def cmd_eval(args) -> int:
    try:
        jobs = read_jobs(args.jobs)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from None
    external = _external(args.external)
    try:
        run = summarize_run(load_results(args.results), jobs, stem=args.stem, micro=args.micro,
                            external=external, label=args.label)
        other = None
        if args.compare:
            other = summarize_run(load_results(args.compare), jobs, stem=args.stem, micro=args.micro,
                                  external=external, label=args.compare_label)
            comparison = compare_runs(run, other, args.alpha)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    report = {"run": run.to_record()}
    if other is not None:
        report["other"] = other.to_record()
        report["comparison"] = comparison.to_record()
    if not args.per_pair:
        for key in ("run", "other"):
            if key in report:
                report[key].pop("per_pair")
    if args.out:
        atomic_write_text(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")

    acc = run.accuracy
    print(f"pairs {len(run.pair_scores)}  empty {run.empty_pairs}  "
          f"strict {acc.strict:.4f}  lenient {acc.lenient:.4f}  n {acc.n}" if acc else "no responses")
    for name, vals in run.macro.items():
        print(f"{name:8s} " + "  ".join(f"{k} {v:.4f}" for k, v in vals.items()))
    mean = run.lengths.mean
    print(f"mean summary length {mean:.1f} words" if mean is not None else "mean summary length n/a")
    if other is not None:
        print()
        print(comparison.to_table())

    failed = []
    checks = (("strict", args.min_strict, acc.strict if acc else 0.0),
              ("lenient", args.min_lenient, acc.lenient if acc else 0.0),
              ("rouge1_f1", args.min_rouge1, run.macro["rouge1"]["f1"]),
              ("rouge2_f1", args.min_rouge2, run.macro["rouge2"]["f1"]),
              ("rougeL_f1", args.min_rougeL, run.macro["rougeL"]["f1"]))
    for name, threshold, value in checks:
        if threshold is not None and value < threshold:
            failed.append(f"{name} {value:.4f} < {threshold}")
    for line in failed:
        print("THRESHOLD FAILED:", line, file=sys.stderr)
    return EXIT_THRESHOLD if failed else EXIT_OK


def cost_report(results, jobs, table: PricingTable, model: str | None = None, template=None) -> CostLedger:
    by_id = {j.id: j for j in jobs}
    ledger = CostLedger(table)
    template = get_template(template) if isinstance(template, str) else template
    for res in results:
        name = model or res.model
        for u in res.call_usages:
            ledger.add_call(name, u.input_tokens, u.output_tokens, label=res.job_id)
        job = by_id.get(res.job_id)
        if job is None:
            raise UsageError(f"results mention unknown job {res.job_id}")
        ledger.add_baseline(single_query_equivalent(
            job, template, None, table, name, summaries=[p.summary for p in res.pairs]))
    return ledger


def cmd_cost(args) -> int:
    try:
        table = PricingTable.load(args.pricing) if args.pricing else PricingTable.default()
        jobs = read_jobs(args.jobs)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from None
    try:
        ledger = cost_report(load_results(args.results), jobs, table, args.model, args.template)
    except UnknownModel as exc:
        raise UsageError(f"model {exc.args[0]!r} is not in the pricing table") from None
    if args.ledger:
        ledger.export(args.ledger)
    print(json.dumps(ledger.summary(), indent=2))
    return EXIT_OK


def cmd_serve(args) -> int:
    from .server import serve

    spec = {"kind": args.backend or "mock", "profile": args.profile or "wellformed"}
    if args.store:
        spec["store"] = args.store
    if args.model:
        spec["model"] = args.model
    if args.base_url:
        spec["base_url"] = args.base_url
    backend = build_backend(spec, args.seed or 0)
    transcripts = {}
    if args.jobs:
        transcripts = {j.id: j.transcript.text for j in read_jobs(args.jobs)}
    policy = CoalescePolicy(window_ms=args.window_ms, max_queries_per_prompt=args.max_queries_per_prompt or 10,
                            fallback=args.fallback or "RetrySingle")
    try:
        pricing = PricingTable.load(args.pricing) if args.pricing else PricingTable.default()
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    gateway = Gateway(backend, policy=policy, template=get_template(args.template or "json-default"),
                      pricing=pricing, deadline_s=args.deadline, transcripts=transcripts)
    serve(gateway, args.host, args.port)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=("mock", "replay", "live"), help="backend kind")
    p.add_argument("--profile", help="mock failure-mode profile, e.g. 'wellformed=0.8,hallucination=0.2'")
    p.add_argument("--single-query-profile", help="mock profile for one-query prompts (retries)")
    p.add_argument("--store", help="replay store directory")
    p.add_argument("--model", help="model name (priced and sent to live backends)")
    p.add_argument("--base-url", help="OpenAI-compatible endpoint (or MULTIQUERY_BASE_URL)")
    p.add_argument("--seed", type=int)
    p.add_argument("--template", help="built-in template name or INI file")
    p.add_argument("--fallback", choices=("Empty", "RetrySingle"))
    p.add_argument("--max-queries-per-prompt", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multiquery", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose-log", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="group single-query records into multi-query jobs")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.add_argument("--input-format", default="jsonl", choices=("jsonl", "qmsum"))
    p.add_argument("--output-format", default="json", choices=("json", "yaml"))
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("run", help="run every job of a dataset against a backend")
    p.add_argument("manifest", nargs="?", help="JSON run manifest")
    p.add_argument("--jobs", help="job file (when no manifest is given)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--mode", choices=("multi", "single"))
    p.add_argument("--concurrency", type=int)
    _backend_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("parse", help="parse one stored response")
    p.add_argument("raw", help="file with the raw response text")
    p.add_argument("queries", help="file with one query per line")
    p.add_argument("--format", default="json", choices=("json", "yaml"))
    p.add_argument("--verbose", action="store_true", help="print the full report")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("eval", help="score a run against references")
    p.add_argument("results")
    p.add_argument("--jobs", required=True, help="job file with references")
    p.add_argument("--compare", help="second results file (e.g. the single-query arm)")
    p.add_argument("--label", default="multi")
    p.add_argument("--compare-label", default="single")
    p.add_argument("--stem", action="store_true", help="Porter stemming (needs nltk)")
    p.add_argument("--micro", action="store_true", help="also report micro averages")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--external", action="append", metavar="NAME=PATH",
                   help="per-pair scores computed elsewhere (jsonl with job_id, query_index, score)")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--per-pair", action="store_true", help="include per-pair scores in the report")
    for name in ("strict", "lenient", "rouge1", "rouge2", "rougeL"):
        p.add_argument(f"--min-{name}", type=float, dest=f"min_{name}")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost", help="token and currency accounting for a run")
    p.add_argument("results")
    p.add_argument("--jobs", required=True)
    p.add_argument("--pricing", help="pricing INI (default: shipped table)")
    p.add_argument("--model", help="price every call as this model")
    p.add_argument("--template", default="json-default")
    p.add_argument("--ledger", help="write per-call ledger lines here")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("serve", help="start the HTTP gateway")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--window-ms", type=float, default=250.0)
    p.add_argument("--deadline", type=float, default=60.0, help="per-request deadline in seconds")
    p.add_argument("--jobs", help="job file whose transcripts can be referenced by id")
    p.add_argument("--pricing")
    _backend_flags(p)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose_log else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (PromptError, BackendError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
