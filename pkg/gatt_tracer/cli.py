import argparse
import enum
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

from gatt_tracer.apps import iter_app_paths, load_app, load_permissions
from gatt_tracer.bench import (
    LevelPolicy,
    benchmark_report,
    render_metrics,
    run_benchmark,
    score,
)
from gatt_tracer.common import (
    CORPUS_DIR,
    JOBS,
    LOG_LEVEL,
    MAX_DEPTH,
    MAX_VISITED,
    TIMEOUT,
    Direction,
    TracerException,
    parse_duration,
)
from gatt_tracer.lints import CryptoLinter
from gatt_tracer.report import (
    AggregationPolicy,
    aggregate,
    classify_ble_call_origin,
    join_records,
    load_metadata,
    render_table,
)
from gatt_tracer.ruleset import default_ruleset, is_eligible, load_ruleset_file
from gatt_tracer.taint import TraceBudget, analyze_app


log = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


class Mode(enum.Enum):
    ANALYZE_APP = "AnalyzeApp"
    ANALYZE_CORPUS = "AnalyzeCorpus"
    BENCHMARK = "Benchmark"
    AGGREGATE = "Aggregate"
    LINT = "Lint"


@dataclass(frozen=True)
class RunConfig:
    mode: Mode
    directions: tuple = (Direction.READS, Direction.WRITES)
    budget: TraceBudget = TraceBudget()
    ruleset_path: Optional[str] = None
    output_path: Optional[str] = None
    parallelism: int = 1
    permissions_path: Optional[str] = None

    def __post_init__(self):
        if self.parallelism < 1:
            raise TracerException("--jobs must be at least 1")

    def rules(self):
        if self.ruleset_path:
            return load_ruleset_file(self.ruleset_path)
        return default_ruleset()


def analyze_path(path, config):
    """JSON-lines records (one per direction) for one app."""
    rules = config.rules()
    permissions = None
    if config.permissions_path:
        permissions = load_permissions(config.permissions_path)
    app = load_app(path, permissions)
    eligibility = is_eligible(app.program, rules, app.permissions)
    origin = classify_ble_call_origin(app.program, rules, app.package_name)
    records = []
    for direction in config.directions:
        if eligibility.eligible:
            verdict = analyze_app(app.program, rules, direction, config.budget)
        else:
            verdict = None
        record = {
            "app_id": app.app_id,
            "package_name": app.package_name,
            "eligible": eligibility.eligible,
            "eligibility_reason": eligibility.reason,
            "origin": origin.value,
            "direction": direction.value,
        }
        if verdict is None:
            record.update(
                {"crypto_found": False, "confidence": "None", "witness": [], "misuse": []}
            )
            records.append(record)
            continue
        record.update(verdict.to_record())
        misuse = []
        if verdict.crypto_found:
            linter = CryptoLinter(app.program, rules, config.budget)
            misuse = [f.to_record() for f in linter.lint(verdict.witness_methods)]
            record["diagnostics"]["unresolved_transformations"] = (
                linter.unresolved_transformations
            )
            record["diagnostics"]["lint_budget_exhausted"] = linter.budget_exhausted
        record["misuse"] = misuse
        log.info(
            "%s %s: %s (%d seeds)",
            app.app_id,
            direction.value,
            verdict.confidence.value,
            verdict.seeds_examined,
        )
        records.append(record)
    return records


def _safe_analyze(path, config):
    try:
        return path, analyze_path(path, config), None
    except TracerException as e:
        return path, [], str(e)


def analyze_paths(paths, config):
    """Records for many apps, order-normalized; failures are logged, not fatal."""
    if config.parallelism > 1:
        with ProcessPoolExecutor(max_workers=config.parallelism) as pool:
            outcomes = list(pool.map(_safe_analyze, paths, [config] * len(paths)))
    else:
        outcomes = [_safe_analyze(path, config) for path in paths]
    records = []
    failures = []
    for path, app_records, error in outcomes:
        if error is not None:
            log.error("%s: %s", path, error)
            failures.append(path)
        records.extend(app_records)
    records.sort(key=lambda r: (r["app_id"], r["direction"]))
    return records, failures


def dump_jsonl(records):
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def _write(text, path):
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def read_jsonl(path):
    rows = []
    with open(path, encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise TracerException("%s:%d: %s" % (path, number, e))
    return rows


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, "%s: error: %s\n" % (self.prog, message))


def _directions(value):
    if value == "both":
        return (Direction.READS, Direction.WRITES)
    return (Direction(value),)


def build_parser():
    parser = ArgumentParser(
        prog="tracer.py",
        description="Check whether BLE GATT data passes through crypto calls.",
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def budget_flags(sub):
        sub.add_argument("--timeout", default=None, help="per app and direction, e.g. 5m")
        sub.add_argument("--max-depth", type=int, default=MAX_DEPTH, help="call-chain depth")
        sub.add_argument(
            "--max-visited", type=int, default=MAX_VISITED, help="visited keys per trace"
        )
        sub.add_argument("--ruleset", default=None, help="YAML ruleset overrides")
        sub.add_argument("--out", default=None, help="output file (default stdout)")
        sub.add_argument("--jobs", type=int, default=JOBS)

    analyze = commands.add_parser("analyze", help="analyze one app or a corpus of apps")
    target = analyze.add_mutually_exclusive_group(required=True)
    target.add_argument("--app", help="smali directory or zip of one app")
    target.add_argument("--corpus", help="directory of app directories or zips")
    analyze.add_argument(
        "--direction", choices=["reads", "writes", "both"], default="both"
    )
    analyze.add_argument("--permissions", help="plaintext permission list")
    budget_flags(analyze)

    bench = commands.add_parser("bench", help="run the labeled benchmark corpus")
    bench.add_argument("--corpus", default=CORPUS_DIR)
    bench.add_argument(
        "--policy", choices=[p.value for p in LevelPolicy], default="cascade"
    )
    budget_flags(bench)

    agg = commands.add_parser("aggregate", help="corpus statistics from analyze output")
    agg.add_argument("--results", required=True, help="JSON-lines from analyze")
    agg.add_argument("--meta", required=True, help="package,category,downloads,year CSV")
    agg.add_argument(
        "--policy", choices=[p.value for p in AggregationPolicy], default="headline"
    )
    agg.add_argument("--out", default=None)

    lint = commands.add_parser("lint", help="crypto misuse findings for one app")
    lint.add_argument("--app", required=True)
    lint.add_argument("--permissions", help="plaintext permission list")
    budget_flags(lint)
    return parser


def _budget(args):
    timeout = parse_duration(args.timeout) if args.timeout else TIMEOUT
    return TraceBudget(args.max_depth, args.max_visited, timeout)


def run_analyze(args):
    config = RunConfig(
        Mode.ANALYZE_APP if args.app else Mode.ANALYZE_CORPUS,
        _directions(args.direction),
        _budget(args),
        args.ruleset,
        args.out,
        args.jobs,
        args.permissions,
    )
    config.rules()
    paths = [args.app] if args.app else list(iter_app_paths(args.corpus))
    records, failures = analyze_paths(paths, config)
    _write(dump_jsonl(records), config.output_path)
    return 1 if failures else 0


def run_bench(args):
    config = RunConfig(
        Mode.BENCHMARK,
        budget=_budget(args),
        ruleset_path=args.ruleset,
        output_path=args.out,
        parallelism=args.jobs,
    )
    policy = LevelPolicy(args.policy)
    results = run_benchmark(args.corpus, config.budget, config.rules(), config.parallelism)
    for direction in Direction:
        subset = [r for r in results if r.case.direction == direction]
        if subset:
            title = "%s (%s)" % (direction.value, policy.value)
            print(render_metrics(score(subset, policy), title))
            print("")
    report = benchmark_report(results, policy)
    for case_id in report["mismatches"]:
        log.warning("Case %s does not match its label", case_id)
    print(
        "%d/%d cases match their labels"
        % (len(results) - len(report["mismatches"]), len(results))
    )
    if config.output_path:
        _write(json.dumps(report, sort_keys=True, indent=2) + "\n", config.output_path)
    return 1 if report["mismatches"] else 0


def run_aggregate(args):
    rows = read_jsonl(args.results)
    metadata, errors = load_metadata(args.meta)
    row_errors = []
    records = join_records(rows, metadata, row_errors)
    for error in row_errors:
        log.warning("%s:%d: %s", args.results, error.row, error.reason)
    report = aggregate(records, AggregationPolicy(args.policy))
    record = report.to_record()
    record["metadata_errors"] = [{"row": e.row, "reason": e.reason} for e in errors]
    record["result_errors"] = [{"row": e.row, "reason": e.reason} for e in row_errors]
    print(render_table(report), file=sys.stderr if not args.out else sys.stdout)
    _write(json.dumps(record, sort_keys=True, indent=2) + "\n", args.out)
    return 0


def run_lint(args):
    config = RunConfig(
        Mode.LINT,
        budget=_budget(args),
        ruleset_path=args.ruleset,
        output_path=args.out,
        permissions_path=args.permissions,
    )
    records = []
    seen = set()
    app_id = None
    for record in analyze_path(args.app, config):
        app_id = record["app_id"]
        for finding in record["misuse"]:
            key = (finding["method"], finding["offset"], finding["kind"])
            if key not in seen:
                seen.add(key)
                records.append(dict(finding, app_id=app_id))
    records.sort(key=lambda r: (r["method"], r["offset"], r["kind"]))
    _write(dump_jsonl(records), config.output_path)
    return 0


COMMANDS = {
    "analyze": run_analyze,
    "bench": run_bench,
    "aggregate": run_aggregate,
    "lint": run_lint,
}


def configure_logging(verbosity):
    level = logging.getLevelName(LOG_LEVEL.upper())
    if verbosity == 1:
        level = logging.INFO
    elif verbosity > 1:
        level = logging.DEBUG
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except (TracerException, OSError) as e:
        log.error("%s", e)
        return 1
    except Exception:
        log.exception("Internal error")
        return 2
