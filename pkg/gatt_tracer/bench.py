"""
Labeled benchmark corpus and detector scoring

Every case under corpus/ is a smali tree plus a case.yml label:

    case_id: intent_relay
    direction: writes
    category: IntentFlow
    expected_found: true
    expected_confidence: High
    expected_misuse: []        # optional

Scoring follows the level policy used to evaluate multi-pass detectors:
a case detected at one confidence level is not evaluated again at the
lower levels, and a detection at a lower level counts as a miss at the
higher ones.
"""
import enum
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import yaml

from gatt_tracer.common import (
    CORPUS_DIR,
    LEVELS,
    Confidence,
    Direction,
    TracerException,
)
from gatt_tracer.lints import lint_crypto
from gatt_tracer.ruleset import default_ruleset
from gatt_tracer.smali import parse_program
from gatt_tracer.taint import TraceBudget, analyze_app


log = logging.getLogger(__name__)

LABEL_FILE = "case.yml"


class BenchmarkException(TracerException):
    pass


class Category(enum.Enum):
    DIRECT_FLOW = "DirectFlow"
    FIELD_FLOW = "FieldFlow"
    INTENT_FLOW = "IntentFlow"
    THREAD_FLOW = "ThreadFlow"
    INTERFACE_FLOW = "InterfaceFlow"
    SIBLING_ARG = "SiblingArg"
    LENIENT_ONLY = "LenientOnly"
    CRYPTO_ELSEWHERE = "CryptoElsewhere"
    NO_CRYPTO = "NoCrypto"
    KILL_REDEFINITION = "KillRedefinition"
    RECURSIVE_CALLS = "RecursiveCalls"
    STATIC_SEED = "StaticSeed"


# categories whose labels must be matched exactly
EXACT_CATEGORIES = (
    Category.DIRECT_FLOW,
    Category.FIELD_FLOW,
    Category.KILL_REDEFINITION,
    Category.STATIC_SEED,
    Category.NO_CRYPTO,
    Category.CRYPTO_ELSEWHERE,
)


class LevelPolicy(enum.Enum):
    CASCADE = "cascade"
    CUMULATIVE = "cumulative"


@dataclass(frozen=True)
class CorpusCase:
    case_id: str
    direction: Direction
    category: Category
    expected_found: bool
    expected_confidence: Confidence
    expected_misuse: Optional[Tuple[str, ...]] = None
    path: str = field(default="", compare=False)

    def __post_init__(self):
        if self.expected_found == (self.expected_confidence == Confidence.NONE):
            raise BenchmarkException(
                "%s: expected_found and expected_confidence disagree" % self.case_id
            )


def load_case(path):
    label = os.path.join(path, LABEL_FILE)
    try:
        with open(label, encoding="utf-8") as f:
            document = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise BenchmarkException("%s: cannot read label (%s)" % (path, e))
    try:
        misuse = document.get("expected_misuse")
        return CorpusCase(
            case_id=document["case_id"],
            direction=Direction(document["direction"]),
            category=Category(document["category"]),
            expected_found=bool(document["expected_found"]),
            expected_confidence=Confidence(str(document["expected_confidence"])),
            expected_misuse=tuple(sorted(misuse)) if misuse is not None else None,
            path=path,
        )
    except (KeyError, ValueError, AttributeError) as e:
        raise BenchmarkException("%s: invalid label (%r)" % (label, e))


def load_corpus(corpus_root=CORPUS_DIR):
    cases = []
    for name in sorted(os.listdir(corpus_root)):
        path = os.path.join(corpus_root, name)
        if os.path.isdir(path) and os.path.exists(os.path.join(path, LABEL_FILE)):
            cases.append(load_case(path))
    if not cases:
        raise BenchmarkException("No labeled cases in %s" % corpus_root)
    seen = set()
    for case in cases:
        if case.case_id in seen:
            raise BenchmarkException("Duplicate case_id %s" % case.case_id)
        seen.add(case.case_id)
    return cases


@dataclass(frozen=True)
class CaseResult:
    case: CorpusCase
    verdict: object
    seconds: float = field(default=0.0, compare=False)
    findings: Optional[Tuple[str, ...]] = None

    @property
    def verdict_matches(self):
        return (
            self.verdict.crypto_found == self.case.expected_found
            and self.verdict.confidence == self.case.expected_confidence
        )

    @property
    def misuse_matches(self):
        if self.case.expected_misuse is None:
            return True
        return self.findings == self.case.expected_misuse

    @property
    def matches(self):
        return self.verdict_matches and self.misuse_matches

    def to_record(self):
        record = {
            "case_id": self.case.case_id,
            "category": self.case.category.value,
            "expected_found": self.case.expected_found,
            "expected_confidence": self.case.expected_confidence.value,
            "matches": self.matches,
        }
        record.update(self.verdict.to_record())
        if self.findings is not None:
            record["misuse"] = list(self.findings)
        return record


def run_case(case, budget=None, rules=None):
    rules = rules or default_ruleset()
    started = time.monotonic()
    program = parse_program(case.path)
    if program.parse_errors:
        error = program.parse_errors[0]
        raise BenchmarkException(
            "%s: %s:%s: %s" % (case.case_id, error.file, error.line, error.reason)
        )
    verdict = analyze_app(program, rules, case.direction, budget)
    findings = None
    if case.expected_misuse is not None:
        kinds = {
            finding.kind.value
            for finding in lint_crypto(program, verdict.witness_methods, rules, budget)
        }
        findings = tuple(sorted(kinds))
    seconds = time.monotonic() - started
    log.info("%s: %s in %.3fs", case.case_id, verdict.confidence.value, seconds)
    return CaseResult(case, verdict, seconds, findings)


def run_benchmark(corpus_root=CORPUS_DIR, budget=None, rules=None, jobs=1):
    """Evaluate every case in its declared direction, ordered by case_id."""
    cases = load_corpus(corpus_root)
    budget = budget or TraceBudget()
    rules = rules or default_ruleset()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(
                pool.map(run_case, cases, [budget] * len(cases), [rules] * len(cases))
            )
    else:
        results = [run_case(case, budget, rules) for case in cases]
    return sorted(results, key=lambda r: r.case.case_id)


def _ratio(numerator, denominator):
    if denominator == 0:
        return None
    return numerator / denominator


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise TracerException("Confusion counts must be non-negative")

    def add(self, expected, predicted):
        if expected and predicted:
            return ConfusionCounts(self.tp + 1, self.fp, self.tn, self.fn)
        if predicted:
            return ConfusionCounts(self.tp, self.fp + 1, self.tn, self.fn)
        if expected:
            return ConfusionCounts(self.tp, self.fp, self.tn, self.fn + 1)
        return ConfusionCounts(self.tp, self.fp, self.tn + 1, self.fn)

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def detected(self):
        return self.tp + self.fp

    @property
    def precision(self):
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self):
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f_measure(self):
        precision, recall = self.precision, self.recall
        if precision is None or recall is None:
            return None
        return _ratio(2 * precision * recall, precision + recall)

    @property
    def fpr(self):
        return _ratio(self.fp, self.fp + self.tn)

    def to_record(self):
        return {
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f_measure": self.f_measure,
            "fpr": self.fpr,
        }


@dataclass(frozen=True)
class MetricsReport:
    # overall: crypto found at any confidence level
    counts: ConfusionCounts
    per_confidence: Dict[Confidence, ConfusionCounts]
    policy: LevelPolicy = LevelPolicy.CASCADE

    @property
    def precision(self):
        return self.counts.precision

    @property
    def recall(self):
        return self.counts.recall

    @property
    def f_measure(self):
        return self.counts.f_measure

    @property
    def fpr(self):
        return self.counts.fpr

    def to_record(self):
        return {
            "policy": self.policy.value,
            "overall": self.counts.to_record(),
            "per_confidence": {
                level.value: self.per_confidence[level].to_record() for level in LEVELS
            },
        }


def _labelled(results):
    for result in results:
        if isinstance(result, CaseResult):
            yield result.case.expected_found, result.verdict.confidence
        else:
            case, verdict = result
            yield case.expected_found, verdict.confidence


def score(results, policy=LevelPolicy.CASCADE):
    pairs = list(_labelled(results))
    overall = ConfusionCounts()
    for expected, confidence in pairs:
        overall = overall.add(expected, confidence != Confidence.NONE)

    per_confidence = {}
    for rank, level in enumerate(LEVELS):
        counts = ConfusionCounts()
        for expected, confidence in pairs:
            detected_rank = LEVELS.index(confidence) if confidence in LEVELS else None
            if policy == LevelPolicy.CASCADE:
                if detected_rank is not None and detected_rank < rank:
                    continue
                predicted = detected_rank == rank
            else:
                predicted = detected_rank is not None and detected_rank <= rank
            counts = counts.add(expected, predicted)
        per_confidence[level] = counts
    return MetricsReport(overall, per_confidence, policy)


def _percent(value):
    return "-" if value is None else "%.0f%%" % (100 * value)


def render_metrics(report, title=""):
    lines = []
    if title:
        lines.append(title)
    lines.append(
        "%-8s %5s %5s %4s %4s %4s %4s %6s %6s %6s %6s"
        % ("level", "set", "det", "TP", "FP", "TN", "FN", "prec", "recall", "F", "FPR")
    )
    rows = [(level.value, report.per_confidence[level]) for level in LEVELS]
    rows.append(("any", report.counts))
    for name, counts in rows:
        lines.append(
            "%-8s %5d %5d %4d %4d %4d %4d %6s %6s %6s %6s"
            % (
                name,
                counts.total,
                counts.detected,
                counts.tp,
                counts.fp,
                counts.tn,
                counts.fn,
                _percent(counts.precision),
                _percent(counts.recall),
                _percent(counts.f_measure),
                _percent(counts.fpr),
            )
        )
    return "\n".join(lines)


def benchmark_report(results, policy=LevelPolicy.CASCADE):
    """Machine-readable benchmark output; timings kept apart in run_info."""
    report = {"cases": [r.to_record() for r in results], "metrics": {}}
    for direction in Direction:
        subset = [r for r in results if r.case.direction == direction]
        if subset:
            report["metrics"][direction.value] = score(subset, policy).to_record()
    report["mismatches"] = [r.case.case_id for r in results if not r.matches]
    report["run_info"] = {
        "seconds": {r.case.case_id: round(r.seconds, 4) for r in results},
        "total_seconds": round(sum(r.seconds for r in results), 4),
    }
    return report
