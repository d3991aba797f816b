"""
Corpus-level statistics over per-app verdicts joined with store metadata
(category, downloads, year).
"""
import csv
import enum
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from gatt_tracer.common import Confidence, Direction, TracerException
from gatt_tracer.ruleset import AnyOf
from gatt_tracer.smali import find_invocations
from gatt_tracer.taint import TaintVerdict


log = logging.getLogger(__name__)

METADATA_COLUMNS = ["package", "category", "downloads", "year"]


class BleOrigin(enum.Enum):
    LIBRARY_ONLY = "LibraryOnly"
    APP_ONLY = "AppOnly"
    BOTH = "Both"
    UNKNOWN = "Unknown"


class AggregationPolicy(enum.Enum):
    # only verdicts with no crypto at all count as "no crypto"
    STRICT = "strict"
    # High counts as crypto, None as no crypto, anything else is unknown
    HEADLINE = "headline"


@dataclass(frozen=True)
class MetadataError:
    row: int
    reason: str


@dataclass(frozen=True)
class Metadata:
    package: str
    category: Optional[str] = None
    downloads: Optional[int] = None
    year: Optional[int] = None


@dataclass(frozen=True)
class AppRecord:
    app_id: str
    package_name: Optional[str] = None
    category: Optional[str] = None
    downloads: Optional[int] = None
    year: Optional[int] = None
    read_verdict: Optional[TaintVerdict] = None
    write_verdict: Optional[TaintVerdict] = None
    origin: Optional[BleOrigin] = None

    @property
    def verdicts(self):
        return [v for v in (self.read_verdict, self.write_verdict) if v is not None]


@dataclass(frozen=True)
class AggregateReport:
    n_apps: int = 0
    per_category: Dict[str, dict] = field(default_factory=dict)
    per_year: Dict[int, Optional[float]] = field(default_factory=dict)
    totals: Dict[str, Optional[float]] = field(default_factory=dict)
    library_split: Dict[str, int] = field(default_factory=dict)
    policy: AggregationPolicy = AggregationPolicy.HEADLINE

    def to_record(self):
        return {
            "policy": self.policy.value,
            "n_apps": self.n_apps,
            "per_category": {k: self.per_category[k] for k in sorted(self.per_category)},
            "per_year": {str(k): self.per_year[k] for k in sorted(self.per_year)},
            "totals": self.totals,
            "library_split": self.library_split,
        }


def _package_head(components):
    return tuple(components[:2]) if len(components) >= 2 else None


def classify_ble_call_origin(program, rules, package_name):
    """Whether BLE data calls sit in the app's own package, in libraries, or both.

    Compares the first two package components of each calling class with
    the app package; classes too short to compare are skipped.
    """
    app_head = _package_head((package_name or "").split("."))
    if app_head is None:
        return BleOrigin.UNKNOWN
    sites = find_invocations(program, AnyOf(rules.write_sinks + rules.read_sources))
    own = other = False
    for method, _ in sites:
        descriptor = method.signature.class_descriptor
        head = _package_head(descriptor[1:-1].split("/")[:-1])
        if head is None:
            continue
        if head == app_head:
            own = True
        else:
            other = True
    if own and other:
        return BleOrigin.BOTH
    if own:
        return BleOrigin.APP_ONLY
    if other:
        return BleOrigin.LIBRARY_ONLY
    return BleOrigin.UNKNOWN


def no_crypto(verdict, policy=AggregationPolicy.HEADLINE):
    """True/False, or None when the verdict does not count under `policy`."""
    if policy == AggregationPolicy.STRICT:
        return not verdict.crypto_found
    if verdict.confidence == Confidence.HIGH:
        return False
    if verdict.confidence == Confidence.NONE and not verdict.budget_exhausted:
        return True
    return None


def no_crypto_either(record, policy=AggregationPolicy.HEADLINE):
    values = [no_crypto(v, policy) for v in record.verdicts]
    if False in values:
        return False
    if None in values:
        return None
    return True


def _percent(numerator, denominator):
    if denominator == 0:
        return None
    return round(100.0 * numerator / denominator, 2)


def _share(values):
    counted = [v for v in values if v is not None]
    return _percent(sum(1 for v in counted if v), len(counted))


def aggregate(records, policy=AggregationPolicy.HEADLINE):
    records = [r for r in records if r.verdicts]
    if not records:
        return AggregateReport(policy=policy)

    reads = [no_crypto(r.read_verdict, policy) for r in records if r.read_verdict]
    writes = [no_crypto(r.write_verdict, policy) for r in records if r.write_verdict]
    either = [no_crypto_either(r, policy) for r in records]
    totals = {
        "pct_no_crypto_reads": _share(reads),
        "pct_no_crypto_writes": _share(writes),
        "pct_no_crypto_either": _share(either),
        "downloads_no_crypto_either": sum(
            r.downloads or 0 for r, value in zip(records, either) if value
        ),
    }

    by_category = defaultdict(list)
    by_year = defaultdict(list)
    for record, value in zip(records, either):
        if record.category is not None:
            by_category[record.category].append(record)
        if record.year is not None:
            by_year[record.year].append(value)

    per_category = {}
    for category, members in by_category.items():
        high = sum(
            1 for r in members if any(v.confidence == Confidence.HIGH for v in r.verdicts)
        )
        none = sum(1 for r in members if not any(v.crypto_found for v in r.verdicts))
        per_category[category] = {
            "n_apps": len(members),
            "downloads": sum(r.downloads or 0 for r in members),
            "pct_crypto_high": _percent(high, len(members)),
            "pct_none": _percent(none, len(members)),
        }
    per_year = {year: _share(values) for year, values in by_year.items()}

    library_split = {origin.value: 0 for origin in BleOrigin}
    for record in records:
        library_split[(record.origin or BleOrigin.UNKNOWN).value] += 1

    return AggregateReport(
        len(records), per_category, per_year, totals, library_split, policy
    )


def _optional_int(value):
    value = (value or "").strip()
    return int(value) if value else None


def load_metadata(path):
    """Read package,category,downloads,year rows; bad rows become MetadataErrors."""
    metadata = {}
    errors = []
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in METADATA_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            return metadata, [MetadataError(1, "missing columns: %s" % ", ".join(missing))]
        for row_number, row in enumerate(reader, start=2):
            package = (row["package"] or "").strip()
            if not package:
                errors.append(MetadataError(row_number, "empty package"))
                continue
            try:
                downloads = _optional_int(row["downloads"])
                year = _optional_int(row["year"])
            except ValueError as e:
                errors.append(MetadataError(row_number, str(e)))
                continue
            if downloads is not None and downloads < 0:
                errors.append(MetadataError(row_number, "negative downloads"))
                continue
            if package in metadata:
                errors.append(MetadataError(row_number, "duplicate package %s" % package))
                continue
            metadata[package] = Metadata(
                package, (row["category"] or "").strip() or None, downloads, year
            )
    for error in errors:
        log.warning("%s:%d: %s", path, error.row, error.reason)
    return metadata, errors


def join_records(rows, metadata, errors=None):
    """AppRecords from analyze output rows, joined to metadata by package name.

    Rows that do not hold a verdict are appended to `errors` as
    MetadataError records (numbered from 1) and skipped.
    """
    if errors is None:
        errors = []
    grouped = defaultdict(dict)
    packages = {}
    origins = {}
    for number, row in enumerate(rows, start=1):
        if not isinstance(row, dict):
            errors.append(MetadataError(number, "not an object"))
            continue
        if row.get("eligible") is False:
            continue
        try:
            app_id = str(row["app_id"])
            direction = Direction(row["direction"])
            verdict = TaintVerdict.from_record(row)
            origin = BleOrigin(row["origin"]) if row.get("origin") else None
        except KeyError as e:
            errors.append(MetadataError(number, "missing %s" % e))
            continue
        except (ValueError, TypeError, TracerException) as e:
            errors.append(MetadataError(number, str(e)))
            continue
        grouped[app_id][direction] = verdict
        packages[app_id] = row.get("package_name")
        if origin is not None:
            origins[app_id] = origin

    records: List[AppRecord] = []
    for app_id in sorted(grouped):
        package = packages[app_id]
        meta = metadata.get(package) if package else None
        records.append(
            AppRecord(
                app_id,
                package,
                meta.category if meta else None,
                meta.downloads if meta else None,
                meta.year if meta else None,
                grouped[app_id].get(Direction.READS),
                grouped[app_id].get(Direction.WRITES),
                origins.get(app_id),
            )
        )
    return records


def _cell(value):
    return "-" if value is None else "%.1f%%" % value


def render_table(report):
    lines = [
        "%-28s %6s %14s %8s %8s" % ("Category", "Apps", "Downloads", "High", "None")
    ]
    for category in sorted(report.per_category):
        row = report.per_category[category]
        lines.append(
            "%-28s %6d %14d %8s %8s"
            % (
                category,
                row["n_apps"],
                row["downloads"],
                _cell(row["pct_crypto_high"]),
                _cell(row["pct_none"]),
            )
        )
    lines.append("")
    lines.append("Apps analysed: %d (policy: %s)" % (report.n_apps, report.policy.value))
    for key in ("pct_no_crypto_reads", "pct_no_crypto_writes", "pct_no_crypto_either"):
        lines.append("%-28s %s" % (key, _cell(report.totals.get(key))))
    downloads = report.totals.get("downloads_no_crypto_either", 0)
    lines.append("%-28s %d" % ("downloads_no_crypto_either", downloads))
    for origin in BleOrigin:
        lines.append("%-28s %d" % (origin.value, report.library_split.get(origin.value, 0)))
    return "\n".join(lines)
