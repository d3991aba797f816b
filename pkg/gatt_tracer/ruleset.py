"""
Source, sink and crypto-evidence matchers

The defaults are the BluetoothGattCharacteristic data access methods:
four getValue variants for reads, four setValue overloads for writes,
and any call into javax.crypto or java.security as crypto evidence.
Overrides come from a YAML document, see rules/default.yml.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import yaml
from rapidfuzz import process

from gatt_tracer.common import TracerException
from gatt_tracer.smali import find_invocations


log = logging.getLogger(__name__)

GATT_CHARACTERISTIC = "Landroid/bluetooth/BluetoothGattCharacteristic;"
# pre-4.3 vendor BLE stacks, obsolete and off unless a ruleset enables them
VENDOR_CHARACTERISTICS = (
    "Lcom/broadcom/bt/gatt/BluetoothGattCharacteristic;",
    "Lcom/samsung/android/sdk/bt/gatt/BluetoothGattCharacteristic;",
)
BLUETOOTH_PERMISSIONS = ("BLUETOOTH", "BLUETOOTH_CONNECT")


class SchemaError(TracerException):
    def __init__(self, path, message):
        super().__init__("%s: %s" % (path, message))
        self.path = path


@dataclass(frozen=True)
class MethodMatcher:
    class_pattern: str
    name: str
    param_descriptors: Optional[Tuple[str, ...]] = None
    return_descriptor: Optional[str] = None
    # positions of the parameters carrying BLE data
    data_params: Tuple[int, ...] = field(default=(0,), compare=False)

    def matches(self, signature):
        if self.class_pattern.endswith(";"):
            if signature.class_descriptor != self.class_pattern:
                return False
        elif not signature.class_descriptor.startswith(self.class_pattern):
            return False
        if self.name != "*" and signature.name != self.name:
            return False
        if (
            self.param_descriptors is not None
            and tuple(signature.param_descriptors) != self.param_descriptors
        ):
            return False
        if (
            self.return_descriptor is not None
            and signature.return_descriptor != self.return_descriptor
        ):
            return False
        return True

    def render(self):
        params = "*" if self.param_descriptors is None else "".join(self.param_descriptors)
        ret = "*" if self.return_descriptor is None else self.return_descriptor
        return "%s->%s(%s)%s" % (self.class_pattern, self.name, params, ret)


class AnyOf:
    def __init__(self, matchers):
        self.matchers = tuple(matchers)

    def matches(self, signature):
        return any(m.matches(signature) for m in self.matchers)


def _gatt_reads(cls):
    return (
        MethodMatcher(cls, "getValue", (), "[B"),
        MethodMatcher(cls, "getIntValue", ("I", "I"), "Ljava/lang/Integer;"),
        MethodMatcher(cls, "getStringValue", ("I",), "Ljava/lang/String;"),
        MethodMatcher(cls, "getFloatValue", ("I", "I"), "Ljava/lang/Float;"),
    )


def _gatt_writes(cls):
    return (
        MethodMatcher(cls, "setValue", ("[B",), "Z"),
        MethodMatcher(cls, "setValue", ("I", "I", "I"), "Z"),
        MethodMatcher(cls, "setValue", ("Ljava/lang/String;",), "Z"),
        MethodMatcher(cls, "setValue", ("I", "I", "I", "I"), "Z", (0, 1)),
    )


@dataclass(frozen=True)
class RuleSet:
    write_sinks: Tuple[MethodMatcher, ...]
    read_sources: Tuple[MethodMatcher, ...]
    crypto_prefixes: Tuple[str, ...]
    eligibility_markers: Tuple[MethodMatcher, ...]
    exclude_callers: Tuple[str, ...] = ()

    def is_crypto(self, signature):
        return signature.class_descriptor.startswith(self.crypto_prefixes)

    def write_sink(self, signature):
        for matcher in self.write_sinks:
            if matcher.matches(signature):
                return matcher
        return None

    def read_source(self, signature):
        for matcher in self.read_sources:
            if matcher.matches(signature):
                return matcher
        return None

    def is_excluded(self, class_descriptor):
        return bool(self.exclude_callers) and class_descriptor.startswith(
            self.exclude_callers
        )

    def render(self):
        lines = []
        for title, matchers in (
            ("read_sources", self.read_sources),
            ("write_sinks", self.write_sinks),
            ("eligibility", self.eligibility_markers),
        ):
            lines.append("[%s]" % title)
            lines.extend(m.render() for m in matchers)
        lines.append("[crypto_prefixes]")
        lines.extend(self.crypto_prefixes)
        if self.exclude_callers:
            lines.append("[exclude_callers]")
            lines.extend(self.exclude_callers)
        return "\n".join(lines) + "\n"


def default_ruleset():
    return RuleSet(
        write_sinks=_gatt_writes(GATT_CHARACTERISTIC),
        read_sources=_gatt_reads(GATT_CHARACTERISTIC),
        crypto_prefixes=("Ljavax/crypto/", "Ljava/security/"),
        eligibility_markers=(
            MethodMatcher("Landroid/bluetooth/BluetoothDevice;", "connectGatt"),
        ),
    )


_MATCHER_SECTIONS = {
    "write_sinks": "write_sinks",
    "read_sources": "read_sources",
    "eligibility": "eligibility_markers",
}
_PREFIX_SECTIONS = {
    "crypto_prefixes": "crypto_prefixes",
    "exclude_callers": "exclude_callers",
}
_SECTIONS = sorted(list(_MATCHER_SECTIONS) + list(_PREFIX_SECTIONS) + ["vendor"])
_OPERATIONS = ["add", "remove", "replace"]
_ENTRY_KEYS = ["class", "name", "params", "return", "data"]


def _unknown(path, key, choices):
    message = "unknown key '%s'" % key
    best = process.extractOne(str(key), choices)
    if best is not None and best[1] >= 60:
        message += " (did you mean '%s'?)" % best[0]
    return SchemaError(path, message)


def _descriptor(value, path):
    if not isinstance(value, str) or not value:
        raise SchemaError(path, "expected a type descriptor string")
    return value


def _matcher(entry, path):
    if not isinstance(entry, dict):
        raise SchemaError(path, "expected a mapping with class and name")
    for key in entry:
        if key not in _ENTRY_KEYS:
            raise _unknown("%s.%s" % (path, key), key, _ENTRY_KEYS)
    for required in ("class", "name"):
        if not isinstance(entry.get(required), str) or not entry[required]:
            raise SchemaError("%s.%s" % (path, required), "required string")
    params = entry.get("params")
    if params is not None:
        if not isinstance(params, list):
            raise SchemaError(path + ".params", "expected a list of descriptors")
        params = tuple(
            _descriptor(p, "%s.params[%d]" % (path, i)) for i, p in enumerate(params)
        )
    ret = entry.get("return")
    if ret is not None:
        ret = _descriptor(ret, path + ".return")
    data = entry.get("data", [0])
    if not isinstance(data, list) or not all(
        isinstance(d, int) and d >= 0 for d in data
    ):
        raise SchemaError(path + ".data", "expected a list of parameter positions")
    return MethodMatcher(entry["class"], entry["name"], params, ret, tuple(data))


def _prefix(entry, path):
    if not isinstance(entry, str) or not entry.startswith(("L", "[")):
        raise SchemaError(path, "expected a class descriptor prefix")
    return entry


def _apply(current, spec, path, parse):
    """Apply an add/remove/replace block (or a bare list meaning replace)."""
    if isinstance(spec, list):
        spec = {"replace": spec}
    if not isinstance(spec, dict):
        raise SchemaError(path, "expected a list or an add/remove/replace mapping")
    for key in spec:
        if key not in _OPERATIONS:
            raise _unknown("%s.%s" % (path, key), key, _OPERATIONS)
    result = list(current)
    for operation in _OPERATIONS:
        if operation not in spec:
            continue
        entries = spec[operation] or []
        if not isinstance(entries, list):
            raise SchemaError("%s.%s" % (path, operation), "expected a list")
        parsed = [
            parse(entry, "%s.%s[%d]" % (path, operation, i))
            for i, entry in enumerate(entries)
        ]
        if operation == "replace":
            result = parsed
        elif operation == "add":
            result.extend(item for item in parsed if item not in result)
        else:
            for i, item in enumerate(parsed):
                if item not in result:
                    raise SchemaError(
                        "%s.remove[%d]" % (path, i), "no such entry to remove"
                    )
                result.remove(item)
    return tuple(result)


def load_ruleset(document):
    """Merge an override document (parsed YAML) onto the default ruleset."""
    rules = default_ruleset()
    if document is None:
        return rules
    if not isinstance(document, dict):
        raise SchemaError("$", "ruleset document must be a mapping")
    for key in document:
        if key not in _SECTIONS:
            raise _unknown(key, key, _SECTIONS)

    vendor = document.get("vendor") or {}
    if not isinstance(vendor, dict) or not isinstance(vendor.get("enabled", False), bool):
        raise SchemaError("vendor", "expected {enabled: true|false}")
    if vendor.get("enabled"):
        for cls in VENDOR_CHARACTERISTICS:
            rules = replace(
                rules,
                write_sinks=rules.write_sinks + _gatt_writes(cls),
                read_sources=rules.read_sources + _gatt_reads(cls),
            )

    for section, attribute in _MATCHER_SECTIONS.items():
        if section in document:
            rules = replace(
                rules,
                **{
                    attribute: _apply(
                        getattr(rules, attribute), document[section], section, _matcher
                    )
                }
            )
    for section, attribute in _PREFIX_SECTIONS.items():
        if section in document:
            rules = replace(
                rules,
                **{
                    attribute: _apply(
                        getattr(rules, attribute), document[section], section, _prefix
                    )
                }
            )

    if not rules.write_sinks:
        raise SchemaError("write_sinks", "at least one sink is required")
    if not rules.read_sources:
        raise SchemaError("read_sources", "at least one source is required")
    if not rules.crypto_prefixes:
        raise SchemaError("crypto_prefixes", "at least one prefix is required")
    shared = set(rules.write_sinks) & set(rules.read_sources)
    if shared:
        raise SchemaError(
            "read_sources",
            "matcher is also a write sink: %s" % sorted(m.render() for m in shared)[0],
        )
    return rules


def load_ruleset_file(path):
    try:
        with open(path, encoding="utf-8") as f:
            document = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise SchemaError("$", "not valid YAML: %s" % e)
    log.info("Loaded ruleset overrides from %s", path)
    return load_ruleset(document)


@dataclass(frozen=True)
class Eligibility:
    eligible: bool
    reason: str
    permission_checked: bool = False


def has_bluetooth_permission(permissions):
    names = {perm.strip().rsplit(".", 1)[-1] for perm in permissions}
    return any(name in names for name in BLUETOOTH_PERMISSIONS)


def is_eligible(program, rules, permissions=None):
    """An app qualifies when it calls connectGatt (and declares BLUETOOTH).

    Without a permission list the check fails open on connectGatt alone.
    """
    if not find_invocations(program, AnyOf(rules.eligibility_markers)):
        return Eligibility(False, "no connectGatt")
    if permissions is None:
        return Eligibility(True, "connectGatt found; permissions not supplied")
    if not has_bluetooth_permission(permissions):
        return Eligibility(False, "permission absent", True)
    return Eligibility(True, "connectGatt found", True)
