import enum
import os
import re


class TracerException(Exception):
    pass


class Direction(enum.Enum):
    READS = "reads"
    WRITES = "writes"


class Confidence(enum.Enum):
    HIGH = "High"
    MEDIUM = "Medium"
    LOW = "Low"
    NONE = "None"


# confidence levels in the order the trace passes run
LEVELS = (Confidence.HIGH, Confidence.MEDIUM, Confidence.LOW)

_DURATION_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([smh]?)\s*$")
_DURATION_UNITS = {"": 1, "s": 1, "m": 60, "h": 3600}


def parse_duration(text):
    """Convert '300', '30s', '5m' or '1h' to seconds."""
    match = _DURATION_RE.match(str(text))
    if not match:
        raise TracerException("Invalid duration: '%s'" % text)
    seconds = float(match.group(1)) * _DURATION_UNITS[match.group(2)]
    if seconds <= 0:
        raise TracerException("Duration must be positive: '%s'" % text)
    return seconds


try:
    MAX_DEPTH = int(os.environ["GATT_TRACER_MAX_DEPTH"])
except KeyError:
    MAX_DEPTH = 64

try:
    MAX_VISITED = int(os.environ["GATT_TRACER_MAX_VISITED"])
except KeyError:
    MAX_VISITED = 200000

try:
    TIMEOUT = parse_duration(os.environ["GATT_TRACER_TIMEOUT"])
except KeyError:
    TIMEOUT = 5 * 60.0

try:
    JOBS = int(os.environ["GATT_TRACER_JOBS"])
except KeyError:
    JOBS = 1

try:
    LOG_LEVEL = os.environ["GATT_TRACER_LOG_LEVEL"]
except KeyError:
    LOG_LEVEL = "WARNING"


PACKAGE_DIR = os.path.dirname(os.path.abspath(__file__))
CORPUS_DIR = os.path.join(PACKAGE_DIR, "corpus")
DEFAULT_RULES_PATH = os.path.join(PACKAGE_DIR, "rules", "default.yml")
