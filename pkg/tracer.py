import sys

from gatt_tracer.cli import main


"""
Entry point, e.g.

    python tracer.py analyze --app path/to/smali --direction both
    python tracer.py bench
"""


if __name__ == "__main__":
    sys.exit(main())
