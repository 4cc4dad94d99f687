#!/usr/bin/env python3
"""
Command-line entrypoint.

Equivalent to `python -m pathsmooth.cli ...`; see `python smoother.py --help`.
"""
import sys

from pathsmooth.cli import main


if __name__ == "__main__":
    sys.exit(main())
