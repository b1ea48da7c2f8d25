#!/usr/bin/env python3
"""Run the full default experiment and print where the reports landed."""
import sys
from pathlib import Path

from amulet import cli


def main() -> int:
    out = sys.argv[1] if len(sys.argv) > 1 else "runs/default"
    rc = cli.main(["--config", "default", "--out", out, "reproduce"])
    if rc == 0:
        print(f"reports under {Path(out) / 'reports'}")
    return rc


if __name__ == "__main__":
    sys.exit(main())
