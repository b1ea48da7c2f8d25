#!/usr/bin/env python3
"""Re-run the default experiment under alternative seed roots and tabulate the
headline numbers, to gauge seed sensitivity of the directional trends."""
import sys
import tempfile
from pathlib import Path

from amulet import cli
from amulet import metrics as mx


def headline(out: Path) -> dict:
    single = mx.report_from_csv((out / "reports" / "single_attack_eer.csv").read_text())
    mixed = mx.report_from_csv((out / "reports" / "mixed_attack_eer.csv").read_text())
    t0to5 = [c for c in single.conditions if c != "T6"]

    def avg(system):
        return sum(single.eer_percent(system, c) for c in t0to5) / len(t0to5)

    experts = [s for s in single.systems if s.startswith("E")]
    return {
        "E0 clean": single.eer_percent("E0", "T0"),
        "best expert avg": min(avg(s) for s in experts),
        "fused_top5 avg": avg("fused_top5"),
        "ensemble mixed": mixed.row_average("ensemble"),
        "fused_top5 mixed": mixed.row_average("fused_top5"),
    }


def main() -> int:
    seeds = [int(s) for s in sys.argv[1:]] or [1, 2, 3]
    for seed in seeds:
        out = Path(tempfile.mkdtemp(prefix=f"amulet-seed{seed}-"))
        rc = cli.main(["--config", "default", "--out", str(out),
                       "--seed-override", str(seed), "reproduce"])
        if rc != 0:
            return rc
        print(f"seed-override={seed}: " + "  ".join(
            f"{k}={v:.2f}" for k, v in headline(out).items()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
