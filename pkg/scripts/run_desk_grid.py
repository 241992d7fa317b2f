#!/usr/bin/env python3
"""Run the full desk-scale treatment grid and emit the report CSVs.

Equivalent to ``transferlab grid --plan plans/desk.plan -o <out>`` but
handy when the package is on PYTHONPATH without being installed. The grid
is resumable: rerunning with the same output directory skips every cell
that already has a results row.
"""
import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import transferlab.analysis as an
import transferlab.experiment as ex


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("-o", "--out", default="desk_grid",
                        help="output directory (default: ./desk_grid)")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--plan", default=None,
                        help="plan file (default: the built-in desk plan)")
    args = parser.parse_args()

    plan = ex.read_plan(args.plan) if args.plan else ex.desk_plan()
    out = Path(args.out)
    started = time.monotonic()
    summary = ex.run_grid(plan, out, workers=args.workers, progress=print)
    elapsed = time.monotonic() - started
    paths = an.emit_report(summary.results, out)

    print(f"\n{summary.executed} cells executed, {summary.skipped} skipped, "
          f"{len(summary.failures)} failed in {elapsed / 60:.1f} min")
    for cell, category, message in summary.failures:
        print(f"  failed [{category}] {cell}: {message}")
    print("reports: " + ", ".join(str(p) for p in paths))
    return 0 if not summary.failures else 1


if __name__ == "__main__":
    sys.exit(main())
