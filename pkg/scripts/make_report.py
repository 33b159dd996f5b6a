"""Merge run manifests into consolidated report tables.

Produces report.csv (per-seed rows), series.csv (recall-vs-threshold,
plot-ready) and report.md (per-run median tables) under --out.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from zsdgen.experiment import write_report  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("manifests", nargs="+", help="paths to run manifest.json files")
    ap.add_argument("--out", default="runs/report")
    args = ap.parse_args()

    write_report(args.manifests, args.out)
    for name in ("report.csv", "series.csv", "report.md"):
        print(Path(args.out) / name)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
