"""Run the full experiment suite end to end and build the merged report.

components sweep -> loss sweep -> gzsd -> report. Expect roughly half an
hour on one core with the default 5 seeds.
"""

import argparse
import subprocess
import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args()

    out = Path(args.out)
    seeds = [str(s) for s in args.seeds]
    steps = [
        ("run_components.py", out / "components"),
        ("run_losses.py", out / "losses"),
        ("run_gzsd.py", out / "gzsd"),
    ]
    for script, dest in steps:
        cmd = [sys.executable, str(HERE / script), "--out", str(dest), "--seeds", *seeds]
        print("+", " ".join(cmd), flush=True)
        subprocess.run(cmd, check=True)
    manifests = [str(dest / "manifest.json") for _, dest in steps]
    cmd = [sys.executable, str(HERE / "make_report.py"), *manifests, "--out", str(out / "report")]
    print("+", " ".join(cmd), flush=True)
    subprocess.run(cmd, check=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
