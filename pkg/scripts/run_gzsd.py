"""Generalized zero-shot detection: seen+unseen classes compete at test time.

Evaluates the concatenated seen+unseen head on a merged eval set and the
unseen head alone on the unseen split (the paired ZSD reference).
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from zsdgen.experiment import ExperimentConfig, MODE_GZSD, run_gzsd  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/gzsd")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args()

    config = replace(
        ExperimentConfig(), mode=MODE_GZSD, seeds=tuple(args.seeds), out_dir=args.out
    )
    run_gzsd(config)
    metrics = json.loads((Path(args.out) / "metrics.json").read_text())
    print(json.dumps(metrics["median"], indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
