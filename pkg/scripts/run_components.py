"""Components sweep: baseline vs cfu vs cfu_ffu vs cfu_ffu_bfu over 5 seeds.

Writes manifest.json/metrics.json under --out; the median block carries
`ordering_ok` for the strict recall@100 ordering at IoU 0.5.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from zsdgen.experiment import (  # noqa: E402
    ExperimentConfig, MODE_ABLATION, SWEEP_COMPONENTS, run_ablation,
)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/components")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args()

    config = replace(
        ExperimentConfig(), mode=MODE_ABLATION, seeds=tuple(args.seeds), out_dir=args.out
    )
    run_ablation(config, sweep=SWEEP_COMPONENTS)
    metrics = json.loads((Path(args.out) / "metrics.json").read_text())
    print(json.dumps(metrics["median"], indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
