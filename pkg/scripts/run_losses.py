"""Loss-term sweep: wgan_only vs +cls vs +emb vs +cls+emb over 5 seeds.

Each variant trains its own synthesizer per seed (losses masked via the
per-term weights); heads and evaluation are identical across variants.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from zsdgen.experiment import (  # noqa: E402
    ExperimentConfig, MODE_ABLATION, SWEEP_LOSSES, run_ablation,
)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/losses")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args()

    config = replace(
        ExperimentConfig(), mode=MODE_ABLATION, seeds=tuple(args.seeds), out_dir=args.out
    )
    run_ablation(config, sweep=SWEEP_LOSSES)
    metrics = json.loads((Path(args.out) / "metrics.json").read_text())
    print(json.dumps(metrics["median"], indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
