"""Sweep the divergence-target scale on the joint fine-tuning stage.

    python3 scripts/scale_ablation.py --base runs/checkerboard [--scales 0.01 0.1 1 10]

Same protocol as ``lambda_ablation.py``: the head is trained in scaled units
and read out unscaled, so calibration should change only through optimizer
conditioning.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from lambda_ablation import ablate, table

from jointflow.acceptance import SHIPPED_CONFIG
from jointflow.config import load_config


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(SHIPPED_CONFIG))
    p.add_argument("--base", required=True, help="directory of a finished run of the config")
    p.add_argument("--out", default="runs/scale_ablation")
    p.add_argument("--scales", type=float, nargs="+", default=[0.01, 0.1, 1.0, 10.0])
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--n-eval", type=int, default=2000)
    args = p.parse_args(argv)
    cfg = load_config(args.config)
    rows = ablate(cfg, Path(args.base), Path(args.out), "div_scale", args.scales, args.iterations, args.n_eval)
    print(table(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
