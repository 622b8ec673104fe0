"""Sweep the divergence-loss weight lambda on the joint fine-tuning stage.

    python3 scripts/lambda_ablation.py --base runs/checkerboard [--lambdas 0 0.1 1 10] [--iterations 1000]

Reuses the teacher and distill checkpoints of a finished base run and
re-runs only the joint stage per lambda, with the same seed.  Prints a table
of few-step calibration error per K and the velocity consistency loss.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

from jointflow.acceptance import SHIPPED_CONFIG
from jointflow.config import load_config
from jointflow.densities import make_density
from jointflow.metrics import nll_calibration
from jointflow.rng import RngStreams
from jointflow.training import StagePlan, run_plan


def ablate(cfg, base: Path, out: Path, field: str, values, iterations: int, n_eval: int) -> list[dict]:
    stage_name = cfg.evaluation.model_stage
    idx = [s.name for s in cfg.stages].index(stage_name)
    template = cfg.stages[idx]
    density = make_density(cfg.density)
    rows = []
    for value in values:
        st = copy.deepcopy(template)
        setattr(st, field, value)
        st.iterations = iterations
        st.warm_start = str(base / f"{template.warm_start}.ckpt")
        st.teacher = str(base / f"{template.teacher}.ckpt") if template.teacher else None
        run_dir = out / f"{field}_{value}"
        res = run_plan(StagePlan([st]), density, cfg.seed, run_dir, cfg.model_kwargs())[stage_name]
        streams = RngStreams(cfg.seed)
        pts = density.sample(streams["ablation:heldout"], n_eval)
        row = {field: value}
        for k in cfg.evaluation.ks:
            row[f"K{k}"] = nll_calibration(res.model, density, n_eval, k, "fewstep", None,
                                           points=pts).mean_abs_error_vs_analytic
        row["u_sc"] = res.metrics[-1]["u_sc"] if res.metrics else float("nan")
        rows.append(row)
        print(json.dumps(row), flush=True)
    (out / f"{field}_ablation.json").write_text(json.dumps(rows, indent=2))
    return rows


def table(rows: list[dict]) -> str:
    keys = list(rows[0])
    lines = [" ".join(f"{k:>10}" for k in keys)]
    for r in rows:
        lines.append(" ".join(f"{r[k]:>10.4g}" if isinstance(r[k], float) else f"{r[k]!s:>10}" for k in keys))
    return "\n".join(lines)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(SHIPPED_CONFIG))
    p.add_argument("--base", required=True, help="directory of a finished run of the config")
    p.add_argument("--out", default="runs/lambda_ablation")
    p.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.1, 1.0, 10.0])
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--n-eval", type=int, default=2000)
    args = p.parse_args(argv)
    cfg = load_config(args.config)
    rows = ablate(cfg, Path(args.base), Path(args.out), "lambda_div", args.lambdas, args.iterations, args.n_eval)
    print(table(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
