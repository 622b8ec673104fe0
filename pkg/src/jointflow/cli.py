"""Command-line front end.

Exit codes: 0 success; 1 training aborted or acceptance failure; 2 invalid
config, missing or corrupt checkpoint, architecture mismatch, or a checkpoint
without a trained divergence head passed to ``guide``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .metrics import density_grid, energy_distance, nll_calibration, write_grid_csv
from .rng import RngStream, RngStreams
from .sampling import GuidanceConfig, self_guided_sample
from .training import MissingCheckpointError, StageError, run_plan

log = logging.getLogger("jointflow")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _parse_ks(values) -> list[int]:
    out = []
    for v in values or []:
        out.extend(int(x) for x in str(v).split(",") if x.strip())
    return out


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(args, cfg: RunConfig, sub: str = "") -> Path:
    p = Path(args.out) if args.out else cfg.out_path() / sub if sub else cfg.out_path()
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_model(path, cfg: RunConfig):
    ckpt = load_checkpoint(path)
    arch = ckpt.model.config()
    declared = cfg.model_kwargs()
    diff = {k: (arch.get(k), v) for k, v in declared.items() if k != "zero_init_heads" and arch.get(k) != v}
    if diff:
        raise CheckpointError(f"{path}: architecture differs from the config: {diff}")
    return ckpt


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    results = run_plan(cfg.plan, cfg.make_density(), cfg.seed, out, cfg.model_kwargs(), log=log.info)
    for name, res in results.items():
        print(f"{name}: {res.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for eval", None, str(args.config))
    ckpt = _load_model(args.checkpoint, cfg)
    model = ckpt.model
    ks = _parse_ks(args.k) or list(cfg.evaluation.ks)
    out = _out_dir(args, cfg, "eval")
    density = cfg.make_density()
    streams = RngStreams(cfg.seed)
    points = density.sample(streams["eval:heldout"], cfg.evaluation.n_samples)
    ev = cfg.evaluation
    for k in ks:
        summary = nll_calibration(model, density, len(points), k, "fewstep", streams["eval:heldout"], points=points)
        (out / f"calibration_K{k}.json").write_text(json.dumps(summary.to_dict(), indent=2))
        grid = density_grid(model, ev.grid_bounds, ev.grid_resolution, k)
        write_grid_csv(grid, out / f"grid_K{k}.csv")
        print(f"K={k}: mean |logp - analytic| = {summary.mean_abs_error_vs_analytic:.4f} nats, nfe={summary.nfe}")
    return EXIT_OK


def cmd_guide(args) -> int:
    cfg = _load(args)
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for guide", None, str(args.config))
    ckpt = _load_model(args.checkpoint, cfg)
    if not ckpt.div_head_trained:
        raise CheckpointError(f"{args.checkpoint}: the divergence head was never trained")
    g = cfg.evaluation.guidance
    steps = g.steps if args.guidance_steps is None else args.guidance_steps
    lr = g.lr if args.guidance_lr is None else args.guidance_lr
    k_samp = (_parse_ks(args.k) or [g.K_samp])[0]
    n = args.n if args.n else g.n_samples
    gcfg = GuidanceConfig(steps=steps, lr=lr, K_samp=k_samp)
    out = _out_dir(args, cfg, "guide")
    guided = self_guided_sample(ckpt.model, RngStream(cfg.seed, "guide"), gcfg, n)
    plain = self_guided_sample(ckpt.model, RngStream(cfg.seed, "guide"), GuidanceConfig(steps=0, K_samp=k_samp), n)
    for name, pts in (("guided", guided.x1), ("unguided", plain.x1)):
        with open(out / f"{name}_samples.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y"])
            w.writerows([[repr(a), repr(b)] for a, b in pts.tolist()])
    with open(out / "guidance_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", *[f"nll_{i}" for i in range(guided.trace.shape[0])]])
        for i, row in enumerate(guided.trace.T.tolist()):
            w.writerow([i, *map(repr, row)])
    density = cfg.make_density()
    held = density.sample(RngStream(cfg.seed, "guide:heldout"), g.n_reference)
    summary = {
        "steps": steps, "lr": gcfg.resolved_lr, "K_samp": k_samp, "n_samples": n,
        "energy_distance_guided": energy_distance(guided.x1, held),
        "energy_distance_unguided": energy_distance(plain.x1, held),
    }
    if steps > 0:
        summary["fraction_nll_decreased"] = float((guided.trace[1] < guided.trace[0]).double().mean())
    (out / "guidance_summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_acceptance(args) -> int:
    from .acceptance import run_acceptance

    only = set(_parse_ks(args.only)) if args.only else None
    results = run_acceptance(args.config, args.out, fresh=args.fresh, log=log.info, only=only)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointflow", description="Joint flow-map distillation on 2D densities.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML run config")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default=None, help="output directory")

    sp = sub.add_parser("train", help="run every stage of the config")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="few-step calibration summaries and density grids")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--k", action="append", help="step counts, repeatable or comma separated")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("guide", help="maximum-likelihood self-guided sampling")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--k", action="append", help="sampling steps K_samp")
    sp.add_argument("--guidance-steps", type=int, default=None)
    sp.add_argument("--guidance-lr", type=float, default=None)
    sp.add_argument("--n", type=int, default=None, help="number of samples")
    sp.set_defaults(func=cmd_guide)

    sp = sub.add_parser("acceptance", help="run the acceptance criteria")
    sp.add_argument("--config", default=None, help="defaults to the shipped checkerboard config")
    sp.add_argument("--out", default=None, help="cache directory for the trained runs")
    sp.add_argument("--fresh", action="store_true", help="retrain even if cached runs exist")
    sp.add_argument("--only", action="append", help="criterion numbers to run")
    sp.set_defaults(func=cmd_acceptance)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingCheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
