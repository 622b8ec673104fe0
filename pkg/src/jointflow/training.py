"""Staged training: teacher flow matching, sampling distillation, joint distillation.

A :class:`StagePlan` is an ordered list of :class:`StageConfig`.  Each stage
names its active losses, batch split, schedule, velocity/divergence sources and
warm start.  :func:`run_stage` runs one stage and writes its checkpoint,
metrics CSV and summary JSON into a :class:`CheckpointSink` directory.

Metrics CSVs carry only quantities that are a deterministic function of
``(seed, config)``; wall-clock time goes to the summary JSON.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch

from .autodiff import AdamState, ContractViolation, NonFiniteGradientError, adam_step, global_norm, grad, lr_schedule
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .densities import TIME_SCHEMES, Density2D, make_interpolant_batch
from .losses import (
    TERM_NAMES,
    LossTerms,
    consistency_losses,
    diagonal_losses,
    loss_lagrangian_div,
    meanflow_losses,
)
from .model import JointFlowMapModel, TraceMode
from .rng import RngStreams

LOSS_NAMES = ("fm", "div", "shortcut", "div_sc", "meanflow", "meanflow_div", "lagrangian_div")
DIV_LOSSES = frozenset({"div", "div_sc", "meanflow_div", "lagrangian_div"})
PAIR_LOSSES = frozenset({"shortcut", "div_sc", "meanflow", "meanflow_div", "lagrangian_div"})
SOURCES = ("self", "teacher")
METRIC_COLUMNS = ("step", *TERM_NAMES, "total", "lr", "grad_norm", "skipped")


class StageError(RuntimeError):
    """A stage could not start or was aborted; carries stage and step context."""

    def __init__(self, message: str, stage: str = "", step: int = 0):
        super().__init__(f"stage {stage!r}, step {step}: {message}" if stage else message)
        self.stage = stage
        self.step = step


class MissingCheckpointError(StageError):
    def __init__(self, path, stage: str = ""):
        super().__init__(f"warm-start or teacher checkpoint not found: {path}", stage)
        self.path = str(path)


@dataclass
class EarlyStopping:
    """Held-out few-step calibration check; the best-scoring weights are kept."""

    every: int = 250
    n_points: int = 2000
    ks: tuple[int, ...] = (1, 2, 4, 8)

    def __post_init__(self):
        self.ks = tuple(int(k) for k in self.ks)
        if self.every < 1 or self.n_points < 1 or not self.ks or min(self.ks) < 1:
            raise ContractViolation("early stopping needs every >= 1, n_points >= 1 and K values >= 1")


@dataclass
class StageConfig:
    name: str
    losses: tuple[str, ...] = ("fm",)
    iterations: int = 1000
    batch_size: int = 512
    split_ratio: float = 0.75
    lr: float = 1e-3
    decay_start: int = 35000
    velocity_target: str = "data"
    divergence_source: str = "teacher"
    trace_mode: str = "exact"
    div_scale: float = 1.0
    lambda_div: float = 1.0
    time_scheme: str = "discrete-grid"
    reverse_fraction: float = 0.5
    warm_start: Optional[str] = None
    teacher: Optional[str] = None
    ema_rate: Optional[float] = None
    early_stopping: Optional[EarlyStopping] = None
    log_every: int = 100

    def __post_init__(self):
        self.losses = tuple(self.losses)
        if isinstance(self.early_stopping, dict):
            self.early_stopping = EarlyStopping(**self.early_stopping)

    @property
    def has_div_losses(self) -> bool:
        return bool(DIV_LOSSES & set(self.losses))

    @property
    def has_pair_losses(self) -> bool:
        return bool(PAIR_LOSSES & set(self.losses))

    def validate(self) -> None:
        bad = [l for l in self.losses if l not in LOSS_NAMES]
        if bad:
            raise ContractViolation(f"stage {self.name!r}: unknown losses {bad}; choose from {list(LOSS_NAMES)}")
        if self.iterations < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ContractViolation(f"stage {self.name!r}: iterations >= 0, batch_size >= 1, log_every >= 1")
        if not 0.0 < self.split_ratio <= 1.0:
            raise ContractViolation(f"stage {self.name!r}: split_ratio must lie in (0, 1]")
        if self.lr <= 0 or self.div_scale <= 0 or self.lambda_div < 0:
            raise ContractViolation(f"stage {self.name!r}: lr and div_scale must be > 0, lambda_div >= 0")
        if self.velocity_target not in ("data", "teacher"):
            raise ContractViolation(f"stage {self.name!r}: velocity_target is 'data' or 'teacher'")
        if self.divergence_source not in SOURCES:
            raise ContractViolation(f"stage {self.name!r}: divergence_source is 'self' or 'teacher'")
        if self.time_scheme not in TIME_SCHEMES:
            raise ContractViolation(f"stage {self.name!r}: time_scheme must be one of {list(TIME_SCHEMES)}")
        if not 0.0 <= self.reverse_fraction <= 1.0:
            raise ContractViolation(f"stage {self.name!r}: reverse_fraction must lie in [0, 1]")
        if self.ema_rate is not None and not 0.0 <= self.ema_rate < 1.0:
            raise ContractViolation(f"stage {self.name!r}: ema_rate must lie in [0, 1)")
        TraceMode.parse(self.trace_mode)
        needs_teacher = self.velocity_target == "teacher" or (
            self.has_div_losses and self.divergence_source == "teacher"
        )
        if needs_teacher and not self.teacher:
            raise ContractViolation(f"stage {self.name!r}: a teacher source is required by its losses")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["losses"] = list(self.losses)
        return d


@dataclass
class StagePlan:
    stages: list[StageConfig] = field(default_factory=list)

    def index(self, name: str) -> int:
        for i, st in enumerate(self.stages):
            if st.name == name:
                return i
        raise KeyError(name)

    def validate(self) -> None:
        seen: set[str] = set()
        for st in self.stages:
            st.validate()
            if st.name in seen:
                raise ContractViolation(f"duplicate stage name {st.name!r}")
            for ref in (st.warm_start, st.teacher):
                # a bare name must be an earlier stage; anything else is a checkpoint path
                if ref and ref in {s.name for s in self.stages} and ref not in seen:
                    raise ContractViolation(f"stage {st.name!r} references later stage {ref!r}")
            seen.add(st.name)

    def external_paths(self) -> list[str]:
        names = {s.name for s in self.stages}
        return [r for st in self.stages for r in (st.warm_start, st.teacher) if r and r not in names]


class CheckpointSink:
    """Directory holding ``<stage>.ckpt``, ``<stage>_metrics.csv``, ``<stage>_summary.json``."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def checkpoint_path(self, stage: str) -> Path:
        return self.directory / f"{stage}.ckpt"

    def metrics_path(self, stage: str) -> Path:
        return self.directory / f"{stage}_metrics.csv"

    def summary_path(self, stage: str) -> Path:
        return self.directory / f"{stage}_summary.json"

    def resolve(self, ref: str) -> Path:
        """A stage name written to this sink, else a filesystem path."""
        p = self.checkpoint_path(ref)
        if p.exists():
            return p
        return Path(ref)

    def load(self, ref: str, stage: str = "") -> Checkpoint:
        path = self.resolve(ref)
        if not path.exists():
            raise MissingCheckpointError(path, stage)
        return load_checkpoint(path)


@dataclass
class StageResult:
    name: str
    model: JointFlowMapModel
    checkpoint_path: Path
    metrics: list[dict]
    summary: dict


def _fmt(v) -> str:
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def compute_loss_terms(model, stage: StageConfig, density: Density2D, data_rng, probe_rng, teacher=None) -> LossTerms:
    """Sample one batch, split it, and evaluate the stage's active losses."""
    active = set(stage.losses)
    n_pair = 0
    if stage.has_pair_losses:
        n_pair = stage.batch_size - int(round(stage.batch_size * stage.split_ratio))
        if active & {"fm", "div"}:
            n_pair = max(min(n_pair, stage.batch_size - 1), 1)
        else:
            n_pair = stage.batch_size
    n_diag = stage.batch_size - n_pair
    terms = LossTerms(lambda_div=stage.lambda_div)
    div_src = teacher if stage.divergence_source == "teacher" else "self"
    v_teacher = teacher if stage.velocity_target == "teacher" else None

    if n_diag:
        diag = make_interpolant_batch(data_rng, density, n_diag, "uniform-t")
        vm, div = diagonal_losses(model, diag, v_teacher, div_src, stage.trace_mode, probe_rng,
                                  with_div="div" in active)
        if "fm" in active:
            terms.vm = vm
        if "div" in active:
            terms.div = div
    if n_pair:
        mean_flow = bool(active & {"meanflow", "meanflow_div"})
        scheme = "uniform-pairs" if mean_flow else stage.time_scheme
        pairs = make_interpolant_batch(data_rng, density, n_pair, scheme, stage.reverse_fraction)
        if v_teacher is not None and mean_flow:
            pairs = pairs.with_velocity(_teacher_pair_velocity(v_teacher, pairs))
        if active & {"shortcut", "div_sc"}:
            u_sc, d_sc = consistency_losses(model, pairs)
            if "shortcut" in active:
                terms.u_sc = u_sc
            if "div_sc" in active:
                terms.D_sc = d_sc
        if mean_flow:
            mf, mf_div = meanflow_losses(model, pairs, "meanflow_div" in active, div_src, stage.trace_mode, probe_rng)
            if "meanflow" in active:
                terms.mf = mf
            terms.mf_div = mf_div
        if "lagrangian_div" in active:
            terms.lag_div = loss_lagrangian_div(model, pairs, div_src, stage.trace_mode, probe_rng)
    return terms


@torch.no_grad()
def _teacher_pair_velocity(teacher, pairs):
    x, start, _ = pairs.oriented()
    u, _ = teacher(x, start, start)
    return u


def _heldout_error(model, density: Density2D, points: torch.Tensor, ks: Sequence[int]) -> dict[int, float]:
    from .sampling import likelihood_fewstep

    true = density.logpdf(points)
    on = torch.isfinite(true)
    out = {}
    for k in ks:
        lp = likelihood_fewstep(model, points, k).log_density
        out[int(k)] = float((lp[on] - true[on]).abs().mean())
    return out


def _build_model(stage: StageConfig, model_config: dict, streams: RngStreams, sink: CheckpointSink):
    """(model, starting step, warm-start checkpoint or None)."""
    if stage.warm_start:
        ckpt = sink.load(stage.warm_start, stage.name)
        model = ckpt.model
        model.set_div_scale(stage.div_scale)
        return model, ckpt
    seed = streams[f"init:{stage.name}"].integers(0, 2**31 - 1, 1).item()
    model = JointFlowMapModel(**{**model_config, "div_scale": stage.div_scale, "init_seed": int(seed)})
    return model, None


def run_stage(plan: StagePlan, stage_index: int, streams: RngStreams, sink: CheckpointSink,
              density: Density2D, model_config: Optional[dict] = None, log=None) -> StageResult:
    """Run one stage of ``plan`` and persist its outputs into ``sink``."""
    stage = plan.stages[stage_index]
    stage.validate()
    model_config = dict(model_config or {})
    model, warm = _build_model(stage, model_config, streams, sink)
    teacher = None
    if stage.teacher and (stage.velocity_target == "teacher" or
                          (stage.has_div_losses and stage.divergence_source == "teacher")):
        teacher = sink.load(stage.teacher, stage.name).model
        teacher.requires_grad_(False)

    params = list(model.parameters())
    adam = AdamState.zeros_like(params, lr=stage.lr)
    data_rng = streams[f"data:{stage.name}"]
    probe_rng = streams[f"probes:{stage.name}"]
    ema = copy.deepcopy(model) if stage.ema_rate is not None else None
    if ema is not None:
        ema.requires_grad_(False)

    es = stage.early_stopping
    holdout = best_state = None
    best_score, best_step, es_log = math.inf, 0, []
    if es is not None:
        holdout = density.sample(streams[f"holdout:{stage.name}"], es.n_points)

    rows: list[dict] = []
    acc = {k: 0.0 for k in (*TERM_NAMES, "total", "grad_norm")}
    n_acc = 0
    skipped = 0
    max_skipped = 0.01 * stage.iterations
    lr = stage.lr
    t_start = time.perf_counter()

    def monitor(step: int):
        nonlocal best_score, best_step, best_state
        target = ema if ema is not None else model
        errs = _heldout_error(target, density, holdout, es.ks)
        score = max(errs.values())
        es_log.append({"step": step, "score": score, **{f"K{k}": v for k, v in errs.items()}})
        if score < best_score:
            best_score, best_step = score, step
            best_state = copy.deepcopy(target.state_dict())
        if log:
            log(f"[{stage.name}] step {step}: held-out max error {score:.4f}")

    if es is not None:
        monitor(0)

    for step in range(1, stage.iterations + 1):
        lr = lr_schedule(step - 1, stage.lr, stage.decay_start)
        adam.lr = lr
        terms = compute_loss_terms(model, stage, density, data_rng, probe_rng, teacher)
        total = terms.total
        ok = bool(torch.isfinite(torch.as_tensor(total)).all())
        gnorm = math.nan
        if ok:
            grads = grad(total, params)
            gnorm = global_norm(grads)
            try:
                adam_step(params, grads, adam)
            except NonFiniteGradientError:
                ok = False
        if not ok:
            skipped += 1
            if log:
                log(f"[{stage.name}] step {step}: non-finite loss or gradient, step skipped")
            if skipped > max_skipped:
                raise StageError(f"{skipped} non-finite steps exceed 1% of {stage.iterations}", stage.name, step)
            continue
        if ema is not None:
            with torch.no_grad():
                for pe, p in zip(ema.parameters(), params):
                    pe.mul_(stage.ema_rate).add_(p, alpha=1.0 - stage.ema_rate)
        vals = terms.values()
        for k in TERM_NAMES:
            acc[k] += vals[k]
        acc["total"] += vals["total"]
        acc["grad_norm"] += gnorm
        n_acc += 1
        if step % stage.log_every == 0 or step == stage.iterations:
            row = {"step": step, **{k: acc[k] / max(n_acc, 1) for k in acc}, "lr": lr, "skipped": skipped}
            rows.append(row)
            if log:
                log(f"[{stage.name}] step {step}: total {row['total']:.5f}")
            acc = {k: 0.0 for k in acc}
            n_acc = 0
        if es is not None and step % es.every == 0:
            monitor(step)

    output = ema if ema is not None else model
    if es is not None and stage.iterations % es.every != 0 and stage.iterations > 0:
        monitor(stage.iterations)
    if best_state is not None:
        output.load_state_dict(best_state)
    output.requires_grad_(True)

    div_trained = stage.has_div_losses or bool(warm is not None and warm.div_head_trained)
    ckpt_path = sink.checkpoint_path(stage.name)
    save_checkpoint(ckpt_path, Checkpoint(
        model=output, stage=stage.name, step=stage.iterations, div_head_trained=div_trained,
        adam=adam if stage.iterations > 0 else (warm.adam if warm is not None else None),
        rng={k: streams[k].get_state() for k in (f"data:{stage.name}", f"probes:{stage.name}")},
        extra={"stage_config": stage.to_dict(), "density": density.to_dict()},
    ))
    with open(sink.metrics_path(stage.name), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
    summary = {
        "stage": stage.name,
        "iterations": stage.iterations,
        "skipped_steps": skipped,
        "final_lr": lr,
        "final_metrics": rows[-1] if rows else None,
        "early_stopping": {"best_step": best_step, "best_score": best_score, "log": es_log} if es else None,
        "div_head_trained": div_trained,
        "wall_clock_seconds": time.perf_counter() - t_start,
        "checkpoint": str(ckpt_path),
    }
    with open(sink.summary_path(stage.name), "w") as fh:
        json.dump(summary, fh, indent=2)
    return StageResult(stage.name, output, ckpt_path, rows, summary)


def run_plan(plan: StagePlan, density: Density2D, seed: int, out_dir, model_config: Optional[dict] = None,
             log=None, only: Optional[Sequence[str]] = None) -> dict[str, StageResult]:
    """Run every stage (or the named subset) in order."""
    plan.validate()
    sink = CheckpointSink(out_dir)
    streams = RngStreams(seed)
    results = {}
    for i, st in enumerate(plan.stages):
        if only is not None and st.name not in only:
            continue
        results[st.name] = run_stage(plan, i, streams, sink, density, model_config, log)
    return results


__all__ = [
    "CheckpointError", "CheckpointSink", "EarlyStopping", "LOSS_NAMES", "MissingCheckpointError",
    "StageConfig", "StageError", "StagePlan", "StageResult", "compute_loss_terms", "run_plan", "run_stage",
]
