"""Run configuration: one YAML document with density, model, stages, evaluation and seed.

Validation errors carry the source line of the offending key so the CLI can
print ``file:line: message``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .autodiff import ContractViolation
from .densities import make_density
from .model import ACTIVATIONS, TraceMode
from .training import EarlyStopping, StageConfig, StagePlan


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, source: str = "<config>"):
        self.line = line
        self.source = source
        self.message = message
        super().__init__(f"{source}:{line}: {message}" if line else f"{source}: {message}")


@dataclass
class ModelConfig:
    dim: int = 2
    width: int = 256
    depth: int = 4
    activation: str = "gelu"
    div_hidden: int = 64
    div_activation: str = "silu"
    time_embedding: str = "raw"
    n_frequencies: int = 8
    zero_init_heads: bool = True

    def validate(self) -> None:
        if self.dim < 1 or self.width < 1 or self.depth < 1 or self.div_hidden < 1:
            raise ContractViolation("model sizes must be >= 1")
        for a in (self.activation, self.div_activation):
            if a not in ACTIVATIONS:
                raise ContractViolation(f"unknown activation {a!r}; choose from {sorted(ACTIVATIONS)}")
        if self.time_embedding not in ("raw", "sinusoidal"):
            raise ContractViolation("time_embedding is 'raw' or 'sinusoidal'")


@dataclass
class GuidanceEval:
    n_samples: int = 1024
    steps: int = 1
    lr: Optional[float] = None
    K_samp: int = 1
    n_reference: int = 4096


@dataclass
class EvalConfig:
    ks: tuple[int, ...] = (1, 2, 4, 8)
    n_samples: int = 10000
    grid_resolution: int = 128
    grid_bounds: tuple[float, float] = (-4.0, 4.0)
    ref_steps: int = 200
    trace_mode: str = "exact"
    teacher_stage: str = "teacher"
    model_stage: str = "f2d2"
    residual_points: int = 1000
    guidance: GuidanceEval = field(default_factory=GuidanceEval)

    def validate(self) -> None:
        self.ks = tuple(int(k) for k in self.ks)
        if not self.ks or min(self.ks) < 1:
            raise ContractViolation("evaluation K values must be >= 1")
        if self.grid_resolution < 2:
            raise ContractViolation("grid_resolution must be >= 2")
        if self.n_samples < 1 or self.ref_steps < 1:
            raise ContractViolation("n_samples and ref_steps must be >= 1")
        TraceMode.parse(self.trace_mode)


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/checkerboard"
    density: dict = field(default_factory=lambda: {"kind": "checkerboard"})
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: list[StageConfig] = field(default_factory=list)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    source: str = "<config>"

    @property
    def plan(self) -> StagePlan:
        return StagePlan(list(self.stages))

    def make_density(self):
        return make_density(self.density)

    def model_kwargs(self) -> dict:
        return dataclasses.asdict(self.model)

    def out_path(self) -> Path:
        p = Path(self.out_dir)
        if not p.is_absolute() and self.source not in ("<config>", "<string>"):
            p = Path(self.source).resolve().parent / p
        return p


def default_stages() -> list[StageConfig]:
    """Teacher, Shortcut-Distill, then joint fine-tuning with early stopping."""
    return [
        StageConfig(name="teacher", losses=("fm",), iterations=20000, batch_size=768, split_ratio=1.0,
                    lr=2e-3, decay_start=2000, velocity_target="data", ema_rate=0.999),
        StageConfig(name="distill", losses=("fm", "shortcut"), iterations=10000, batch_size=512,
                    split_ratio=0.75, lr=1e-3, decay_start=2000, velocity_target="teacher",
                    warm_start="teacher", teacher="teacher"),
        StageConfig(name="f2d2", losses=("fm", "shortcut", "div", "div_sc"), iterations=3000,
                    batch_size=512, split_ratio=0.75, lr=1e-3, decay_start=500,
                    velocity_target="teacher", divergence_source="teacher", warm_start="distill",
                    teacher="teacher", early_stopping=EarlyStopping(every=250, n_points=2000)),
    ]


# ---- parsing with line anchors ----

def _line_index(node, path=(), out=None) -> dict:
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value
            out[path + (key,)] = k.start_mark.line + 1
            _line_index(v, path + (key,), out)
            out[path + (key,)] = k.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_index(v, path + (i,), out)
    return out


class _Ctx:
    def __init__(self, lines: dict, source: str):
        self.lines = lines
        self.source = source

    def line(self, path) -> Optional[int]:
        path = tuple(path)
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path)

    def fail(self, path, msg: str):
        where = ".".join(str(p) for p in path)
        raise ConfigError(f"{where}: {msg}" if where else msg, self.line(path), self.source)


def _coerce(ctx: _Ctx, path, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            ctx.fail(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            ctx.fail(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            ctx.fail(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            ctx.fail(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            ctx.fail(path, f"expected a list, got {value!r}")
        return tuple(value)
    return value


def _build(ctx: _Ctx, cls, raw, path):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        ctx.fail(path, f"expected a mapping for {cls.__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known or key == "source":
            ctx.fail(path + (key,), f"unknown key; allowed: {sorted(k for k in known if k != 'source')}")
        f = known[key]
        if f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        else:
            default = None
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(ctx, type(default), value, path + (key,))
        elif key == "early_stopping":
            kwargs[key] = None if value is None else _build(ctx, EarlyStopping, value, path + (key,))
        elif key in ("lr", "ema_rate") and value is not None:
            kwargs[key] = _coerce(ctx, path + (key,), value, 0.0)
        elif key in ("warm_start", "teacher") and value is not None:
            kwargs[key] = _coerce(ctx, path + (key,), value, "")
        else:
            kwargs[key] = _coerce(ctx, path + (key,), value, default)
    try:
        return cls(**kwargs)
    except (TypeError, ContractViolation, ValueError) as exc:
        ctx.fail(path, str(exc))


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise ConfigError(f"YAML syntax error: {exc.problem}", line, source) from exc
    ctx = _Ctx(_line_index(node) if node is not None else {}, source)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        ctx.fail((), "top level must be a mapping")
    raw = dict(raw)
    stages_raw = raw.pop("stages", None)
    cfg = _build(ctx, RunConfig, raw, ())
    cfg.source = source
    if stages_raw is None:
        cfg.stages = default_stages()
    else:
        if not isinstance(stages_raw, list) or not stages_raw:
            ctx.fail(("stages",), "expected a non-empty list of stages")
        cfg.stages = [_build(ctx, StageConfig, st, ("stages", i)) for i, st in enumerate(stages_raw)]
    validate_config(cfg, ctx)
    return cfg


def validate_config(cfg: RunConfig, ctx: Optional[_Ctx] = None) -> None:
    ctx = ctx or _Ctx({}, cfg.source)
    try:
        cfg.make_density()
    except (ValueError, KeyError, TypeError) as exc:
        ctx.fail(("density",), f"invalid density: {exc}")
    for name, sub in (("model", cfg.model), ("evaluation", cfg.evaluation)):
        try:
            sub.validate()
        except ContractViolation as exc:
            ctx.fail((name,), str(exc))
    names = [s.name for s in cfg.stages]
    for i, st in enumerate(cfg.stages):
        try:
            st.validate()
        except ContractViolation as exc:
            ctx.fail(("stages", i), str(exc))
        for key in ("warm_start", "teacher"):
            ref = getattr(st, key)
            if not ref:
                continue
            if ref in names:
                if names.index(ref) >= i:
                    ctx.fail(("stages", i, key), f"{ref!r} is not an earlier stage")
            elif not _resolve_path(cfg, ref).exists():
                ctx.fail(("stages", i, key), f"checkpoint not found: {ref}")


def _resolve_path(cfg: RunConfig, ref: str) -> Path:
    p = Path(ref)
    if not p.is_absolute() and cfg.source not in ("<config>", "<string>"):
        p = Path(cfg.source).resolve().parent / p
    return p


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, str(path)) from exc
    cfg = parse_config(text, str(path))
    for st in cfg.stages:
        for key in ("warm_start", "teacher"):
            ref = getattr(st, key)
            if ref and ref not in [s.name for s in cfg.stages]:
                setattr(st, key, str(_resolve_path(cfg, ref)))
    return cfg


def dump_config(cfg: RunConfig) -> str:
    d = dataclasses.asdict(cfg)
    d.pop("source", None)
    for st in d["stages"]:
        st["losses"] = list(st["losses"])
        if st.get("early_stopping"):
            st["early_stopping"]["ks"] = list(st["early_stopping"]["ks"])
    d["evaluation"]["ks"] = list(d["evaluation"]["ks"])
    d["evaluation"]["grid_bounds"] = list(d["evaluation"]["grid_bounds"])
    return yaml.safe_dump(d, sort_keys=False)
