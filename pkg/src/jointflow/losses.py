"""Training objectives for flow maps and joint (velocity + divergence) flow maps.

All self-distillation targets are computed under ``torch.no_grad()``, which
is the stop-gradient: only the student branch carries parameter gradients.
Divergence quantities are compared in the model's scaled units
(``div_scale * D``); the model unscales at read-out.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional, Union

import torch
from torch import Tensor

from .autodiff import ContractViolation
from .densities import InterpolantBatch
from .model import TraceMode, divergence
from .rng import RngStream


@dataclass
class LossTerms:
    """Per-step loss values.

    ``total = vm + u_sc + mf + lambda_div * (div + D_sc + mf_div + lag_div)``;
    the MeanFlow and Lagrangian slots are zero unless those objectives run.
    """

    vm: Tensor | float = 0.0
    u_sc: Tensor | float = 0.0
    div: Tensor | float = 0.0
    D_sc: Tensor | float = 0.0
    mf: Tensor | float = 0.0
    mf_div: Tensor | float = 0.0
    lag_div: Tensor | float = 0.0
    lambda_div: float = 1.0

    @property
    def total(self):
        return self.vm + self.u_sc + self.mf + self.lambda_div * (
            self.div + self.D_sc + self.mf_div + self.lag_div
        )

    def values(self) -> dict[str, float]:
        def num(v) -> float:
            return float(v.detach()) if isinstance(v, Tensor) else float(v)

        out = {f.name: num(getattr(self, f.name)) for f in fields(self) if f.name != "lambda_div"}
        out["total"] = num(self.total)
        return out


TERM_NAMES = ("vm", "u_sc", "div", "D_sc", "mf", "mf_div", "lag_div")

VelocitySource = Union[str, object]


def _scale(model) -> float:
    return float(getattr(model, "div_scale", 1.0))


def _scaled(model, x, t, s):
    if hasattr(model, "forward_scaled"):
        return model.forward_scaled(x, t, s)
    return model(x, t, s)


def _sqnorm(a: Tensor) -> Tensor:
    return (a * a).sum(-1) if a.dim() > 1 else a * a


def _source(model, velocity_source: VelocitySource):
    if velocity_source is None or velocity_source == "self":
        return model
    if isinstance(velocity_source, str):
        raise ContractViolation(f"unknown velocity source {velocity_source!r}")
    return velocity_source


@torch.no_grad()
def teacher_velocity(teacher, x: Tensor, t: Tensor) -> Tensor:
    u, _ = teacher(x, t, t)
    return u


def loss_flow_matching(model, batch: InterpolantBatch, teacher=None) -> Tensor:
    """mean ||u(x_t, t, t) - target||^2; target is x1 - x0 or the teacher velocity."""
    target = batch.v_target if teacher is None else teacher_velocity(teacher, batch.x_t, batch.t)
    u, _ = _scaled(model, batch.x_t, batch.t, batch.t)
    return _sqnorm(u - target).mean()


@torch.no_grad()
def midpoint_targets(model, x: Tensor, start: Tensor, end: Tensor) -> tuple[Tensor, Tensor]:
    """Two half-steps through the midpoint; returns averaged (u, scaled D)."""
    r = 0.5 * (start + end)
    u1, h1 = _scaled(model, x, start, r)
    x_r = x + (r - start).unsqueeze(-1) * u1
    u2, h2 = _scaled(model, x_r, r, end)
    return 0.5 * (u1 + u2), 0.5 * (h1 + h2)


def consistency_losses(model, batch: InterpolantBatch) -> tuple[Tensor, Tensor]:
    """(velocity consistency, divergence consistency) sharing one student pass."""
    if batch.s is None:
        raise ContractViolation("consistency losses need (t, s) pairs")
    x, start, end = batch.oriented()
    u_tgt, h_tgt = midpoint_targets(model, x, start, end)
    u, h = _scaled(model, x, start, end)
    return _sqnorm(u - u_tgt).mean(), ((h - h_tgt) ** 2).mean()


def loss_shortcut_consistency(model, batch: InterpolantBatch) -> Tensor:
    return consistency_losses(model, batch)[0]


def loss_div_consistency(model, batch: InterpolantBatch) -> Tensor:
    return consistency_losses(model, batch)[1]


@torch.no_grad()
def divergence_target(source, x: Tensor, t: Tensor, trace_mode, rng: Optional[RngStream]):
    """(velocity, -div) of the diagonal field of ``source`` at ``(x, t)``."""
    u, _, div = divergence(source, x, t, trace_mode, rng)
    return u, -div


def diagonal_losses(
    model,
    batch: InterpolantBatch,
    teacher=None,
    divergence_source: VelocitySource = "self",
    trace_mode: Union[str, TraceMode] = "exact",
    rng: Optional[RngStream] = None,
    with_div: bool = True,
) -> tuple[Tensor, Tensor]:
    """(velocity matching, divergence matching) from one student pass at s = t.

    When the divergence source is the teacher, its velocity comes out of the
    same forward-mode pass and is reused as the matching target.
    """
    scale = _scale(model)
    v_tgt = batch.v_target
    div_tgt = None
    if with_div:
        src = _source(model, divergence_source)
        v_src, div_tgt = divergence_target(src, batch.x_t, batch.t, trace_mode, rng)
        if teacher is not None and src is teacher:
            v_tgt = v_src
    if teacher is not None and v_tgt is batch.v_target:
        v_tgt = teacher_velocity(teacher, batch.x_t, batch.t)
    u, h = _scaled(model, batch.x_t, batch.t, batch.t)
    vm = _sqnorm(u - v_tgt).mean()
    if not with_div:
        return vm, torch.zeros(())
    return vm, ((h - scale * div_tgt) ** 2).mean()


def loss_div_match(
    model,
    batch: InterpolantBatch,
    velocity_source: VelocitySource = "self",
    trace_mode: Union[str, TraceMode] = "exact",
    scale: Optional[float] = None,
    rng: Optional[RngStream] = None,
) -> Tensor:
    """mean (scaled D(x_t, t, t) - scale * stopgrad(-div v_source(x_t, t)))^2."""
    if scale is not None and float(scale) != _scale(model):
        raise ContractViolation(f"scale {scale} differs from the model's div_scale {_scale(model)}")
    src = _source(model, velocity_source)
    _, neg_div = divergence_target(src, batch.x_t, batch.t, trace_mode, rng)
    _, h = _scaled(model, batch.x_t, batch.t, batch.t)
    return ((h - _scale(model) * neg_div) ** 2).mean()


def meanflow_losses(
    model,
    batch: InterpolantBatch,
    with_div: bool = False,
    divergence_source: VelocitySource = "self",
    trace_mode: Union[str, TraceMode] = "exact",
    rng: Optional[RngStream] = None,
) -> tuple[Tensor, Tensor]:
    """(MeanFlow velocity loss, MeanFlow divergence loss).

    One forward-mode pass in direction ``(v, dt=1, ds=0)`` gives the total
    time derivatives of both heads at fixed ``s``.  Reversed rows start at
    ``x_s``; ``x1 - x0`` is the conditional velocity anywhere on the path.
    """
    x, t, s = batch.oriented()
    v = batch.v_target
    scale = _scale(model)
    gap = s - t
    with torch.no_grad():
        ones = torch.ones_like(t)
        _, _, du, dD = model.jvp(x, t, s, v, vt=ones, vs=torch.zeros_like(t))
        u_tgt = gap.unsqueeze(-1) * du + v
        if with_div:
            src = _source(model, divergence_source)
            _, neg_div = divergence_target(src, x, t, trace_mode, rng)
            h_tgt = scale * (gap * dD + neg_div)
    u, h = _scaled(model, x, t, s)
    mf = _sqnorm(u - u_tgt).mean()
    if not with_div:
        return mf, torch.zeros(())
    return mf, ((h - h_tgt) ** 2).mean()


def loss_meanflow(model, batch: InterpolantBatch) -> Tensor:
    return meanflow_losses(model, batch)[0]


def loss_meanflow_div(
    model,
    batch: InterpolantBatch,
    trace_mode: Union[str, TraceMode] = "exact",
    scale: Optional[float] = None,
    velocity_source: VelocitySource = "self",
    rng: Optional[RngStream] = None,
) -> Tensor:
    if scale is not None and float(scale) != _scale(model):
        raise ContractViolation(f"scale {scale} differs from the model's div_scale {_scale(model)}")
    return meanflow_losses(model, batch, True, velocity_source, trace_mode, rng)[1]


def loss_lagrangian_div(
    model,
    batch: InterpolantBatch,
    velocity_source: VelocitySource = "self",
    trace_mode: Union[str, TraceMode] = "exact",
    rng: Optional[RngStream] = None,
) -> Tensor:
    """Lagrangian likelihood objective at the transported point.

    target = -div u(Phi(x, t, s), s, s) - (s - t) dD/ds(Phi(x, t, s), t, s)
    """
    if batch.s is None:
        raise ContractViolation("the Lagrangian loss needs (t, s) pairs")
    x, start, end = batch.oriented()
    scale = _scale(model)
    gap = end - start
    with torch.no_grad():
        u, _ = _scaled(model, x, start, end)
        y = x + gap.unsqueeze(-1) * u
        src = _source(model, velocity_source)
        _, neg_div = divergence_target(src, y, end, trace_mode, rng)
        zeros = torch.zeros_like(y)
        _, _, _, dD_ds = model.jvp(y, start, end, zeros, vt=torch.zeros_like(start), vs=torch.ones_like(start))
        h_tgt = scale * (neg_div - gap * dD_ds)
    _, h = _scaled(model, x, start, end)
    return ((h - h_tgt) ** 2).mean()
