"""Few-step sampling and likelihood, reference ODE likelihood, and self-guidance."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import torch
from torch import Tensor

from .autodiff import DTYPE, AdamState, ContractViolation, adam_step, grad
from .densities import gaussian_logpdf
from .model import ModelCallCounter, TraceMode, divergence
from .rng import RngStream


class NonFiniteStateError(FloatingPointError):
    """An integration produced NaN/inf; carries the step index and partial report."""

    def __init__(self, message: str, step: int, partial: Optional["LikelihoodReport"] = None):
        super().__init__(message)
        self.step = step
        self.partial = partial


def nats_to_bpd(nll_nats, d: int):
    if d < 1:
        raise ContractViolation("dimension must be >= 1")
    return nll_nats / (d * math.log(2.0))


@dataclass
class LikelihoodReport:
    """Per-sample log-densities from one backward integration.

    ``log_density = gaussian_logpdf(x0_hat) + sum(increments)``.
    """

    log_density: Tensor
    x0_hat: Tensor
    nfe: int
    per_step: list[tuple[float, float, Tensor]] = field(default_factory=list)
    mode: str = "fewstep-head"

    @property
    def dim(self) -> int:
        return self.x0_hat.shape[-1]

    @property
    def bpd(self) -> Tensor:
        return nats_to_bpd(-self.log_density, self.dim)

    def records(self) -> list[dict]:
        rows = []
        bpd = self.bpd
        for i in range(self.log_density.shape[0]):
            rows.append({
                "log_density": float(self.log_density[i]),
                "bpd": float(bpd[i]),
                "nfe": self.nfe,
                "mode": self.mode,
                "per_step": [[t, s, float(inc[i])] for t, s, inc in self.per_step],
            })
        return rows

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.records():
                fh.write(json.dumps(row) + "\n")


def _check_finite(x: Tensor, step: int, what: str, partial=None) -> None:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteStateError(f"non-finite {what} at step {step}", step, partial)


@torch.no_grad()
def euler_sample(model, x0: Tensor, K: int) -> Tensor:
    """Trajectory ``(K + 1, B, d)`` of ``x_{i+1} = Phi(x_i, t_i, t_{i+1})`` on a uniform grid."""
    if K < 1:
        raise ContractViolation("K must be >= 1")
    ts = torch.linspace(0.0, 1.0, K + 1, dtype=DTYPE)
    traj = [x0]
    x = x0
    for i in range(K):
        t, s = ts[i], ts[i + 1]
        u, _ = model(x, t, s)
        x = x + (s - t) * u
        _check_finite(x, i, "sample state")
        traj.append(x)
    return torch.stack(traj)


@torch.no_grad()
def likelihood_fewstep(model, x1: Tensor, K: int) -> LikelihoodReport:
    """log p_1(x1) from ``K`` joint flow-map steps taken from t=1 back to t=0."""
    if K < 1:
        raise ContractViolation("K must be >= 1")
    ts = torch.linspace(1.0, 0.0, K + 1, dtype=DTYPE)
    x = x1
    per_step = []
    total = torch.zeros(x1.shape[0], dtype=DTYPE)
    with ModelCallCounter(model) as calls:
        for i in range(K):
            t, s = ts[i], ts[i + 1]
            u, D = model(x, t, s)
            inc = (t - s) * D
            x = x + (s - t) * u
            total = total + inc
            per_step.append((float(t), float(s), inc))
            if not (bool(torch.isfinite(x).all()) and bool(torch.isfinite(inc).all())):
                partial = LikelihoodReport(total, x, model.nfe - calls._start, per_step)
                raise NonFiniteStateError(f"non-finite state at step {i}", i, partial)
    return LikelihoodReport(
        log_density=gaussian_logpdf(x) + total, x0_hat=x, nfe=calls.count,
        per_step=per_step, mode="fewstep-head",
    )


@torch.no_grad()
def likelihood_reference(
    field,
    x1: Tensor,
    n_steps: int,
    trace_mode: Union[str, TraceMode] = "exact",
    rng: Optional[RngStream] = None,
    integrator: str = "euler",
) -> LikelihoodReport:
    """Backward integration of the coupled (state, log-density) ODE.

    ``field`` is any flow-map surface; its diagonal ``u(x, t, t)`` is the
    velocity.  Divergence per step is exact or Hutchinson per ``trace_mode``.
    """
    if n_steps < 1:
        raise ContractViolation("n_steps must be >= 1")
    if integrator not in ("euler", "midpoint"):
        raise ContractViolation(f"unknown integrator {integrator!r}")
    ts = torch.linspace(1.0, 0.0, n_steps + 1, dtype=DTYPE)
    x = x1
    per_step = []
    total = torch.zeros(x1.shape[0], dtype=DTYPE)
    with ModelCallCounter(field) as calls:
        for i in range(n_steps):
            t, s = ts[i], ts[i + 1]
            h = s - t
            v, _, div = divergence(field, x, t, trace_mode, rng)
            if integrator == "midpoint":
                x_mid = x + 0.5 * h * v
                v, _, div = divergence(field, x_mid, t + 0.5 * h, trace_mode, rng)
            inc = h * div
            x = x + h * v
            total = total + inc
            per_step.append((float(t), float(s), inc))
            if not (bool(torch.isfinite(x).all()) and bool(torch.isfinite(inc).all())):
                partial = LikelihoodReport(total, x, field.nfe - calls._start, per_step, "reference-integration")
                raise NonFiniteStateError(f"non-finite state at step {i}", i, partial)
    return LikelihoodReport(
        log_density=gaussian_logpdf(x) + total, x0_hat=x, nfe=calls.count,
        per_step=per_step, mode="reference-integration",
    )


@dataclass
class GuidanceConfig:
    """Test-time Adam on the initial noise against the one-step likelihood surrogate.

    ``lr=None`` picks 1e-3 for one-step sampling and 5e-3 otherwise.
    """

    steps: int = 1
    lr: Optional[float] = None
    K_samp: int = 1

    def __post_init__(self):
        if self.steps < 0:
            raise ContractViolation("guidance steps must be >= 0")
        if self.K_samp < 1:
            raise ContractViolation("K_samp must be >= 1")
        if self.lr is not None and self.lr <= 0:
            raise ContractViolation("guidance lr must be positive")

    @property
    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-3 if self.K_samp == 1 else 5e-3


@dataclass
class GuidedSample:
    x1: Tensor
    x0_initial: Tensor
    x0: Tensor
    trace: Tensor  # (steps + 1, B): surrogate NLL before each update and after the last


def surrogate_nll(model, x0: Tensor) -> Tensor:
    """-log p0(x0) - D(x0, 0, 1): negative one-step log-likelihood of the sample."""
    _, D = model(x0, 0.0, 1.0)
    return -gaussian_logpdf(x0) - D


def self_guided_sample(model, rng: RngStream, cfg: GuidanceConfig, n: int, dim: int = 2) -> GuidedSample:
    x0 = rng.normal(n, dim)
    x_init = x0.clone()
    state = AdamState.zeros_like([x0], lr=cfg.resolved_lr)
    trace = []
    for _ in range(cfg.steps):
        x = x0.detach().requires_grad_(True)
        nll = surrogate_nll(model, x)
        trace.append(nll.detach())
        (g,) = grad(nll.sum(), [x])
        adam_step([x0], [g], state)
    with torch.no_grad():
        if cfg.steps > 0:
            trace.append(surrogate_nll(model, x0))
        x1 = euler_sample(model, x0, cfg.K_samp)[-1]
    trace_t = torch.stack(trace) if trace else torch.zeros(0, n, dtype=DTYPE)
    return GuidedSample(x1=x1, x0_initial=x_init, x0=x0, trace=trace_t)
