"""Differentiation primitives, trace estimators, Adam and the LR schedule.

Reverse mode is torch autograd; forward mode is torch's dual-tensor JVP
(``torch.func.jvp``).  Everything runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import Tensor

from .rng import RngStream

DTYPE = torch.float64

TensorFn = Callable[[Tensor], Tensor]


class ContractViolation(ValueError):
    """An operation was called outside its precondition."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by :func:`adam_step` when a gradient contains NaN or inf."""


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[Tensor]:
    """d loss / d param for every param; unreached params get zeros."""
    if loss.numel() != 1:
        raise ContractViolation(f"loss must be scalar, got shape {tuple(loss.shape)}")
    params = list(params)
    live = [p for p in params if p.requires_grad]
    if loss.requires_grad and live:
        gs = torch.autograd.grad(loss.reshape(()), live, allow_unused=True)
    else:
        gs = [None] * len(live)
    by_id = {id(p): g for p, g in zip(live, gs)}
    out = []
    for p in params:
        g = by_id.get(id(p))
        out.append(torch.zeros_like(p) if g is None else g)
    return out


def jvp(fn: TensorFn, x: Tensor, tangent: Tensor) -> tuple[Tensor, Tensor]:
    """(fn(x), J_fn(x) @ tangent) from a single forward-mode pass."""
    if tangent.shape != x.shape:
        raise ContractViolation(
            f"tangent shape {tuple(tangent.shape)} != input shape {tuple(x.shape)}"
        )
    return torch.func.jvp(fn, (x,), (tangent,))


def _check_square(fn: TensorFn, x: Tensor) -> Tensor:
    y = fn(x)
    if y.shape != x.shape:
        raise ContractViolation(
            f"trace needs a square Jacobian: input {tuple(x.shape)}, output {tuple(y.shape)}"
        )
    return y


def jacobian_trace_exact(fn: TensorFn, x: Tensor, max_dim: int = 16) -> Tensor:
    """Tr(dfn/dx) from ``d`` JVPs with basis tangents.

    ``x`` is ``(d,)`` or a batch ``(..., d)``; in the batched case ``fn`` must
    act row-wise and one trace is returned per row.
    """
    d = x.shape[-1]
    if d > max_dim:
        raise ContractViolation(f"exact trace limited to d <= {max_dim}, got {d}")
    total = None
    for i in range(d):
        e = torch.zeros_like(x)
        e[..., i] = 1.0
        y, jv = jvp(fn, x, e)
        if y.shape != x.shape:
            raise ContractViolation(
                f"trace needs a square Jacobian: input {tuple(x.shape)}, output {tuple(y.shape)}"
            )
        term = jv[..., i]
        total = term if total is None else total + term
    return total


def sample_probes(rng: RngStream, n: int, shape: Sequence[int], kind: str = "rademacher") -> Tensor:
    if kind == "rademacher":
        return rng.rademacher(n, *shape)
    if kind == "gaussian":
        return rng.normal(n, *shape)
    raise ContractViolation(f"unknown probe distribution {kind!r}")


def hutchinson_trace(
    fn: TensorFn,
    x: Tensor,
    n_probes: int,
    rng: RngStream,
    kind: str = "rademacher",
) -> Tensor:
    """Mean over probes of eps^T J eps; unbiased for the exact trace."""
    if n_probes < 1:
        raise ContractViolation("n_probes must be >= 1")
    _check_square(fn, x)
    probes = sample_probes(rng, n_probes, x.shape, kind)
    acc = torch.zeros(x.shape[:-1], dtype=x.dtype)
    for eps in probes:
        _, jv = jvp(fn, x, eps)
        acc = acc + (eps * jv).sum(-1)
    return acc / n_probes


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators for a list of tensors."""

    exp_avg: list[Tensor]
    exp_avg_sq: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(
            exp_avg=[torch.zeros_like(p) for p in params],
            exp_avg_sq=[torch.zeros_like(p) for p in params],
            **hyper,
        )

    def hyperparameters(self) -> dict[str, float]:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(
    params: Sequence[Tensor], grads: Sequence[Tensor], state: AdamState
) -> tuple[list[Tensor], AdamState]:
    """One Adam update, applied in place to ``params`` and ``state``.

    Raises :class:`NonFiniteGradientError` before touching anything if a
    gradient is not finite.
    """
    params, grads = list(params), list(grads)
    if not (len(params) == len(grads) == len(state.exp_avg) == len(state.exp_avg_sq)):
        raise ContractViolation("params, grads and Adam state differ in length")
    for p, g, m in zip(params, grads, state.exp_avg):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractViolation(
                f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}, state {tuple(m.shape)}"
            )
    for g in grads:
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradientError("non-finite gradient")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    step_size = state.lr / bc1
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-step_size)
    return params, state


def lr_schedule(step: int, base_lr: float, decay_start: int) -> float:
    """Constant until ``decay_start``, then ``base_lr * sqrt(decay_start / step)``."""
    if base_lr <= 0:
        raise ContractViolation("base_lr must be positive")
    if step <= decay_start:
        return base_lr
    return base_lr * math.sqrt(decay_start / step)


def global_norm(tensors: Sequence[Tensor]) -> float:
    return math.sqrt(sum(float((t * t).sum()) for t in tensors))
