"""Synthetic 2D densities with exact samplers and log-densities, and interpolant batches."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Optional

import torch
from torch import Tensor

from .autodiff import DTYPE, ContractViolation
from .rng import RngStream

LOG_2PI = math.log(2.0 * math.pi)

GRID_UNIT = 128
SHORTCUT_LENGTHS = tuple(2.0**-k for k in range(8))
TIME_SCHEMES = ("uniform-t", "uniform-pairs", "discrete-grid")


def gaussian_logpdf(p: Tensor) -> Tensor:
    """Standard normal log-density over the last axis."""
    d = p.shape[-1]
    return -0.5 * d * LOG_2PI - 0.5 * (p * p).sum(-1)


class Density2D:
    kind: str = ""
    dim: int = 2

    def sample(self, rng: RngStream, n: int) -> Tensor:
        raise NotImplementedError

    def logpdf(self, p: Tensor) -> Tensor:
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


class Checkerboard(Density2D):
    """Uniform over the even cells of a ``cells x cells`` grid tiling ``[-half, half]^2``.

    Cell ``(i, j)`` covers ``[-half + i*w, -half + (i+1)*w) x [...]`` and is
    occupied iff ``i + j`` is even.  Defaults give 8 cells of area 4.
    """

    kind = "checkerboard"

    def __init__(self, cells: int = 4, half_width: float = 4.0):
        self.cells = int(cells)
        self.half_width = float(half_width)
        self.cell_width = 2.0 * self.half_width / self.cells
        occupied = [(i, j) for i in range(self.cells) for j in range(self.cells) if (i + j) % 2 == 0]
        self.occupied = torch.tensor(occupied, dtype=DTYPE)
        self.support_area = len(occupied) * self.cell_width**2
        self.log_density = -math.log(self.support_area)

    def sample(self, rng: RngStream, n: int) -> Tensor:
        if n < 1:
            raise ContractViolation("n must be >= 1")
        idx = rng.integers(0, len(self.occupied), n)
        corner = -self.half_width + self.cell_width * self.occupied[idx]
        return corner + self.cell_width * rng.uniform(n, 2)

    def cell_index(self, p: Tensor) -> Tensor:
        return torch.floor((p + self.half_width) / self.cell_width)

    def logpdf(self, p: Tensor) -> Tensor:
        ij = self.cell_index(p)
        inside = ((ij >= 0) & (ij < self.cells)).all(-1)
        even = torch.remainder(ij.sum(-1), 2) == 0
        on = inside & even & torch.isfinite(p).all(-1)
        out = torch.full(p.shape[:-1], -math.inf, dtype=DTYPE)
        out[on] = self.log_density
        return out

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "cells": self.cells, "half_width": self.half_width}


class StandardGaussian(Density2D):
    kind = "standard-gaussian"

    def __init__(self, dim: int = 2):
        self.dim = int(dim)

    def sample(self, rng: RngStream, n: int) -> Tensor:
        return rng.normal(n, self.dim)

    def logpdf(self, p: Tensor) -> Tensor:
        return gaussian_logpdf(p)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "dim": self.dim}


class GaussianMixture(Density2D):
    """Mixture of full-covariance Gaussians."""

    kind = "gaussian-mixture"

    def __init__(self, means, covariances=None, weights=None):
        self.means = torch.as_tensor(means, dtype=DTYPE)
        k, self.dim = self.means.shape
        if covariances is None:
            covariances = [torch.eye(self.dim, dtype=DTYPE).tolist()] * k
        self.covariances = torch.as_tensor(covariances, dtype=DTYPE)
        w = torch.full((k,), 1.0 / k, dtype=DTYPE) if weights is None else torch.as_tensor(weights, dtype=DTYPE)
        self.weights = w / w.sum()
        self.chol = torch.linalg.cholesky(self.covariances)
        self._logdet = 2.0 * torch.log(torch.diagonal(self.chol, dim1=-2, dim2=-1)).sum(-1)

    def sample(self, rng: RngStream, n: int) -> Tensor:
        u = rng.uniform(n)
        comp = torch.searchsorted(torch.cumsum(self.weights, 0), u).clamp_max(len(self.weights) - 1)
        eps = rng.normal(n, self.dim)
        return self.means[comp] + torch.einsum("nij,nj->ni", self.chol[comp], eps)

    def logpdf(self, p: Tensor) -> Tensor:
        diff = p.unsqueeze(-2) - self.means  # (..., k, d)
        sol = torch.linalg.solve_triangular(
            self.chol, diff.unsqueeze(-1), upper=False
        ).squeeze(-1)
        maha = (sol * sol).sum(-1)
        comp = -0.5 * (self.dim * LOG_2PI + self._logdet + maha) + torch.log(self.weights)
        return torch.logsumexp(comp, dim=-1)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "weights": self.weights.tolist(),
        }


def make_density(spec: dict[str, Any]) -> Density2D:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "checkerboard":
        return Checkerboard(**spec)
    if kind == "standard-gaussian":
        return StandardGaussian(**spec)
    if kind == "gaussian-mixture":
        return GaussianMixture(**spec)
    raise ContractViolation(f"unknown density kind {kind!r}")


@dataclass
class InterpolantBatch:
    """Training tuples on the straight path ``x_t = (1 - t) x0 + t x1``.

    ``t``/``s`` are 1-D with ``t <= s``.  Rows flagged in ``reverse`` are used
    from ``s`` back to ``t`` by the flow-map losses (see :meth:`oriented`).
    """

    x0: Tensor
    x1: Tensor
    t: Tensor
    x_t: Tensor
    v_target: Tensor
    s: Optional[Tensor] = None
    reverse: Optional[Tensor] = None

    def __len__(self) -> int:
        return self.x0.shape[0]

    def interpolate(self, tau: Tensor) -> Tensor:
        tau = tau.unsqueeze(-1)
        return (1.0 - tau) * self.x0 + tau * self.x1

    def oriented(self) -> tuple[Tensor, Tensor, Tensor]:
        """``(x_start, start, end)``; reversed rows start at ``x_s`` and end at ``t``."""
        if self.s is None:
            return self.x_t, self.t, self.t
        if self.reverse is None or not bool(self.reverse.any()):
            return self.x_t, self.t, self.s
        rev = self.reverse
        start = torch.where(rev, self.s, self.t)
        end = torch.where(rev, self.t, self.s)
        x_start = torch.where(rev.unsqueeze(-1), self.interpolate(self.s), self.x_t)
        return x_start, start, end

    def select(self, idx: slice | Tensor) -> "InterpolantBatch":
        pick = lambda v: None if v is None else v[idx]
        return InterpolantBatch(
            x0=self.x0[idx], x1=self.x1[idx], t=self.t[idx], x_t=self.x_t[idx],
            v_target=self.v_target[idx], s=pick(self.s), reverse=pick(self.reverse),
        )

    def with_velocity(self, v: Tensor) -> "InterpolantBatch":
        return replace(self, v_target=v)


def interpolant(x0: Tensor, x1: Tensor, t: Tensor, s: Optional[Tensor] = None,
                reverse: Optional[Tensor] = None) -> InterpolantBatch:
    tt = t.unsqueeze(-1)
    return InterpolantBatch(
        x0=x0, x1=x1, t=t, x_t=(1.0 - tt) * x0 + tt * x1, v_target=x1 - x0, s=s, reverse=reverse
    )


def sample_times(rng: RngStream, n: int, time_scheme: str) -> tuple[Tensor, Optional[Tensor]]:
    if time_scheme == "uniform-t":
        return rng.uniform(n), None
    if time_scheme == "uniform-pairs":
        pair, _ = torch.sort(rng.uniform(n, 2), dim=-1)
        return pair[:, 0].contiguous(), pair[:, 1].contiguous()
    if time_scheme == "discrete-grid":
        k = rng.integers(0, len(SHORTCUT_LENGTHS), n)
        steps = torch.pow(2.0, -k.to(DTYPE))
        span = (GRID_UNIT * steps).to(torch.int64)
        # start index uniform on {0, ..., GRID_UNIT - span}
        j = torch.floor(rng.uniform(n) * (GRID_UNIT - span + 1).to(DTYPE)).to(torch.int64)
        t = j.to(DTYPE) / GRID_UNIT
        s = (j + span).to(DTYPE) / GRID_UNIT
        return t, s
    raise ContractViolation(f"unknown time scheme {time_scheme!r}; expected one of {TIME_SCHEMES}")


def make_interpolant_batch(
    rng: RngStream,
    density: Density2D,
    n: int,
    time_scheme: str = "uniform-t",
    reverse_fraction: float = 0.0,
) -> InterpolantBatch:
    if n < 1:
        raise ContractViolation("n must be >= 1")
    x1 = density.sample(rng, n)
    x0 = rng.normal(n, density.dim)
    t, s = sample_times(rng, n, time_scheme)
    reverse = None
    if s is not None and reverse_fraction > 0.0:
        reverse = rng.uniform(n) < reverse_fraction
    return interpolant(x0, x1, t, s, reverse)
