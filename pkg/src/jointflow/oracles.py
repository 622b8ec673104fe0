"""Closed-form flow maps used as verification oracles.

They expose the same call surface as :class:`~jointflow.model.JointFlowMapModel`
(``forward``, ``jvp_multi``, ``jvp``, ``nfe``) so every sampler, likelihood
routine and loss can be run on them unchanged.
"""

from __future__ import annotations

from typing import Callable

import torch
from torch import Tensor

from .autodiff import DTYPE
from .model import as_time

_SERIES_CUTOFF = 1e-3


def expm1_ratio(y: Tensor) -> tuple[Tensor, Tensor]:
    """g(y) = (e^y - 1) / y and g'(y), with a series near 0."""
    small = y.abs() < _SERIES_CUTOFF
    ys = torch.where(small, torch.ones_like(y), y)
    g_big = torch.expm1(ys) / ys
    dg_big = (ys * torch.exp(ys) - torch.expm1(ys)) / (ys * ys)
    g_small = 1.0 + y / 2.0 + y * y / 6.0 + y**3 / 24.0
    dg_small = 0.5 + y / 3.0 + y * y / 8.0 + y**3 / 30.0
    return torch.where(small, g_small, g_big), torch.where(small, dg_small, dg_big)


class _OracleBase:
    dim = 2

    def __init__(self):
        self.nfe = 0

    def __call__(self, x, t, s):
        return self.forward(x, t, s)

    def jvp(self, x, t, s, vx, vt=None, vs=None):
        b = x.shape[0]
        vt = None if vt is None else as_time(vt, b).unsqueeze(0)
        vs = None if vs is None else as_time(vs, b).unsqueeze(0)
        u, D, du, dD = self.jvp_multi(x, t, s, vx.unsqueeze(0), vt, vs)
        return u, D, du[0], dD[0]


class LinearFlowMap(_OracleBase):
    """Exact flow map of ``v(x, t) = rate * x``.

    ``x_s = x_t exp(rate (s - t))``, so the average velocity is
    ``rate * x * g(rate (s - t))`` and the average negative divergence is the
    constant ``-rate * dim``.
    """

    def __init__(self, rate: float = 1.0, dim: int = 2):
        super().__init__()
        self.rate = float(rate)
        self.dim = dim

    def forward(self, x, t, s):
        b = x.shape[0]
        gap = as_time(s, b) - as_time(t, b)
        self.nfe += 1
        g, _ = expm1_ratio(self.rate * gap)
        u = self.rate * x * g.unsqueeze(-1)
        D = torch.full((b,), -self.rate * self.dim, dtype=DTYPE)
        return u, D

    def jvp_multi(self, x, t, s, vx, vt=None, vs=None):
        m, b = vx.shape[0], x.shape[0]
        gap = as_time(s, b) - as_time(t, b)
        vt = torch.zeros(m, b, dtype=DTYPE) if vt is None else vt.expand(m, b)
        vs = torch.zeros(m, b, dtype=DTYPE) if vs is None else vs.expand(m, b)
        self.nfe += max(m, 1)
        g, dg = expm1_ratio(self.rate * gap)
        u = self.rate * x * g.unsqueeze(-1)
        D = torch.full((b,), -self.rate * self.dim, dtype=DTYPE)
        dgap = (vs - vt).unsqueeze(-1)
        du = self.rate * g.unsqueeze(-1) * vx + self.rate**2 * dg.unsqueeze(-1) * x * dgap
        return u, D, du, torch.zeros(m, b, dtype=DTYPE)

    def exact_log_density(self, x1: Tensor) -> Tensor:
        """log p_1(x1) when p_0 is standard normal and time runs 0 -> 1."""
        from .densities import gaussian_logpdf

        return gaussian_logpdf(x1 * torch.exp(torch.tensor(-self.rate, dtype=DTYPE))) - self.rate * self.dim


class ConstantFlowMap(_OracleBase):
    """``u`` and ``D`` constant in ``(x, t, s)``."""

    def __init__(self, u, D: float = 0.0):
        super().__init__()
        self.u = torch.as_tensor(u, dtype=DTYPE)
        self.D = float(D)
        self.dim = self.u.shape[-1]

    def forward(self, x, t, s):
        self.nfe += 1
        b = x.shape[0]
        return self.u.expand(b, self.dim).clone(), torch.full((b,), self.D, dtype=DTYPE)

    def jvp_multi(self, x, t, s, vx, vt=None, vs=None):
        m = vx.shape[0]
        self.nfe += max(m, 1)
        u, D = self.u.expand(x.shape[0], self.dim).clone(), torch.full((x.shape[0],), self.D, dtype=DTYPE)
        return u, D, torch.zeros_like(vx), torch.zeros(m, x.shape[0], dtype=DTYPE)


class FieldFlowMap(_OracleBase):
    """Wrap an instantaneous field ``v(x, t)`` as a flow-map surface.

    ``u(x, t, s) = v(x, t)`` for every ``s`` and ``D = -div v`` is not
    provided (zero); only the diagonal is meaningful.  Derivatives come from
    ``torch.func.jvp``.
    """

    def __init__(self, fn: Callable[[Tensor, Tensor], Tensor], dim: int = 2):
        super().__init__()
        self.fn = fn
        self.dim = dim

    def forward(self, x, t, s):
        self.nfe += 1
        b = x.shape[0]
        return self.fn(x, as_time(t, b)), torch.zeros(b, dtype=DTYPE)

    def jvp_multi(self, x, t, s, vx, vt=None, vs=None):
        m, b = vx.shape[0], x.shape[0]
        tt = as_time(t, b).clone()
        vt = torch.zeros(m, b, dtype=DTYPE) if vt is None else vt.expand(m, b).clone()
        self.nfe += max(m, 1)
        outs = []
        u = None
        for k in range(m):
            u, du = torch.func.jvp(self.fn, (x, tt), (vx[k], vt[k]))
            outs.append(du)
        if u is None:
            u = self.fn(x, tt)
        zeros = torch.zeros(m, b, dtype=DTYPE)
        return u, torch.zeros(b, dtype=DTYPE), torch.stack(outs), zeros
