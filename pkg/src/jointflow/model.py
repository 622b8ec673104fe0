"""Joint flow-map network: shared MLP trunk, velocity head and divergence head.

The network reads ``(x, t, s - t)`` and returns the average velocity ``u`` and
the average *negative* divergence ``D`` over ``[t, s]``, so that

    Phi_X(x, t, s) = x + (s - t) u(x, t, s)
    Phi_Z(x, z, t, s) = z + (s - t) D(x, t, s)

Forward-mode derivatives are propagated as dual numbers through the layers
(:meth:`JointFlowMapModel.jvp_multi`), which lets several tangents share one
pass; exact divergences in low dimension use ``d`` basis tangents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Optional, Union

import torch
from torch import Tensor, nn

from .autodiff import DTYPE, ContractViolation
from .rng import RngStream

TimeLike = Union[float, Tensor]


def _erf_gelu_grad(a: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + torch.erf(a / math.sqrt(2.0)))
    pdf = torch.exp(-0.5 * a * a) / math.sqrt(2.0 * math.pi)
    return cdf + a * pdf


def _silu_grad(a: Tensor) -> Tensor:
    sig = torch.sigmoid(a)
    return sig * (1.0 + a * (1.0 - sig))


def _tanh_grad(a: Tensor) -> Tensor:
    return 1.0 - torch.tanh(a) ** 2


ACTIVATIONS = {
    "gelu": (nn.functional.gelu, _erf_gelu_grad),
    "silu": (nn.functional.silu, _silu_grad),
    "tanh": (torch.tanh, _tanh_grad),
}


def as_time(t: TimeLike, batch: int) -> Tensor:
    if isinstance(t, Tensor):
        t = t.to(DTYPE)
        return t.expand(batch) if t.dim() == 0 else t.reshape(batch)
    return torch.full((batch,), float(t), dtype=DTYPE)


@dataclass
class FlowMapEval:
    u: Tensor
    D: Tensor
    x_out: Tensor
    z_increment: Tensor


class JointFlowMapModel(nn.Module):
    """Shared-trunk MLP with a velocity head and a scalar divergence head.

    The divergence head is trained in scaled units: its raw output equals
    ``div_scale * D``.  :meth:`forward` always returns unscaled ``D``.
    """

    def __init__(
        self,
        dim: int = 2,
        width: int = 256,
        depth: int = 4,
        activation: str = "gelu",
        div_hidden: int = 64,
        div_activation: str = "silu",
        time_embedding: str = "raw",
        n_frequencies: int = 8,
        zero_init_heads: bool = True,
        div_scale: float = 1.0,
        init_seed: int = 0,
    ):
        super().__init__()
        if activation not in ACTIVATIONS or div_activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {activation!r}/{div_activation!r}")
        if time_embedding not in ("raw", "sinusoidal"):
            raise ContractViolation(f"unknown time embedding {time_embedding!r}")
        self.dim = dim
        self.width = width
        self.depth = depth
        self.activation = activation
        self.div_hidden = div_hidden
        self.div_activation = div_activation
        self.time_embedding = time_embedding
        self.n_frequencies = n_frequencies
        self.zero_init_heads = zero_init_heads
        self.init_seed = int(init_seed)
        self.register_buffer("div_scale", torch.tensor(float(div_scale), dtype=DTYPE))
        if time_embedding == "raw":
            self.register_buffer("freqs", torch.zeros(0, dtype=DTYPE))
            in_dim = dim + 2
        else:
            self.register_buffer(
                "freqs", math.pi * 2.0 ** torch.arange(n_frequencies, dtype=DTYPE)
            )
            in_dim = dim + 2 + 4 * n_frequencies

        widths = [in_dim] + [width] * depth
        self.trunk = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:])
        )
        self.velocity_head = nn.Linear(width, dim, dtype=DTYPE)
        self.div_hidden_layer = nn.Linear(width, div_hidden, dtype=DTYPE)
        self.div_out = nn.Linear(div_hidden, 1, dtype=DTYPE)
        self.reset_parameters(init_seed)
        self.nfe = 0

    def config(self) -> dict[str, Any]:
        return {
            "dim": self.dim,
            "width": self.width,
            "depth": self.depth,
            "activation": self.activation,
            "div_hidden": self.div_hidden,
            "div_activation": self.div_activation,
            "time_embedding": self.time_embedding,
            "n_frequencies": self.n_frequencies,
            "zero_init_heads": self.zero_init_heads,
        }

    def architecture(self) -> dict[str, Any]:
        """Config plus the divergence scale; what a checkpoint must match."""
        return {**self.config(), "div_scale": float(self.div_scale)}

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        """PyTorch-default uniform(+-1/sqrt(fan_in)) init from a private generator."""
        gen = torch.Generator().manual_seed(int(seed))
        layers = [*self.trunk, self.velocity_head, self.div_hidden_layer, self.div_out]
        for lin in layers:
            bound = 1.0 / math.sqrt(lin.in_features)
            lin.weight.copy_(torch.rand(lin.weight.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
            lin.bias.copy_(torch.rand(lin.bias.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
        if self.zero_init_heads:
            for lin in (self.velocity_head, self.div_out):
                lin.weight.zero_()
                lin.bias.zero_()

    @torch.no_grad()
    def set_div_scale(self, scale: float) -> None:
        """Change the target scale while keeping unscaled D predictions fixed."""
        ratio = float(scale) / float(self.div_scale)
        self.div_out.weight.mul_(ratio)
        self.div_out.bias.mul_(ratio)
        self.div_scale.fill_(float(scale))

    def _embed(self, x: Tensor, t: Tensor, s: Tensor) -> Tensor:
        dt = s - t
        cols = [x, t.unsqueeze(-1), dt.unsqueeze(-1)]
        if self.time_embedding == "sinusoidal":
            at = t.unsqueeze(-1) * self.freqs
            ad = dt.unsqueeze(-1) * self.freqs
            cols += [torch.sin(at), torch.cos(at), torch.sin(ad), torch.cos(ad)]
        return torch.cat(cols, dim=-1)

    def _embed_tangent(self, t: Tensor, s: Tensor, vx: Tensor, vt: Tensor, vs: Tensor) -> Tensor:
        # tangents carry a leading axis m: vx (m, B, d), vt/vs (m, B)
        vd = vs - vt
        cols = [vx, vt.unsqueeze(-1), vd.unsqueeze(-1)]
        if self.time_embedding == "sinusoidal":
            at = t.unsqueeze(-1) * self.freqs
            ad = (s - t).unsqueeze(-1) * self.freqs
            wt = vt.unsqueeze(-1) * self.freqs
            wd = vd.unsqueeze(-1) * self.freqs
            cols += [torch.cos(at) * wt, -torch.sin(at) * wt, torch.cos(ad) * wd, -torch.sin(ad) * wd]
        return torch.cat(cols, dim=-1)

    def _run(self, h: Tensor, tan: Optional[Tensor] = None):
        act, act_grad = ACTIVATIONS[self.activation]
        for lin in self.trunk:
            a = lin(h)
            h = act(a)
            if tan is not None:
                tan = act_grad(a) * (tan @ lin.weight.T)
        u = self.velocity_head(h)
        dact, dact_grad = ACTIVATIONS[self.div_activation]
        a = self.div_hidden_layer(h)
        head = self.div_out(dact(a)).squeeze(-1)
        if tan is None:
            return u, head, None, None
        du = tan @ self.velocity_head.weight.T
        dtan = dact_grad(a) * (tan @ self.div_hidden_layer.weight.T)
        dhead = (dtan @ self.div_out.weight.T).squeeze(-1)
        return u, head, du, dhead

    def _times(self, x: Tensor, t: TimeLike, s: TimeLike) -> tuple[Tensor, Tensor]:
        b = x.shape[0]
        return as_time(t, b), as_time(s, b)

    def forward_scaled(self, x: Tensor, t: TimeLike, s: TimeLike) -> tuple[Tensor, Tensor]:
        """(u, div_scale * D)."""
        t, s = self._times(x, t, s)
        self.nfe += 1
        u, head, _, _ = self._run(self._embed(x, t, s))
        return u, head

    def forward(self, x: Tensor, t: TimeLike, s: TimeLike) -> tuple[Tensor, Tensor]:
        u, head = self.forward_scaled(x, t, s)
        return u, head / self.div_scale

    def jvp_multi(
        self,
        x: Tensor,
        t: TimeLike,
        s: TimeLike,
        vx: Tensor,
        vt: Optional[Tensor] = None,
        vs: Optional[Tensor] = None,
    ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Values and directional derivatives for ``m`` tangents at once.

        ``vx`` is ``(m, B, d)``; ``vt``/``vs`` are ``(m, B)`` (zeros if omitted).
        Returns ``(u, D, du, dD)`` with ``du`` of shape ``(m, B, d)``.  Counts
        ``m`` function evaluations.
        """
        t, s = self._times(x, t, s)
        m, b = vx.shape[0], vx.shape[1]
        if vx.shape[1:] != x.shape:
            raise ContractViolation(f"tangent shape {tuple(vx.shape)} incompatible with x {tuple(x.shape)}")
        vt = torch.zeros(m, b, dtype=DTYPE) if vt is None else vt.to(DTYPE).expand(m, b)
        vs = torch.zeros(m, b, dtype=DTYPE) if vs is None else vs.to(DTYPE).expand(m, b)
        self.nfe += max(m, 1)
        tan = self._embed_tangent(t, s, vx, vt, vs)
        u, head, du, dhead = self._run(self._embed(x, t, s), tan)
        return u, head / self.div_scale, du, dhead / self.div_scale

    def jvp(self, x, t, s, vx, vt=None, vs=None):
        """Single-tangent version of :meth:`jvp_multi`."""
        b = x.shape[0]
        vt = None if vt is None else as_time(vt, b).unsqueeze(0)
        vs = None if vs is None else as_time(vs, b).unsqueeze(0)
        u, D, du, dD = self.jvp_multi(x, t, s, vx.unsqueeze(0), vt, vs)
        return u, D, du[0], dD[0]


class ModelCallCounter:
    """Context manager reading the ``nfe`` attribute delta of a model."""

    def __init__(self, model):
        self.model = model
        self.count = 0

    def __enter__(self):
        self._start = self.model.nfe
        return self

    def __exit__(self, *exc):
        self.count = self.model.nfe - self._start
        return False


def joint_forward(model, x: Tensor, t: TimeLike, s: TimeLike) -> tuple[Tensor, Tensor]:
    """One trunk evaluation feeding both heads."""
    if not bool(torch.isfinite(x).all()):
        raise ContractViolation("non-finite input to the flow map")
    return model(x, t, s)


def _gap(x: Tensor, t: TimeLike, s: TimeLike) -> Tensor:
    b = x.shape[0]
    return as_time(s, b) - as_time(t, b)


def flow_map_apply(model, x: Tensor, t: TimeLike, s: TimeLike) -> Tensor:
    u, _ = joint_forward(model, x, t, s)
    gap = _gap(x, t, s)
    return torch.where((gap == 0).unsqueeze(-1), x, x + gap.unsqueeze(-1) * u)


def logdensity_map_apply(model, x: Tensor, z: Tensor, t: TimeLike, s: TimeLike) -> Tensor:
    _, D = joint_forward(model, x, t, s)
    gap = _gap(x, t, s)
    return torch.where(gap == 0, z, z + gap * D)


def evaluate_flow_map(model, x: Tensor, t: TimeLike, s: TimeLike) -> FlowMapEval:
    u, D = joint_forward(model, x, t, s)
    gap = _gap(x, t, s)
    x_out = torch.where((gap == 0).unsqueeze(-1), x, x + gap.unsqueeze(-1) * u)
    return FlowMapEval(u=u, D=D, x_out=x_out, z_increment=gap * D)


def basis_tangents(batch: int, dim: int) -> Tensor:
    """``(dim, batch, dim)`` stack of unit tangents."""
    return torch.eye(dim, dtype=DTYPE).unsqueeze(1).expand(dim, batch, dim).contiguous()


def divergence_exact(model, x: Tensor, t: TimeLike, s: Optional[TimeLike] = None):
    """(u, D, div_x u) at ``(x, t, s)``; ``s`` defaults to ``t`` (the diagonal)."""
    s = t if s is None else s
    vx = basis_tangents(x.shape[0], x.shape[1])
    u, D, du, _ = model.jvp_multi(x, t, s, vx)
    div = torch.diagonal(du, dim1=0, dim2=2).sum(-1)
    return u, D, div


def divergence_hutchinson(model, x: Tensor, t: TimeLike, probes: Tensor, s: Optional[TimeLike] = None):
    """(u, D, Hutchinson estimate) using ``probes`` of shape ``(n, B, d)``."""
    s = t if s is None else s
    u, D, du, _ = model.jvp_multi(x, t, s, probes)
    est = (probes * du).sum(-1).mean(0)
    return u, D, est


class TraceMode:
    """``exact`` or ``hutchinson`` with ``n_probes`` probes.

    Parsed from strings ``"exact"``, ``"hutchinson"``, ``"hutchinson:4"``.
    """

    def __init__(self, kind: str = "exact", n_probes: int = 1, distribution: str = "rademacher"):
        if kind not in ("exact", "hutchinson"):
            raise ContractViolation(f"unknown trace mode {kind!r}")
        if n_probes < 1:
            raise ContractViolation("n_probes must be >= 1")
        self.kind = kind
        self.n_probes = int(n_probes)
        self.distribution = distribution

    @classmethod
    def parse(cls, spec: Union[str, "TraceMode"]) -> "TraceMode":
        if isinstance(spec, TraceMode):
            return spec
        kind, _, n = str(spec).partition(":")
        return cls(kind.strip(), int(n) if n else 1)

    def __str__(self) -> str:
        return "exact" if self.kind == "exact" else f"hutchinson:{self.n_probes}"

    def __repr__(self) -> str:
        return f"TraceMode({str(self)!r})"


def divergence(model, x: Tensor, t: TimeLike, mode: Union[str, TraceMode] = "exact",
               rng: Optional[RngStream] = None, s: Optional[TimeLike] = None):
    """(u, D, divergence of u in x) by the requested trace mode."""
    mode = TraceMode.parse(mode)
    if mode.kind == "exact":
        return divergence_exact(model, x, t, s)
    if rng is None:
        raise ContractViolation("Hutchinson divergence needs an RNG stream")
    if mode.distribution == "rademacher":
        probes = rng.rademacher(mode.n_probes, *x.shape)
    else:
        probes = rng.normal(mode.n_probes, *x.shape)
    return divergence_hutchinson(model, x, t, probes, s)


@dataclass
class FlowMapResiduals:
    """Per-point norms of the three flow-map condition residuals, X and Z combined."""

    lagrangian: Tensor
    eulerian: Tensor
    semigroup: Tensor


def _norm(rx: Tensor, rz: Tensor) -> Tensor:
    return torch.sqrt((rx * rx).sum(-1) + rz * rz)


def eulerian_residual_parts(model, v_ref, x: Tensor, t: TimeLike, s: TimeLike):
    """``(dPhi_X/dt + grad_x Phi_X . v, matching Z component)`` at ``(x, t, s)``.

    The time derivative at fixed ``s`` is taken by ``torch.func.jvp`` of the
    composed map, independently of the model's own dual-number pass.
    """
    b = x.shape[0]
    t, s = as_time(t, b), as_time(s, b)
    v, _, div_v = divergence_exact(v_ref, x, t)

    def maps(xx, tt):
        u, D = model(xx, tt, s)
        gap = s - tt
        return xx + gap.unsqueeze(-1) * u, gap * D

    (_, _), (dx, dz) = torch.func.jvp(maps, (x, t), (v, torch.ones_like(t)))
    # z evolves with -div v, and dPhi_Z/dz = 1
    return dx.detach(), (dz - div_v).detach()


@torch.no_grad()
def meanflow_residual(model, v: Tensor, x: Tensor, t: TimeLike, s: TimeLike) -> Tensor:
    """``u - v - (s - t)(d_t u + grad_x u . v)`` by one JVP along ``(v, 1, 0)``."""
    b = x.shape[0]
    t, s = as_time(t, b), as_time(s, b)
    u, _, du, _ = model.jvp(x, t, s, v, vt=torch.ones_like(t), vs=torch.zeros_like(t))
    return u - v - (s - t).unsqueeze(-1) * du


def flowmap_residuals(model, x: Tensor, t: TimeLike, s: TimeLike, v_ref=None) -> FlowMapResiduals:
    """Lagrangian, Eulerian and semigroup residual norms per point.

    ``v_ref`` supplies the instantaneous field through its diagonal
    ``u(x, t, t)``; it defaults to the model itself.
    """
    v_ref = model if v_ref is None else v_ref
    b = x.shape[0]
    t, s = as_time(t, b), as_time(s, b)
    gap = s - t
    with torch.no_grad():
        u, D = model(x, t, s)
        y = torch.where((gap == 0).unsqueeze(-1), x, x + gap.unsqueeze(-1) * u)
        v_y, _, div_y = divergence_exact(v_ref, y, s)
        _, _, du_ds, dD_ds = model.jvp(x, t, s, torch.zeros_like(x), vt=torch.zeros_like(t), vs=torch.ones_like(t))
        lag_x = u + gap.unsqueeze(-1) * du_ds - v_y
        lag_z = D + gap * dD_ds + div_y

        r = 0.5 * (t + s)
        x_r = flow_map_apply(model, x, t, r)
        x_s = flow_map_apply(model, x_r, r, s)
        z_r = logdensity_map_apply(model, x, torch.zeros(b, dtype=DTYPE), t, r)
        z_s = logdensity_map_apply(model, x_r, z_r, r, s)
        sg_x = y - x_s
        sg_z = torch.where(gap == 0, torch.zeros_like(gap), gap * D) - z_s

    eul_x, eul_z = eulerian_residual_parts(model, v_ref, x, t, s)
    return FlowMapResiduals(
        lagrangian=_norm(lag_x, lag_z),
        eulerian=_norm(eul_x, eul_z),
        semigroup=_norm(sg_x, sg_z),
    )
