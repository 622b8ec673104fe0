import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from jointflow.autodiff import ContractViolation
from jointflow.densities import (
    GRID_UNIT,
    SHORTCUT_LENGTHS,
    Checkerboard,
    GaussianMixture,
    StandardGaussian,
    gaussian_logpdf,
    interpolant,
    make_density,
    make_interpolant_batch,
)
from jointflow.rng import RngStream

DTYPE = torch.float64
LN32 = math.log(32.0)
coords = st.floats(-20, 20, allow_nan=False)


def pts(*rows):
    return torch.tensor(rows, dtype=DTYPE)


# ---- checkerboard ----

def test_checkerboard_logpdf_examples():
    cb = Checkerboard()
    lp = cb.logpdf(pts([0.5, 0.5], [2.5, 0.5], [10.0, 0.0]))
    assert lp[0] == -LN32
    assert lp[1] == -math.inf and lp[2] == -math.inf


def test_checkerboard_boundaries_use_floor():
    cb = Checkerboard()
    # x = -2 belongs to column 1; (-2, -4) is cell (1, 0): odd, so off support
    assert cb.logpdf(pts([-2.0, -4.0]))[0] == -math.inf
    assert cb.logpdf(pts([-4.0, -4.0]))[0] == -LN32
    # the upper edge x = 4 is outside the last cell
    assert cb.logpdf(pts([4.0, 0.0]))[0] == -math.inf


def test_checkerboard_geometry():
    cb = Checkerboard()
    assert len(cb.occupied) == 8 and cb.support_area == 32.0


def test_samples_all_on_support():
    x = Checkerboard().sample(RngStream(0, "cb"), 20000)
    assert torch.all(Checkerboard().logpdf(x) == -LN32)


def test_single_sample_inside_domain():
    x = Checkerboard().sample(RngStream(1, "cb"), 1)
    assert x.shape == (1, 2) and bool((x.abs() <= 4).all())


def test_sample_rejects_n_zero():
    with pytest.raises(ContractViolation):
        Checkerboard().sample(RngStream(0, "cb"), 0)


def test_cell_counts_uniform_within_four_sigma():
    cb = Checkerboard()
    n = 10**6
    x = cb.sample(RngStream(2, "cells"), n)
    ij = cb.cell_index(x).to(torch.int64)
    codes = ij[:, 0] * 4 + ij[:, 1]
    counts = torch.bincount(codes, minlength=16)
    expected_cells = [i * 4 + j for i in range(4) for j in range(4) if (i + j) % 2 == 0]
    p = 1 / 8
    sigma = math.sqrt(n * p * (1 - p))
    for c in range(16):
        if c in expected_cells:
            assert abs(int(counts[c]) - n * p) <= 4 * sigma
        else:
            assert int(counts[c]) == 0


def _grid_integral(logpdf, lo, hi, m):
    step = (hi - lo) / m
    c = lo + step * (torch.arange(m, dtype=DTYPE) + 0.5)
    gx, gy = torch.meshgrid(c, c, indexing="xy")
    p = torch.stack([gx.reshape(-1), gy.reshape(-1)], -1)
    return float(torch.exp(logpdf(p)).sum()) * step * step


@pytest.mark.parametrize("density", [
    Checkerboard(),
    StandardGaussian(),
    GaussianMixture([[-2.0, 0.0], [2.0, 1.0]], [[[1.0, 0.3], [0.3, 0.5]], [[0.4, 0.0], [0.0, 0.8]]], [0.3, 0.7]),
])
def test_logpdf_integrates_to_one(density):
    assert _grid_integral(density.logpdf, -10.0, 10.0, 500) == pytest.approx(1.0, abs=1e-2)


# ---- Gaussian ----

def test_gaussian_logpdf_examples():
    assert float(gaussian_logpdf(pts([0.0, 0.0]))[0]) == pytest.approx(-math.log(2 * math.pi), abs=1e-15)
    assert float(gaussian_logpdf(pts([1.0, 1.0]))[0]) == pytest.approx(-math.log(2 * math.pi) - 1.0, abs=1e-15)


def test_gaussian_quadrature():
    # midpoint rule converges spectrally for this integrand
    assert _grid_integral(gaussian_logpdf, -8.0, 8.0, 400) == pytest.approx(1.0, abs=1e-4)


@given(coords, coords)
def test_gaussian_symmetry(a, b):
    p = pts([a, b])
    assert torch.equal(gaussian_logpdf(p), gaussian_logpdf(-p))


def test_mixture_single_component_matches_gaussian():
    g = GaussianMixture([[0.0, 0.0]])
    p = torch.randn(10, 2, dtype=DTYPE)
    assert torch.allclose(g.logpdf(p), gaussian_logpdf(p), atol=1e-14)


def test_mixture_samples_have_finite_logpdf():
    g = GaussianMixture([[-3.0, 0.0], [3.0, 0.0]])
    assert bool(torch.isfinite(g.logpdf(g.sample(RngStream(0, "m"), 1000))).all())


def test_make_density_round_trip():
    for d in (Checkerboard(), StandardGaussian(), GaussianMixture([[1.0, 2.0]])):
        again = make_density(d.to_dict())
        p = torch.randn(5, 2, dtype=DTYPE)
        assert torch.equal(again.logpdf(p), d.logpdf(p))
    with pytest.raises(ContractViolation):
        make_density({"kind": "moons"})


# ---- interpolants ----

def test_interpolant_midpoint():
    b = interpolant(pts([0.0, 0.0]), pts([2.0, 2.0]), torch.tensor([0.5], dtype=DTYPE))
    assert torch.equal(b.x_t, pts([1.0, 1.0])) and torch.equal(b.v_target, pts([2.0, 2.0]))


def test_interpolant_endpoints():
    x0, x1 = torch.randn(4, 2, dtype=DTYPE), torch.randn(4, 2, dtype=DTYPE)
    assert torch.equal(interpolant(x0, x1, torch.zeros(4, dtype=DTYPE)).x_t, x0)
    assert torch.equal(interpolant(x0, x1, torch.ones(4, dtype=DTYPE)).x_t, x1)


@pytest.mark.parametrize("scheme", ["uniform-t", "uniform-pairs", "discrete-grid"])
def test_batch_invariants(scheme):
    b = make_interpolant_batch(RngStream(3, scheme), Checkerboard(), 4096, scheme, reverse_fraction=0.5)
    tt = b.t.unsqueeze(-1)
    assert torch.equal(b.x_t, (1 - tt) * b.x0 + tt * b.x1)
    assert torch.equal(b.v_target, b.x1 - b.x0)
    assert bool(((b.t >= 0) & (b.t <= 1)).all())
    if b.s is not None:
        assert bool((b.t <= b.s).all()) and bool((b.s <= 1).all())


def test_discrete_grid_lengths_and_alignment():
    b = make_interpolant_batch(RngStream(4, "grid"), Checkerboard(), 20000, "discrete-grid")
    gaps = set((b.s - b.t).tolist())
    assert gaps == set(SHORTCUT_LENGTHS)
    for v in (b.t, b.s):
        scaled = v * GRID_UNIT
        assert torch.equal(scaled, torch.round(scaled))


def test_oriented_reverses_flagged_rows():
    b = make_interpolant_batch(RngStream(5, "rev"), Checkerboard(), 256, "uniform-pairs", reverse_fraction=0.5)
    x, start, end = b.oriented()
    rev = b.reverse
    assert bool(rev.any()) and bool((~rev).any())
    assert torch.equal(start[rev], b.s[rev]) and torch.equal(end[rev], b.t[rev])
    assert torch.equal(x[~rev], b.x_t[~rev])
    assert torch.equal(x[rev], b.interpolate(b.s)[rev])


def test_unknown_scheme():
    with pytest.raises(ContractViolation):
        make_interpolant_batch(RngStream(0, "x"), Checkerboard(), 4, "log-normal")
