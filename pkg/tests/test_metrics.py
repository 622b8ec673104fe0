import csv
import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from jointflow.autodiff import ContractViolation
from jointflow.densities import Checkerboard, gaussian_logpdf
from jointflow.metrics import (
    calibration_from_points,
    density_grid,
    energy_distance,
    grid_points,
    nll_calibration,
    per_sample_nll_error,
    write_grid_csv,
)
from jointflow.oracles import ConstantFlowMap, FieldFlowMap, LinearFlowMap
from jointflow.rng import RngStream

DTYPE = torch.float64
LN32 = math.log(32.0)


class _Analytic:
    """Stand-in whose few-step log-density is the checkerboard's own logpdf."""

    def __init__(self):
        self.density = Checkerboard()
        self.nfe = 0

    def logpdf(self, x):
        return self.density.logpdf(x)


def rice_mean(nu: float, sigma: float) -> float:
    """E|Z| for Z ~ N(mu, sigma^2 I_2) with |mu| = nu (Rice distribution mean)."""
    x = -nu * nu / (2 * sigma * sigma)
    h = torch.tensor(-x / 2, dtype=DTYPE)
    lag = math.exp(x / 2) * ((1 - x) * float(torch.special.i0(h)) - x * float(torch.special.i1(h)))
    return sigma * math.sqrt(math.pi / 2) * lag


# ---- calibration ----

def test_calibration_exact_for_analytic_density():
    cb = Checkerboard()
    s = nll_calibration(cb, cb, 2000, 1, "analytic", RngStream(0, "cal"))
    assert s.mean_abs_error_vs_analytic == 0.0
    assert s.fraction_on_support == 1.0
    assert s.mean_nll == pytest.approx(LN32, abs=1e-12)
    assert s.n_samples == 2000 and s.nfe == 0


def test_calibration_of_identity_model_matches_direct_evaluation():
    cb = Checkerboard()
    x = cb.sample(RngStream(1, "cal"), 3000)
    s = nll_calibration(ConstantFlowMap([0.0, 0.0], 0.0), cb, len(x), 1, "fewstep", RngStream(1, "cal"), points=x)
    direct = (gaussian_logpdf(x) + LN32).abs().mean()
    assert s.mean_abs_error_vs_analytic == pytest.approx(float(direct), abs=1e-12)
    assert s.nfe == 1 and s.K == 1 and s.mode == "fewstep"


def test_off_support_points_are_excluded():
    logp_true = torch.tensor([-LN32, -math.inf, -LN32, -math.inf], dtype=DTYPE)
    logp_model = torch.tensor([-LN32 + 0.5, 123.0, -LN32 - 0.5, -1e9], dtype=DTYPE)
    s = calibration_from_points(logp_model, logp_true, nfe=4)
    assert s.mean_abs_error_vs_analytic == pytest.approx(0.5)
    assert s.fraction_on_support == 0.5
    assert math.isfinite(s.mean_nll)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10_000))
def test_fraction_on_support_in_unit_interval(n, seed):
    x = 5 * RngStream(seed, "supp").normal(n, 2)
    s = calibration_from_points(torch.zeros(n, dtype=DTYPE), Checkerboard().logpdf(x), nfe=0)
    assert 0.0 <= s.fraction_on_support <= 1.0


def test_summary_dict_fields():
    d = calibration_from_points(torch.zeros(2, dtype=DTYPE), torch.zeros(2, dtype=DTYPE), 3).to_dict()
    for key in ("mean_nll", "mean_abs_error_vs_analytic", "fraction_on_support", "nfe", "n_samples"):
        assert key in d


# ---- per-sample error ----

def test_per_sample_error_vanishes_on_linear_flow():
    x = 2 * RngStream(2, "pse").normal(300, 2)
    err = per_sample_nll_error(LinearFlowMap(), FieldFlowMap(lambda x, t: x), x, K=1, ref_steps=2000)
    assert err <= 2e-3


def test_per_sample_error_ordering_invariant():
    x = 2 * RngStream(3, "pse").normal(100, 2)
    perm = torch.randperm(100, generator=torch.Generator().manual_seed(0))
    ref = FieldFlowMap(lambda x, t: 0.5 * x)
    a = per_sample_nll_error(LinearFlowMap(), ref, x, 2, 50)
    b = per_sample_nll_error(LinearFlowMap(), ref, x[perm], 2, 50)
    assert a == pytest.approx(b, rel=1e-12)


def test_per_sample_error_accepts_cached_reference():
    x = 2 * RngStream(4, "pse").normal(50, 2)
    err = per_sample_nll_error(LinearFlowMap(), None, x, 1, 0, reference_logp=LinearFlowMap().exact_log_density(x))
    assert err <= 1e-12


# ---- density grid ----

def test_grid_row_count_and_centres():
    g = density_grid(ConstantFlowMap([0.0, 0.0]), (-4, 4), 128, K=1)
    assert g.shape == (16384, 3)
    pts = grid_points((-4, 4), 4)
    assert sorted(set(pts[:, 0].tolist())) == [-3.0, -1.0, 1.0, 3.0]


def test_grid_reproduces_checkerboard_pattern():
    g = density_grid(_Analytic(), (-4, 4), 8)
    for x, y, lp in g.tolist():
        on = (math.floor((x + 4) / 2) + math.floor((y + 4) / 2)) % 2 == 0
        assert lp == (-LN32 if on else -math.inf)


def test_grid_rejects_low_resolution():
    with pytest.raises(ContractViolation):
        grid_points((-4, 4), 1)


def test_grid_csv(tmp_path):
    g = density_grid(LinearFlowMap(), (-1, 1), 3, K=2)
    path = tmp_path / "grid.csv"
    write_grid_csv(g, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["x", "y", "logp"] and len(rows) == 10
    assert float(rows[1][2]) == float(g[0, 2])


# ---- energy distance ----

def test_energy_distance_identical_sets():
    a = RngStream(5, "ed").normal(500, 2)
    assert energy_distance(a, a) == 0.0


def test_energy_distance_point_masses():
    a = torch.zeros(10, 2, dtype=DTYPE)
    b = torch.tensor([[1.0, 0.0]], dtype=DTYPE).expand(7, 2)
    assert energy_distance(a, b) == pytest.approx(2.0, abs=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 10_000))
def test_energy_distance_symmetric_nonnegative(n, m, seed):
    r = RngStream(seed, "ed")
    a, b = r.normal(n, 2), r.normal(m, 2) + 0.3
    ab, ba = energy_distance(a, b), energy_distance(b, a)
    assert ab >= 0.0
    assert ab == pytest.approx(ba, rel=1e-12, abs=1e-15)


def test_energy_distance_rejects_empty():
    with pytest.raises(ContractViolation):
        energy_distance(torch.zeros(0, 2), torch.zeros(3, 2))


def test_rice_mean_oracle_against_monte_carlo():
    z = RngStream(6, "rice").normal(400_000, 2) * math.sqrt(2) + torch.tensor([3.0, 0.0], dtype=DTYPE)
    assert rice_mean(3.0, math.sqrt(2)) == pytest.approx(float(z.norm(dim=-1).mean()), abs=5e-3)
    # nu = 0 reduces to the Rayleigh mean
    assert rice_mean(0.0, 1.0) == pytest.approx(math.sqrt(math.pi / 2), rel=1e-14)


@pytest.mark.slow
def test_energy_distance_gaussian_shift_within_three_sigma():
    # A - B ~ N((3, 0), 2I) and A - A' ~ N(0, 2I)
    exact = 2 * rice_mean(3.0, math.sqrt(2)) - 2 * math.sqrt(math.pi)
    shift = torch.tensor([3.0, 0.0], dtype=DTYPE)
    n = 10_000
    r = RngStream(7, "ed-main")
    est = energy_distance(r.normal(n, 2), r.normal(n, 2) + shift)
    # spread of the estimator from independent replicates at a quarter of the size,
    # rescaled by sqrt(1/4) to n samples
    reps = []
    for i in range(8):
        rr = RngStream(100 + i, "ed-rep")
        reps.append(energy_distance(rr.normal(n // 4, 2), rr.normal(n // 4, 2) + shift))
    sigma = float(torch.tensor(reps, dtype=DTYPE).std()) / 2
    assert abs(est - exact) <= 3 * sigma
