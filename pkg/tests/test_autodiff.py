import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from jointflow.autodiff import (
    AdamState,
    ContractViolation,
    NonFiniteGradientError,
    adam_step,
    grad,
    hutchinson_trace,
    jacobian_trace_exact,
    jvp,
    lr_schedule,
)
from jointflow.rng import RngStream

DTYPE = torch.float64


def mlp(params, x, act=F.gelu):
    h = x
    n = len(params) // 2
    for i in range(n):
        h = h @ params[2 * i].T + params[2 * i + 1]
        if i < n - 1:
            h = act(h)
    return h


def random_params(rng, dims):
    out = []
    for a, b in zip(dims[:-1], dims[1:]):
        out += [rng.normal(b, a) / math.sqrt(a), 0.1 * rng.normal(b)]
    return out


# ---- grad ----

def test_grad_quadratic():
    w = torch.tensor([1.0, 2.0], dtype=DTYPE, requires_grad=True)
    (g,) = grad((w * w).sum(), [w])
    assert torch.equal(g, torch.tensor([2.0, 4.0], dtype=DTYPE))


@pytest.mark.parametrize("shape", [(3,), (2, 5), (1, 1, 4)])
def test_grad_of_sum_is_ones(shape):
    w = torch.randn(shape, dtype=DTYPE, requires_grad=True)
    (g,) = grad(w.sum(), [w])
    assert torch.equal(g, torch.ones(shape, dtype=DTYPE))


def test_grad_rejects_non_scalar():
    w = torch.ones(2, dtype=DTYPE, requires_grad=True)
    with pytest.raises(ContractViolation):
        grad(w * 2, [w])


def test_unreached_and_detached_params_get_zeros():
    w = torch.ones(2, dtype=DTYPE, requires_grad=True)
    other = torch.ones(3, dtype=DTYPE, requires_grad=True)
    frozen = torch.ones(2, dtype=DTYPE)
    gw, go, gf = grad((w * 3).sum() + frozen.sum(), [w, other, frozen])
    assert torch.equal(gw, torch.full((2,), 3.0, dtype=DTYPE))
    assert torch.equal(go, torch.zeros(3, dtype=DTYPE))
    assert torch.equal(gf, torch.zeros(2, dtype=DTYPE))


@pytest.mark.parametrize("act", [F.gelu, F.silu])
def test_mlp_gradient_matches_central_differences(act):
    rng = RngStream(0, f"grad-fd-{act.__name__}")
    params = random_params(rng, [3, 16, 16, 16, 2])
    x = rng.normal(4, 3)
    leaves = [p.clone().requires_grad_(True) for p in params]
    g = grad(mlp(leaves, x, act).pow(2).sum(), leaves)
    h = 1e-5
    for p, gp in zip(params, g):
        flat = p.view(-1)
        for idx in range(0, flat.numel(), max(1, flat.numel() // 12)):
            old = float(flat[idx])
            flat[idx] = old + h
            up = float(mlp(params, x, act).pow(2).sum())
            flat[idx] = old - h
            dn = float(mlp(params, x, act).pow(2).sum())
            flat[idx] = old
            fd = (up - dn) / (2 * h)
            assert abs(float(gp.view(-1)[idx]) - fd) <= 1e-6 * max(1.0, abs(fd))


def test_gradients_bit_identical_on_replay():
    def run():
        rng = RngStream(7, "replay")
        params = [p.requires_grad_(True) for p in random_params(rng, [2, 32, 32, 1])]
        return grad(mlp(params, rng.normal(64, 2)).sum(), params)

    for a, b in zip(run(), run()):
        assert torch.equal(a, b)


# ---- jvp ----

def test_jvp_square():
    x = torch.tensor([1.0, 2.0], dtype=DTYPE)
    val, d = jvp(lambda v: v * v, x, torch.ones(2, dtype=DTYPE))
    assert torch.equal(val, x * x) and torch.equal(d, torch.tensor([2.0, 4.0], dtype=DTYPE))


def test_jvp_identity_returns_tangent():
    x, v = torch.randn(5, dtype=DTYPE), torch.randn(5, dtype=DTYPE)
    _, d = jvp(lambda a: a, x, v)
    assert torch.equal(d, v)


def test_jvp_shape_mismatch():
    with pytest.raises(ContractViolation):
        jvp(lambda a: a, torch.zeros(3, dtype=DTYPE), torch.zeros(2, dtype=DTYPE))


def test_jvp_matches_finite_differences_on_mlp():
    rng = RngStream(1, "jvp-fd")
    params = random_params(rng, [2, 32, 32, 32, 32, 2])
    x, v = rng.normal(8, 2), rng.normal(8, 2)
    fn = lambda a: mlp(params, a)  # noqa: E731
    _, d = jvp(fn, x, v)
    h = 1e-5
    fd = (fn(x + h * v) - fn(x - h * v)) / (2 * h)
    assert float((d - fd).abs().max() / fd.abs().max()) < 1e-6


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_jvp_equals_gradient_inner_product(seed):
    rng = RngStream(seed, "jvp-grad")
    params = random_params(rng, [3, 8, 8, 1])
    x, v = rng.normal(3), rng.normal(3)
    fn = lambda a: mlp(params, a.unsqueeze(0)).sum()  # noqa: E731
    _, d = jvp(fn, x, v)
    xg = x.clone().requires_grad_(True)
    (g,) = grad(fn(xg), [xg])
    assert abs(float(d) - float(g @ v)) <= 1e-10


# ---- traces ----

def test_exact_trace_of_diagonal_map():
    a = torch.tensor([[2.0, 0.0], [0.0, 3.0]], dtype=DTYPE)
    assert float(jacobian_trace_exact(lambda x: x @ a.T, torch.randn(1, 2, dtype=DTYPE))) == 5.0


def test_exact_trace_of_identity():
    assert float(jacobian_trace_exact(lambda x: x, torch.randn(1, 2, dtype=DTYPE))) == 2.0


def test_exact_trace_rejects_non_square():
    with pytest.raises(ContractViolation):
        jacobian_trace_exact(lambda x: x[..., :1], torch.zeros(1, 2, dtype=DTYPE))


def test_exact_trace_matches_fd_jacobian_diagonal():
    rng = RngStream(2, "trace-fd")
    params = random_params(rng, [2, 32, 32, 2])
    fn = lambda a: mlp(params, a)  # noqa: E731
    x = rng.normal(6, 2)
    h = 1e-5
    fd = torch.zeros(6, dtype=DTYPE)
    for i in range(2):
        e = torch.zeros(2, dtype=DTYPE)
        e[i] = h
        fd += (fn(x + e) - fn(x - e))[:, i] / (2 * h)
    assert float((jacobian_trace_exact(fn, x) - fd).abs().max()) < 1e-6


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_rademacher_hutchinson_exact_for_diagonal_jacobian(diag, seed):
    a = torch.tensor(diag, dtype=DTYPE)
    est = hutchinson_trace(lambda x: x * a, torch.zeros(1, len(diag), dtype=DTYPE), 1,
                           RngStream(seed, "h"))
    assert float(est) == pytest.approx(float(a.sum()), abs=1e-12)


def test_hutchinson_zero_map():
    est = hutchinson_trace(lambda x: 0.0 * x, torch.randn(3, 2, dtype=DTYPE), 4, RngStream(0, "z"))
    assert torch.equal(est, torch.zeros(3, dtype=DTYPE))


def test_hutchinson_rejects_zero_probes():
    with pytest.raises(ContractViolation):
        hutchinson_trace(lambda x: x, torch.zeros(1, 2, dtype=DTYPE), 0, RngStream(0, "z"))


@pytest.mark.parametrize("n", [100, 10_000])
def test_hutchinson_mean_within_three_sigma(n):
    a = torch.tensor([[1.0, 4.0], [0.0, 1.0]], dtype=DTYPE)
    # replicated rows give n independent single-probe estimates
    x = torch.zeros(n, 2, dtype=DTYPE)
    est = hutchinson_trace(lambda v: v @ a.T, x, 1, RngStream(0, f"h{n}"))
    sigma = float(est.std()) / math.sqrt(n)
    assert abs(float(est.mean()) - 2.0) <= 3 * sigma


# ---- Adam ----

def test_adam_first_step_is_lr_times_sign():
    p = torch.zeros(2, dtype=DTYPE)
    st_ = AdamState.zeros_like([p], lr=0.1, eps=1e-16)
    adam_step([p], [torch.tensor([1.0, -1.0], dtype=DTYPE)], st_)
    assert torch.allclose(p, torch.tensor([-0.1, 0.1], dtype=DTYPE), atol=1e-14)
    assert st_.step == 1


def test_adam_zero_gradient_leaves_params():
    p = torch.randn(4, dtype=DTYPE)
    before = p.clone()
    adam_step([p], [torch.zeros(4, dtype=DTYPE)], AdamState.zeros_like([p]))
    assert torch.equal(p, before)


def test_adam_two_steps_match_reference():
    g = torch.tensor([0.3, -2.0, 5.0], dtype=DTYPE)
    p = torch.zeros(3, dtype=DTYPE)
    st_ = AdamState.zeros_like([p], lr=0.01)
    adam_step([p], [g], st_)
    adam_step([p], [g], st_)
    # hand-rolled reference
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    m = v = torch.zeros(3, dtype=DTYPE)
    q = torch.zeros(3, dtype=DTYPE)
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        q = q - lr * (m / (1 - b1**t)) / (torch.sqrt(v / (1 - b2**t)) + eps)
    assert float((p - q).abs().max()) <= 1e-12


def test_adam_matches_torch_optim():
    gen = torch.Generator().manual_seed(0)
    p = torch.randn(5, 3, generator=gen, dtype=DTYPE)
    q = p.clone().requires_grad_(True)
    ours = AdamState.zeros_like([p], lr=3e-3)
    ref = torch.optim.Adam([q], lr=3e-3)
    for _ in range(20):
        g = torch.randn(5, 3, generator=gen, dtype=DTYPE)
        adam_step([p], [g], ours)
        q.grad = g.clone()
        ref.step()
    assert float((p - q.detach()).abs().max()) <= 1e-15


def test_adam_non_finite_raises_and_leaves_state():
    p = torch.ones(2, dtype=DTYPE)
    st_ = AdamState.zeros_like([p])
    with pytest.raises(NonFiniteGradientError):
        adam_step([p], [torch.tensor([1.0, math.nan], dtype=DTYPE)], st_)
    assert st_.step == 0 and torch.equal(p, torch.ones(2, dtype=DTYPE))


def test_adam_shape_mismatch():
    p = torch.ones(2, dtype=DTYPE)
    with pytest.raises(ContractViolation):
        adam_step([p], [torch.ones(3, dtype=DTYPE)], AdamState.zeros_like([p]))


@given(st.integers(1, 50))
@settings(max_examples=10)
def test_adam_step_count_increments(n):
    p = torch.ones(1, dtype=DTYPE)
    s = AdamState.zeros_like([p])
    for _ in range(n):
        adam_step([p], [torch.ones(1, dtype=DTYPE)], s)
    assert s.step == n


# ---- schedule ----

def test_lr_schedule_examples():
    assert lr_schedule(0, 1e-3, 35000) == 1e-3
    assert lr_schedule(35000, 1e-3, 35000) == 1e-3
    assert lr_schedule(4 * 35000, 1e-3, 35000) == pytest.approx(5e-4, rel=1e-15)


def test_lr_schedule_rejects_non_positive_base():
    with pytest.raises(ContractViolation):
        lr_schedule(1, 0.0, 10)


@given(st.integers(0, 10**6), st.integers(1, 10**5))
def test_lr_schedule_is_non_increasing(step, decay):
    assert lr_schedule(step + 1, 1.0, decay) <= lr_schedule(step, 1.0, decay)
