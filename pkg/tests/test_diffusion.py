import math

import numpy as np
import pytest
import torch

from ldlab.diffusion import (
    GuidanceSpec,
    NoiseSchedule,
    ancestral_sample,
    fast_sample,
    fast_sample_timesteps,
    guided_eps,
    make_linear_schedule,
    mu_from_eps,
    q_posterior,
    q_sample,
    training_loss,
)
from ldlab.errors import IndexOutOfRange, InvalidSchedule, InvalidStepCount
from ldlab.layout import null_layout
from ldlab.rng import torch_generator

C = 12
K = 4


def null_guidance(scale=1.0, form="interp"):
    return GuidanceSpec(scale=scale, null_layout=null_layout(K, C), form=form)


# ---------------------------------------------------------------- schedule


def test_linear_schedule_first_step():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    assert s.alpha_bar_at(1) == pytest.approx(0.9999, abs=1e-12)
    assert s.alpha_at(1) == pytest.approx(0.9999, abs=1e-12)


def test_single_step_schedule_boundary():
    s = make_linear_schedule(1, 0.5, 0.5)
    assert s.alpha_bar_at(1) == pytest.approx(0.5)
    assert s.posterior_variance_at(1) == pytest.approx(0.0)
    assert s.alpha_bar_at(0) == 1.0


def test_alpha_bar_final_value_against_direct_product():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    prod = 1.0
    for b in np.linspace(1e-4, 0.02, 1000, dtype=np.float64):
        prod *= 1.0 - b
    assert s.alpha_bar_at(1000) == pytest.approx(prod, rel=1e-12)
    assert s.alpha_bar_at(1000) == pytest.approx(4.0358e-5, rel=1e-3)
    assert s.alpha_bar_at(1000) < 1e-4


def test_schedule_invariants():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    assert (s.beta > 0).all() and (s.beta < 1).all()
    assert (np.diff(s.beta) >= 0).all()
    assert (np.diff(s.alpha_bar) < 0).all()
    # recursion holds exactly as computed
    recon = np.concatenate([[s.alpha[0]], s.alpha_bar[:-1] * s.alpha[1:]])
    assert np.array_equal(recon, s.alpha_bar)
    # posterior variance matches its defining formula
    prev = np.concatenate([[1.0], s.alpha_bar[:-1]])
    assert np.allclose(
        s.posterior_variance, (1 - prev) / (1 - s.alpha_bar) * s.beta, rtol=1e-15
    )


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(T=0),
        dict(T=10, beta_start=0.0),
        dict(T=10, beta_start=0.3, beta_end=0.2),
        dict(T=10, beta_start=0.5, beta_end=1.0),
    ],
)
def test_schedule_rejects_bad_parameters(kwargs):
    with pytest.raises(InvalidSchedule):
        make_linear_schedule(**kwargs)


def test_timestep_bounds_checked():
    s = make_linear_schedule(10, 1e-4, 0.02)
    with pytest.raises(IndexOutOfRange):
        s.beta_at(0)
    with pytest.raises(IndexOutOfRange):
        s.alpha_bar_at(11)
    with pytest.raises(IndexOutOfRange):
        q_sample(torch.zeros(1), 11, torch.zeros(1), s)


# ---------------------------------------------------------------- q_sample


def test_q_sample_signal_limits():
    nearly_clean = NoiseSchedule(np.array([1e-12]))
    x0, eps = torch.full((3,), 2.0), torch.ones(3)
    assert torch.allclose(q_sample(x0, 1, eps, nearly_clean), x0, atol=1e-5)
    nearly_noise = NoiseSchedule(np.array([1 - 1e-12]))
    assert torch.allclose(q_sample(x0, 1, eps, nearly_noise), eps, atol=1e-5)


def test_q_sample_hand_value():
    # alpha_bar = 0.25: x_t = 0.5 * 2 + sqrt(0.75) * 1
    s = NoiseSchedule(np.array([0.75]))
    out = q_sample(torch.tensor([2.0], dtype=torch.float64), 1, torch.ones(1, dtype=torch.float64), s)
    assert out.item() == pytest.approx(1.8660254037844386, abs=1e-12)


def test_q_sample_batched_t():
    s = make_linear_schedule(10, 0.1, 0.3)
    x0 = torch.randn(4, 2)
    eps = torch.randn(4, 2)
    t = torch.tensor([1, 3, 7, 10])
    out = q_sample(x0, t, eps, s)
    for i in range(4):
        row = q_sample(x0[i : i + 1], int(t[i]), eps[i : i + 1], s)
        assert torch.allclose(out[i], row[0], atol=1e-7)


# ---------------------------------------------------------------- posterior


def test_q_posterior_boundary_t1():
    s = make_linear_schedule(5, 0.1, 0.3)
    x0 = torch.randn(3)
    x1 = torch.randn(3)
    mean, var = q_posterior(x0, x1, 1, s)
    assert torch.allclose(mean, x0, atol=1e-6)
    assert float(var) == pytest.approx(0.0, abs=1e-15)


def test_q_posterior_hand_arithmetic():
    # beta = (0.1, 0.1): alpha_bar = (0.9, 0.81)
    s = NoiseSchedule(np.array([0.1, 0.1]))
    x0 = torch.tensor([1.0], dtype=torch.float64)
    xt = torch.tensor([2.0], dtype=torch.float64)
    mean, var = q_posterior(x0, xt, 2, s)
    assert float(var) == pytest.approx(0.1 / 0.19 * 0.1, rel=1e-12)
    coef = math.sqrt(0.9) * 0.1 / 0.19
    assert mean.item() == pytest.approx(coef * 1.0 + coef * 2.0, rel=1e-12)


def test_q_posterior_matches_grid_bayes_oracle():
    # brute-force conditioning of the Gaussian chain on a 1-D grid
    s = make_linear_schedule(5, 0.05, 0.4)
    t = 3
    x0 = 0.7
    xt = -0.4
    alpha_t = float(s.alpha_at(t))
    beta_t = float(s.beta_at(t))
    abar_prev = float(s.alpha_bar_at(t - 1))
    grid = np.linspace(-10, 10, 200001)
    # q(x_{t-1} | x0) * q(x_t | x_{t-1}), both plain forward densities
    log_p = -0.5 * (grid - math.sqrt(abar_prev) * x0) ** 2 / (1 - abar_prev)
    log_p += -0.5 * (xt - math.sqrt(alpha_t) * grid) ** 2 / beta_t
    p = np.exp(log_p - log_p.max())
    p /= np.trapz(p, grid)
    mean_oracle = np.trapz(p * grid, grid)
    var_oracle = np.trapz(p * (grid - mean_oracle) ** 2, grid)
    mean, var = q_posterior(torch.tensor([x0]), torch.tensor([xt]), t, s)
    assert mean.item() == pytest.approx(mean_oracle, abs=1e-3)
    assert float(var) == pytest.approx(var_oracle, abs=1e-3)


# ---------------------------------------------------------------- mu_from_eps


def test_mu_from_eps_identity_with_true_noise():
    s = make_linear_schedule(10, 0.05, 0.3)
    x0 = torch.randn(4, 3, dtype=torch.float64)
    eps = torch.randn(4, 3, dtype=torch.float64)
    for t in (1, 5, 10):
        xt = q_sample(x0, t, eps, s)
        direct, _ = q_posterior(x0, xt, t, s)
        via_eps = mu_from_eps(xt, t, eps, s)
        assert torch.allclose(via_eps, direct, atol=1e-10)


def test_mu_from_eps_zero_prediction():
    s = NoiseSchedule(np.array([0.19]))
    xt = torch.tensor([1.5], dtype=torch.float64)
    out = mu_from_eps(xt, 1, torch.zeros(1, dtype=torch.float64), s)
    assert out.item() == pytest.approx(1.5 / math.sqrt(0.81), rel=1e-12)


def test_mu_from_eps_alpha_near_one():
    s = NoiseSchedule(np.array([1e-12]))
    xt = torch.randn(3, dtype=torch.float64)
    assert torch.allclose(mu_from_eps(xt, 1, torch.randn(3, dtype=torch.float64), s), xt, atol=1e-5)


# ---------------------------------------------------------------- marginals


def test_marginal_consistency_monte_carlo():
    # iterate the one-step kernel and compare against the closed form
    s = make_linear_schedule(10, 0.02, 0.2)
    n = 100_000
    x0 = 1.7
    gen = torch_generator("marginal-mc")
    x = torch.full((n,), x0, dtype=torch.float64)
    for t in range(1, 11):
        z = torch.randn(n, generator=gen, dtype=torch.float64)
        x = math.sqrt(float(s.alpha_at(t))) * x + math.sqrt(float(s.beta_at(t))) * z
    abar = float(s.alpha_bar_at(10))
    want_mean = math.sqrt(abar) * x0
    want_std = math.sqrt(1 - abar)
    se_mean = want_std / math.sqrt(n)
    se_std = want_std / math.sqrt(2 * n)
    assert abs(x.mean().item() - want_mean) < 3 * se_mean
    assert abs(x.std().item() - want_std) < 3 * se_std


# ---------------------------------------------------------------- training loss


def test_training_loss_zero_for_true_noise():
    s = make_linear_schedule(10, 0.05, 0.3)
    x0 = torch.randn(6, 2, 4, 4, dtype=torch.float64)

    def oracle_model(x_t, t, layouts):
        a_bar = torch.tensor(s.alpha_bar_at(t.numpy()), dtype=x_t.dtype).reshape(-1, 1, 1, 1)
        return (x_t - torch.sqrt(a_bar) * x0) / torch.sqrt(1 - a_bar)

    loss = training_loss(x0, [null_layout(K, C)] * 6, oracle_model, s, 0.0, torch_generator(0))
    assert loss.item() == pytest.approx(0.0, abs=1e-20)


def test_training_loss_zero_model_unit_mse():
    s = make_linear_schedule(10, 0.05, 0.3)
    x0 = torch.zeros(64, 3, 8, 8)
    loss = training_loss(
        x0, [null_layout(K, C)] * 64, lambda x, t, l: torch.zeros_like(x), s, 0.0, torch_generator(1)
    )
    # E ||eps||^2 per element is 1; 3 sigma of the mean over 12288 draws
    assert abs(loss.item() - 1.0) < 3 * math.sqrt(2 / x0.numel())


@pytest.mark.parametrize("p,expect_null", [(1.0, True), (0.0, False)])
def test_training_loss_conditioning_dropout(p, expect_null, tiny_layout):
    s = make_linear_schedule(10, 0.05, 0.3)
    seen = []

    def spy(x_t, t, layouts):
        seen.extend(layouts)
        return torch.zeros_like(x_t)

    x0 = torch.zeros(8, 1, 2, 2)
    training_loss(x0, [tiny_layout] * 8, spy, s, p, torch_generator(2))
    nulls = [l.n_real == 0 for l in seen]
    assert all(nulls) if expect_null else not any(nulls)


def test_training_loss_bad_p_uncond():
    s = make_linear_schedule(2, 0.1, 0.2)
    with pytest.raises(ValueError):
        training_loss(torch.zeros(1, 1), [null_layout(K, C)], lambda *a: 0, s, 1.5, torch_generator(0))


# ---------------------------------------------------------------- guidance


def fixed_models(u, c):
    def model(x_t, t, layout):
        return c if layout.n_real > 0 else u

    return model


def test_guided_eps_endpoints(tiny_layout):
    u = torch.randn(2, 3)
    c = torch.randn(2, 3)
    model = fixed_models(u, c)
    assert torch.equal(guided_eps(model, torch.zeros(2, 3), 1, tiny_layout, null_guidance(1.0)), c)
    assert torch.equal(guided_eps(model, torch.zeros(2, 3), 1, tiny_layout, null_guidance(0.0)), u)


def test_guided_eps_linearity(tiny_layout):
    v = torch.randn(2, 3)
    model = fixed_models(torch.zeros(2, 3), v)
    out = guided_eps(model, torch.zeros(2, 3), 1, tiny_layout, null_guidance(2.0))
    assert torch.allclose(out, 2.0 * v, atol=1e-7)


def test_guided_eps_affine_in_scale(tiny_layout):
    u = torch.randn(3, 2)
    c = torch.randn(3, 2)
    model = fixed_models(u, c)
    for s_val in (0.0, 0.3, 1.0, 1.7, 2.5):
        out = guided_eps(model, torch.zeros(3, 2), 1, tiny_layout, null_guidance(s_val))
        assert torch.allclose(out, (1 - s_val) * u + s_val * c, atol=1e-7)


def test_guided_eps_extrapolate_form(tiny_layout):
    u = torch.randn(3, 2)
    c = torch.randn(3, 2)
    model = fixed_models(u, c)
    out = guided_eps(model, torch.zeros(3, 2), 1, tiny_layout, null_guidance(0.5, "extrapolate"))
    assert torch.allclose(out, c + 0.5 * (c - u), atol=1e-7)


def test_guidance_spec_validation(tiny_layout):
    with pytest.raises(ValueError):
        null_guidance(-0.1)
    with pytest.raises(ValueError):
        null_guidance(1.0, "other")
    with pytest.raises(ValueError):
        GuidanceSpec(scale=1.0, null_layout=tiny_layout)  # has real objects


# ---------------------------------------------------------------- samplers


def test_ancestral_deterministic(tiny_layout):
    s = make_linear_schedule(5, 0.1, 0.4)
    model = lambda x, t, l: 0.1 * torch.tanh(x)
    a = ancestral_sample(model, tiny_layout, null_guidance(), s, seed=9, shape=(1, 1, 4, 4))
    b = ancestral_sample(model, tiny_layout, null_guidance(), s, seed=9, shape=(1, 1, 4, 4))
    assert torch.equal(a, b)


def test_ancestral_single_step_hand_value(tiny_layout):
    # T=1, beta=0.5, model = 0: x_0 = x_1 / sqrt(0.5), clipped to [-1, 1]
    s = NoiseSchedule(np.array([0.5]))
    model = lambda x, t, l: torch.zeros_like(x)
    out = ancestral_sample(model, tiny_layout, null_guidance(), s, seed=3, shape=(1, 1, 2, 2))
    from ldlab.diffusion import _init_noise

    want = (_init_noise(3, (1, 1, 2, 2)) / math.sqrt(0.5)).clamp(-1, 1)
    assert torch.allclose(out, want, atol=1e-6)


def test_ancestral_seeds_differ(tiny_layout):
    s = make_linear_schedule(5, 0.1, 0.4)
    model = lambda x, t, l: 0.1 * torch.tanh(x)
    a = ancestral_sample(model, tiny_layout, null_guidance(), s, seed=1, shape=(1, 1, 4, 4))
    b = ancestral_sample(model, tiny_layout, null_guidance(), s, seed=2, shape=(1, 1, 4, 4))
    assert not torch.equal(a, b)


def test_fast_sample_full_steps_matches_zero_noise_ancestral(tiny_layout):
    s = make_linear_schedule(10, 0.05, 0.35)
    model = lambda x, t, l: 0.3 * torch.tanh(x)
    anc = ancestral_sample(
        model, tiny_layout, null_guidance(), s, seed=11, shape=(1, 2, 4, 4), zero_noise=True
    )
    fast = fast_sample(model, tiny_layout, null_guidance(), s, 10, seed=11, shape=(1, 2, 4, 4))
    assert (anc - fast).abs().max().item() <= 1e-5


def test_fast_sample_single_step_single_model_pair(tiny_layout):
    s = make_linear_schedule(10, 0.05, 0.35)
    calls = []

    def spy(x, t, l):
        calls.append(t)
        return torch.zeros_like(x)

    fast_sample(spy, tiny_layout, null_guidance(), s, 1, seed=0, shape=(1, 1, 2, 2))
    assert len(calls) == 2  # one conditional + one unconditional evaluation


def test_fast_sample_deterministic_and_step_counts(tiny_layout):
    s = make_linear_schedule(20, 0.05, 0.35)
    model = lambda x, t, l: 0.2 * torch.tanh(x)
    a = fast_sample(model, tiny_layout, null_guidance(), s, 7, seed=5, shape=(1, 1, 4, 4))
    b = fast_sample(model, tiny_layout, null_guidance(), s, 7, seed=5, shape=(1, 1, 4, 4))
    assert torch.equal(a, b)
    with pytest.raises(InvalidStepCount):
        fast_sample(model, tiny_layout, null_guidance(), s, 0, seed=5, shape=(1, 1, 4, 4))
    with pytest.raises(InvalidStepCount):
        fast_sample(model, tiny_layout, null_guidance(), s, 21, seed=5, shape=(1, 1, 4, 4))


def test_fast_sample_timesteps_properties():
    for T, n in [(1000, 25), (50, 25), (50, 50), (10, 1), (7, 3)]:
        ts = fast_sample_timesteps(T, n)
        assert len(ts) == n
        assert ts[0] == T
        assert all(a > b for a, b in zip(ts, ts[1:]))
        assert all(1 <= t <= T for t in ts)
    assert fast_sample_timesteps(10, 10) == list(range(10, 0, -1))
