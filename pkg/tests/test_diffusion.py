import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pidimt.config import SampleConfig
from pidimt.diffusion import (Anchor, NoiseSchedule, SolverState, initial_latent, lambda_grid, make_target,
                              masked_mse, perturb, sample_times, solve, solver_step, to_data_prediction,
                              vp_marginal)
from pidimt.numeric import DimensionError, ParameterError
from pidimt.planner import loss_terms, sample

SCHED = NoiseSchedule()


class GaussianToy:
    """Data ~ N(mu, s^2) per coordinate; exact posterior mean and probability-flow endpoint."""

    def __init__(self, mu=0.7, s=0.5, schedule=SCHED):
        self.mu, self.s, self.sched = mu, s, schedule

    def x0_hat(self, x, t):
        a, sg = self.sched.marginal(t)
        return self.mu + a * self.s**2 / (a**2 * self.s**2 + sg**2) * (x - a * self.mu)

    def endpoint(self, x_T, t_T, t_e):
        aT, sT = self.sched.marginal(t_T)
        ae, se = self.sched.marginal(t_e)
        z = (x_T - aT * self.mu) / math.sqrt(aT**2 * self.s**2 + sT**2)
        return ae * self.mu + math.sqrt(ae**2 * self.s**2 + se**2) * z


def test_marginal_closed_form_at_one():
    assert SCHED.integral_beta(1.0) == pytest.approx(10.05)
    a, s = vp_marginal(1.0)
    assert a == pytest.approx(math.exp(-5.025), rel=1e-12)
    assert a == pytest.approx(6.56e-3, rel=2e-3)
    assert s == pytest.approx(0.99998, abs=1e-5)


def test_variance_preservation_on_dense_grid():
    a, s = SCHED.marginal(np.linspace(0, 1, 1000))
    np.testing.assert_allclose(a**2 + s**2, 1.0, atol=1e-12)


def test_schedule_rejects_times_outside_unit_interval():
    for t in (-0.1, 1.1, float("nan")):
        with pytest.raises(ParameterError):
            SCHED.marginal(t)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-4, 1.0))
def test_lambda_inverse_round_trip(t):
    assert SCHED.t_of_lambda(SCHED.lam(t)) == pytest.approx(t, rel=1e-9)


def test_lambda_grid_strictly_decreasing():
    for n in (1, 5, 10, 40):
        ts = lambda_grid(n, SCHED)
        lams = SCHED.lam(ts)
        assert ts[0] == 1.0 and ts[-1] == 1e-3
        assert np.all(np.diff(lams) > 0)
        np.testing.assert_allclose(np.diff(lams), np.diff(lams)[0], rtol=1e-9)
    with pytest.raises(ParameterError):
        lambda_grid(0, SCHED)


def test_perturb_examples():
    x0 = torch.randn(2, 3, 5, 4, dtype=torch.float64)
    eps = torch.randn_like(x0)
    assert torch.equal(perturb(x0, 0.0, eps), x0)
    a, _ = SCHED.marginal(0.4)
    torch.testing.assert_close(perturb(x0, 0.4, torch.zeros_like(x0)), a * x0)
    x_t = perturb(x0, np.array([0.2, 0.9]), eps, anchor_frames=1)
    assert torch.equal(x_t[:, :, 0], x0[:, :, 0])
    a1, s1 = SCHED.marginal(0.9)
    torch.testing.assert_close(x_t[1, :, 1:], a1 * x0[1, :, 1:] + s1 * eps[1, :, 1:])
    with pytest.raises(DimensionError):
        perturb(x0, 0.1, eps[:1])


def test_perturb_monte_carlo_statistics():
    x0 = torch.tensor(1.7, dtype=torch.float64).expand(100_000)
    eps = torch.as_tensor(np.random.default_rng(0).standard_normal(100_000))
    x_t = perturb(x0, 0.5, eps)
    a, s = SCHED.marginal(0.5)
    assert abs(x_t.mean().item() - a * 1.7) <= 0.01 * a * 1.7
    assert abs(x_t.std().item() - s) <= 0.01 * s


def test_sample_times_range():
    rng = np.random.default_rng(0)
    for kind in ("uniform", "logit_normal"):
        t = sample_times(1000, rng, 1e-3, kind)
        assert t.min() >= 1e-3 and t.max() <= 1.0
    with pytest.raises(ParameterError):
        sample_times(3, rng, kind="cosine")


def test_targets_and_data_prediction():
    x0, eps = torch.randn(3, 4, dtype=torch.float64), torch.randn(3, 4, dtype=torch.float64)
    assert make_target("clean_signal", x0, eps).target is x0
    assert make_target("scaled_noise", x0, eps).target is eps
    x_t = perturb(x0, 0.6, eps)
    torch.testing.assert_close(to_data_prediction("scaled_noise", eps, x_t, 0.6, SCHED), x0)
    with pytest.raises(ParameterError):
        make_target("velocity", x0, eps)


def test_masked_mse():
    pred = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    tgt = torch.zeros(2, 2)
    mask = torch.tensor([[True, False], [True, True]])
    assert masked_mse(pred, tgt, mask).item() == pytest.approx((1 + 9 + 16) / 3)
    assert masked_mse(pred, pred, mask).item() == 0.0


def test_single_step_is_first_order_exponential_integrator():
    toy = GaussianToy()
    x_T = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    out = solve(toy.x0_hat, x_T, 1, SCHED)
    a_e, s_e = SCHED.marginal(1e-3)
    _, s_T = SCHED.marginal(1.0)
    h = SCHED.lam(1e-3) - SCHED.lam(1.0)
    expected = s_e / s_T * x_T - a_e * math.expm1(-h) * toy.x0_hat(x_T, 1.0)
    torch.testing.assert_close(out, expected)


def toy_errors(steps, toy=None, t_max=1.0, t_min=1e-3):
    toy = toy or GaussianToy()
    x_T = torch.linspace(-2.5, 2.5, 11, dtype=torch.float64)
    exact = toy.endpoint(x_T, t_max, t_min)
    return [float((solve(toy.x0_hat, x_T, n, SCHED, t_max=t_max, t_min=t_min) - exact).abs().max())
            for n in steps]


def loglog_slope(steps, errors):
    return -np.polyfit(np.log(steps), np.log(errors), 1)[0]


def test_sampler_second_order_on_unit_log_snr_window():
    # log-SNR in [-1, 1]: five steps are already in the asymptotic regime
    steps = np.array([5, 10, 20, 40])
    toy = GaussianToy(mu=0.7, s=0.25)
    errs = toy_errors(steps, toy, SCHED.t_of_lambda(-1.0), SCHED.t_of_lambda(1.0))
    assert 1.7 <= loglog_slope(steps, errs) <= 2.3


def test_sampler_second_order_on_full_interval_asymptotically():
    steps = np.array([40, 80, 160, 320])
    assert 1.7 <= loglog_slope(steps, toy_errors(steps)) <= 2.3


def test_anchor_clamp_every_step_and_idempotent():
    toy = GaussianToy()
    mask = torch.zeros(4, 6, dtype=torch.bool)
    mask[:, 0] = True
    values = torch.zeros(4, 6, dtype=torch.float64)
    values[:, 0] = torch.tensor([0.1, -0.3, 1e-7, 5.0], dtype=torch.float64)
    anchor = Anchor(mask, values)
    x = torch.randn(4, 6, dtype=torch.float64)
    assert torch.equal(anchor.apply(anchor.apply(x)), anchor.apply(x))
    seen = []

    def check(k, state):
        seen.append(k)
        assert torch.equal(state.x[:, 0], values[:, 0])

    solve(toy.x0_hat, x, 7, SCHED, anchor, callback=check)
    assert seen == list(range(-1, 7))


def test_solver_step_rejects_out_of_range_index():
    state = SolverState(lambda_grid(3, SCHED), torch.zeros(2))
    with pytest.raises(ParameterError):
        solver_step(state, 3, lambda x, t: x)


def test_initial_latent_temperature_zero_is_anchor_only():
    mask = torch.zeros(2, 3, dtype=torch.bool)
    mask[:, 0] = True
    anchor = Anchor(mask, torch.ones(2, 3))
    x = initial_latent(anchor, (2, 3), 0.0, torch.Generator().manual_seed(0))
    assert torch.equal(x, mask.float())
    g = torch.Generator().manual_seed(0)
    x = initial_latent(anchor, (2, 3), 0.5, g)
    ref = 0.5 * torch.randn((2, 3), generator=torch.Generator().manual_seed(0))
    torch.testing.assert_close(x[:, 1:], ref[:, 1:])


# --------------------------------------------------------------- model level


def test_zero_output_model_loss_is_mean_square_of_target(tiny_model, tiny_batch):
    batch, target = tiny_batch
    with torch.no_grad():
        tiny_model.denoiser.out_proj.weight.zero_()
        tiny_model.denoiser.out_proj.bias.zero_()
    terms = loss_terms(tiny_model, batch, target, np.random.default_rng(0), ph=None)
    x0 = tiny_model.to_model_units(target)[:, :, 1:]
    valid = batch.agent_valid[:, :, None, None].expand_as(x0)
    expected = (x0**2)[valid].mean()
    torch.testing.assert_close(terms.denoise, expected)


def test_perfect_model_has_zero_loss(tiny_model, tiny_batch):
    batch, target = tiny_batch
    x0 = tiny_model.to_model_units(target)

    class Oracle(torch.nn.Module):
        def __init__(self, base):
            super().__init__()
            self.base = base
            self.state_scale = base.state_scale

        def to_model_units(self, t):
            return self.base.to_model_units(t)

        def encode(self, b):
            return self.base.encode(b)

        def forward(self, *args, **kwargs):
            return x0

    terms = loss_terms(Oracle(tiny_model), batch, target, np.random.default_rng(0), ph=None)
    assert terms.denoise.item() == 0.0


def test_sample_anchor_and_determinism(tiny_model, tiny_batch):
    batch, _ = tiny_batch
    cfg = SampleConfig(steps=4, phnn=False)
    a = sample(tiny_model, batch, cfg)
    b = sample(tiny_model, batch, cfg)
    assert torch.equal(a, b)
    valid = batch.agent_valid
    assert torch.equal(a[:, :, 0][valid], batch.current[valid])
    zero_t = SampleConfig(steps=4, phnn=False, temperature=0.0)
    z1 = sample(tiny_model, batch, zero_t, generator=torch.Generator().manual_seed(1))
    z2 = sample(tiny_model, batch, zero_t, generator=torch.Generator().manual_seed(2))
    assert torch.equal(z1, z2)
    other = sample(tiny_model, batch, SampleConfig(steps=4, phnn=False, seed=5))
    assert not torch.equal(a, other)


def test_sample_anchor_held_at_every_step(tiny_model, tiny_batch):
    batch, _ = tiny_batch
    anchor_vals = tiny_model.to_model_units(batch.current)
    hits = []

    def check(k, state):
        hits.append(torch.equal(state.x[:, :, 0][batch.agent_valid], anchor_vals[batch.agent_valid]))

    sample(tiny_model, batch, SampleConfig(steps=5), callback=check)
    assert hits and all(hits)


def test_sample_scaled_noise_mode_runs(tiny_model, tiny_batch):
    batch, _ = tiny_batch
    out = sample(tiny_model, batch, SampleConfig(steps=3), mode="scaled_noise")
    assert torch.isfinite(out).all()
