import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from mpmath import mp, mpf

from diffprosody.diffusion import (
    NoiseSchedule,
    denoise_step,
    diffusion_loss,
    linear_beta_schedule,
    posterior_sigma,
    q_sample,
    reverse_noise_scale,
    sample_prosody,
)
from diffprosody.errors import ConfigError, DivergenceError

# frozen with mpmath at 50 digits: sequential product of (1 - beta_i),
# beta_i = 1e-4 + (0.02 - 1e-4) * i / 999
ALPHA_BAR_1000 = 0.00004035829765375683314817635
# (1 - ab_499) / (1 - ab_500) * beta_500 on the same schedule
SIGMA_500 = 0.01003135541461368819584158
# alpha_t = 0.9, alpha_bar_t = 0.5, z_t = 1, eps_hat = 0.2, x = 1
STEP_VARIANCE = 1.113167202578351470269731
STEP_STD = 1.322420710689434540902065


def zero_denoiser(z, s, t, c):
    return torch.zeros_like(z)


def mp_sigma(beta, t):
    mp.dps = 40
    ab = [mpf(1)]
    for b in beta:
        ab.append(ab[-1] * (1 - mpf(float(b))))
    return (1 - ab[t - 1]) / (1 - ab[t]) * mpf(float(beta[t - 1]))


class TestSchedule:
    def test_zero_noise_is_identity(self):
        s = linear_beta_schedule(1, 0.0, 0.0)
        assert s.alpha.tolist() == [1.0]
        assert s.alpha_bar.tolist() == [1.0]

    def test_direct_product(self):
        s = linear_beta_schedule(2, 0.5, 0.5)
        assert s.alpha.tolist() == [0.5, 0.5]
        assert s.alpha_bar.tolist() == [0.5, 0.25]

    def test_long_product_matches_extended_precision(self):
        s = linear_beta_schedule(1000, 1e-4, 0.02)
        assert s.alpha_bar_at(1000) == pytest.approx(ALPHA_BAR_1000, rel=1e-12)

    def test_alpha_bar_zero_is_one(self):
        assert linear_beta_schedule(10, 1e-3, 0.1).alpha_bar_at(0) == 1.0

    @pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, -0.1, 0.02), (10, 1e-4, 1.0), (10, 0.3, 0.2)])
    def test_rejects_bad_arguments(self, args):
        with pytest.raises(ConfigError):
            linear_beta_schedule(*args)

    def test_rejects_bad_beta_table(self):
        with pytest.raises(ConfigError):
            NoiseSchedule.from_beta([0.1, 1.0])

    @given(st.lists(st.one_of(st.just(0.0), st.floats(1e-9, 0.99)), min_size=1, max_size=50))
    def test_monotone_alpha_bar(self, beta):
        s = NoiseSchedule.from_beta(beta)
        prev = np.concatenate([[1.0], s.alpha_bar[:-1]])
        assert np.all(s.alpha_bar <= prev)
        assert np.all((s.alpha_bar == prev) == (np.asarray(beta) == 0.0))
        assert np.all(s.alpha_bar > 0)


class TestForward:
    def test_noiseless_branch(self):
        s = NoiseSchedule.from_beta([0.75])  # alpha_bar = 0.25
        z0 = torch.tensor([[2.0, -4.0]])
        out = q_sample(z0, 1, torch.zeros_like(z0), s)
        assert torch.allclose(out, 0.5 * z0)

    def test_signal_free_branch(self):
        s = NoiseSchedule.from_beta([0.25])  # alpha_bar = 0.75
        eps = torch.tensor([[2.0, -4.0]])
        out = q_sample(torch.zeros_like(eps), 1, eps, s)
        assert torch.allclose(out, 0.5 * eps)

    def test_per_row_steps(self):
        s = linear_beta_schedule(5, 0.1, 0.5)
        z0 = torch.ones(2, 3, dtype=torch.float64)
        eps = torch.zeros_like(z0)
        out = q_sample(z0, torch.tensor([1, 5]), eps, s)
        assert out[0, 0].item() == pytest.approx(math.sqrt(s.alpha_bar_at(1)))
        assert out[1, 0].item() == pytest.approx(math.sqrt(s.alpha_bar_at(5)))

    @pytest.mark.parametrize("t", [0, 6])
    def test_step_out_of_range(self, t):
        s = linear_beta_schedule(5, 0.1, 0.5)
        with pytest.raises(ValueError):
            q_sample(torch.zeros(1, 2), t, torch.zeros(1, 2), s)

    def test_shape_mismatch(self):
        s = linear_beta_schedule(5, 0.1, 0.5)
        with pytest.raises(ValueError):
            q_sample(torch.zeros(1, 2), 1, torch.zeros(1, 3), s)

    @pytest.mark.parametrize("t", [1, 2, 5])
    def test_composition_matches_closed_form(self, t):
        """Chaining single-step corruption t times has the closed-form moments."""
        s = linear_beta_schedule(5, 0.05, 0.3)
        g = torch.Generator().manual_seed(t)
        z0 = torch.full((100_000, 1), 1.5, dtype=torch.float64)
        z = z0.clone()
        for i in range(1, t + 1):
            beta = float(s.beta[i - 1])
            z = math.sqrt(1 - beta) * z + math.sqrt(beta) * torch.randn(z.shape, generator=g, dtype=z.dtype)
        ab = s.alpha_bar_at(t)
        assert z.mean().item() == pytest.approx(math.sqrt(ab) * 1.5, rel=0.02)
        assert z.var().item() == pytest.approx(1 - ab, rel=0.02)


class TestPosteriorSigma:
    def test_first_step_is_exactly_zero(self):
        for s in (linear_beta_schedule(200, 1e-4, 0.02), linear_beta_schedule(3, 0.5, 0.9)):
            assert posterior_sigma(1, s) == 0.0

    def test_direct_substitution(self):
        s = NoiseSchedule.from_beta([0.5, 0.5])
        assert posterior_sigma(2, s) == pytest.approx(1.0 / 3.0, abs=1e-15)

    def test_standard_schedule_midpoint(self):
        s = linear_beta_schedule(1000, 1e-4, 0.02)
        assert posterior_sigma(500, s) == pytest.approx(SIGMA_500, rel=1e-12)

    def test_zero_noise_prefix_guard(self):
        s = NoiseSchedule.from_beta([0.0, 0.0, 0.1])
        assert posterior_sigma(2, s) == 0.0
        assert posterior_sigma(3, s) == pytest.approx(0.0)

    def test_std_is_square_root(self):
        s = linear_beta_schedule(50, 1e-3, 0.2)
        for t in (1, 7, 50):
            assert reverse_noise_scale(t, s, "std") == pytest.approx(math.sqrt(posterior_sigma(t, s)))
        with pytest.raises(ConfigError):
            reverse_noise_scale(3, s, "other")

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 60), st.floats(1e-5, 0.05), st.floats(0.0, 0.5), st.data())
    def test_against_extended_precision(self, T, lo, span, data):
        s = linear_beta_schedule(T, lo, min(lo + span, 0.99))
        t = data.draw(st.integers(1, T))
        assert posterior_sigma(t, s) == pytest.approx(float(mp_sigma(s.beta, t)), rel=1e-12, abs=1e-300)


class TestDenoiseStep:
    def test_identity_when_alpha_is_one(self):
        s = NoiseSchedule.from_beta([0.0, 0.0])
        z = torch.tensor([[0.3, -1.2]])
        out = denoise_step(z, 2, torch.tensor([[5.0, 5.0]]), torch.tensor([[9.0, 9.0]]), s)
        assert torch.equal(out, z)

    def test_last_step_ignores_x(self):
        s = linear_beta_schedule(10, 0.01, 0.2)
        z = torch.tensor([[0.3, -1.2]])
        e = torch.tensor([[0.1, 0.4]])
        a = denoise_step(z, 1, e, torch.zeros_like(z), s)
        b = denoise_step(z, 1, e, torch.full_like(z, 7.0), s)
        assert torch.equal(a, b)

    def _two_step(self):
        # alpha_2 = 0.9 and alpha_bar_2 = 0.5
        return NoiseSchedule.from_beta([1.0 - 0.5 / 0.9, 0.1])

    def test_scalar_hand_value(self):
        s = self._two_step()
        args = (torch.tensor([[1.0]], dtype=torch.float64), 2,
                torch.tensor([[0.2]], dtype=torch.float64), torch.tensor([[1.0]], dtype=torch.float64), s)
        assert denoise_step(*args).item() == pytest.approx(STEP_VARIANCE, rel=1e-12)
        assert denoise_step(*args, sigma="std").item() == pytest.approx(STEP_STD, rel=1e-12)


class TestLoss:
    def test_perfect_denoiser(self):
        s = linear_beta_schedule(20, 1e-3, 0.2)
        z0 = torch.randn(8, 6, generator=torch.Generator().manual_seed(0))
        g = torch.Generator().manual_seed(1)
        # replay the generator to know the noise the loss will draw
        g_copy = torch.Generator().manual_seed(1)
        torch.randint(1, s.T + 1, (8,), generator=g_copy)
        eps = torch.randn(z0.shape, generator=g_copy)
        loss = diffusion_loss(z0, (None, None), lambda z, c, t, ctx: eps, s, g)
        assert loss.item() == 0.0

    def test_zero_denoiser_gives_unit_loss(self):
        s = linear_beta_schedule(20, 1e-3, 0.2)
        z0 = torch.zeros(200, 64, dtype=torch.float64)
        loss = diffusion_loss(z0, (None, None), zero_denoiser, s, torch.Generator().manual_seed(2))
        assert loss.item() == pytest.approx(1.0, rel=0.05)

    def test_deterministic(self):
        s = linear_beta_schedule(20, 1e-3, 0.2)
        z0 = torch.randn(4, 3, generator=torch.Generator().manual_seed(0))
        den = lambda z, c, t, ctx: 0.5 * z  # noqa: E731
        a = diffusion_loss(z0, (None, None), den, s, torch.Generator().manual_seed(5))
        b = diffusion_loss(z0, (None, None), den, s, torch.Generator().manual_seed(5))
        assert a.item() == b.item()

    def test_empty_batch(self):
        s = linear_beta_schedule(20, 1e-3, 0.2)
        with pytest.raises(ValueError):
            diffusion_loss(torch.zeros(0, 3), (None, None), zero_denoiser, s, torch.Generator())

    def test_non_finite_loss(self):
        s = linear_beta_schedule(20, 1e-3, 0.2)
        bad = lambda z, c, t, ctx: torch.full_like(z, float("nan"))  # noqa: E731
        with pytest.raises(DivergenceError):
            diffusion_loss(torch.zeros(2, 3), (None, None), bad, s, torch.Generator())


class TestSampler:
    def test_single_step_closed_form_variance(self):
        s = NoiseSchedule.from_beta([0.2])
        s_cur = torch.zeros(10_000, 1, dtype=torch.float64)
        z = sample_prosody(zero_denoiser, s_cur, None, s, torch.Generator().manual_seed(0), 4)
        var = z.var(dim=0)
        assert torch.allclose(var, torch.full_like(var, 1 / 0.8), rtol=0.05)

    def test_seeds_differ(self):
        s = linear_beta_schedule(10, 1e-3, 0.2)
        s_cur = torch.zeros(3, 1)
        a = sample_prosody(zero_denoiser, s_cur, None, s, torch.Generator().manual_seed(0), 4)
        b = sample_prosody(zero_denoiser, s_cur, None, s, torch.Generator().manual_seed(1), 4)
        c = sample_prosody(zero_denoiser, s_cur, None, s, torch.Generator().manual_seed(0), 4)
        assert not torch.equal(a, b)
        assert torch.equal(a, c)

    def test_divergence_reports_step(self):
        s = linear_beta_schedule(10, 1e-3, 0.2)
        bad = lambda z, c, t, ctx: torch.full_like(z, float("inf"))  # noqa: E731
        with pytest.raises(DivergenceError, match="step 10"):
            sample_prosody(bad, torch.zeros(2, 1), None, s, torch.Generator(), 3)

    def test_oracle_denoiser_recovers_point(self):
        """The exact noise predictor for a point mass at mu drives samples to mu."""
        s = linear_beta_schedule(50, 1e-3, 0.3)
        mu = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)

        def exact(z, c, t, ctx):
            ab = torch.as_tensor(s.alpha_bar[t.numpy() - 1], dtype=z.dtype)[:, None]
            return (z - ab.sqrt() * mu) / (1 - ab).sqrt()

        z = sample_prosody(exact, torch.zeros(500, 1, dtype=torch.float64), None, s,
                           torch.Generator().manual_seed(3), 3, sigma="std")
        assert torch.linalg.vector_norm(z - mu, dim=1).max().item() < 1e-6
