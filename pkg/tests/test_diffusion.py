import numpy as np
import pytest

from sinematch.diffusion import (
    DiffusionSchedule,
    SamplerConfig,
    ancestral_sample,
    diffusion_loss,
    invert_with_oracle,
    load_pool,
    q_sample,
    save_pool,
    train_denoiser,
)
from sinematch.models import DenoiserConfig, init_denoiser
from sinematch.rng import stream
from sinematch.tensor import Tensor

TINY_DEN = DenoiserConfig(base_channels=4, depth=1, time_embed_dim=8)


def optimal_gaussian_denoiser(schedule, mu0, sigma0):
    """Closed-form eps predictor for x0 ~ N(mu0, sigma0^2) (1-pixel task).

    With x_t = a*x0 + b*eps the posterior mean of x0 is linear in x_t, and
    the optimal noise estimate is (x_t - a*E[x0|x_t]) / b.
    """

    def denoise(x_t, ts):
        ab = schedule.alpha_bars[np.asarray(ts) - 1].reshape(
            (-1,) + (1,) * (x_t.ndim - 1)
        )
        a = np.sqrt(ab)
        b = np.sqrt(1.0 - ab)
        post_mean = mu0 + a * sigma0**2 / (a**2 * sigma0**2 + b**2) * (x_t - a * mu0)
        return (x_t - a * post_mean) / b

    return denoise


class TestSchedule:
    def test_linear_defaults(self):
        s = DiffusionSchedule.linear()
        assert s.num_steps == 400
        assert s.betas[0] == pytest.approx(1e-4)
        assert s.betas[-1] == pytest.approx(0.02)

    @pytest.mark.parametrize("t_steps,b1,bT", [(400, 1e-4, 0.02), (50, 1e-3, 0.1), (7, 1e-4, 0.3)])
    def test_invariants(self, t_steps, b1, bT):
        s = DiffusionSchedule.linear(t_steps, b1, bT)
        assert np.all(s.betas > 0) and np.all(s.betas < 1)
        if t_steps > 1:
            assert np.all(np.diff(s.betas) > 0)
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))
        for t in (1, t_steps // 2 or 1, t_steps):
            prod = np.prod(s.alphas[:t])
            assert abs(s.alpha_bars[t - 1] - prod) < 1e-12

    def test_invalid_betas_rejected(self):
        with pytest.raises(ValueError):
            DiffusionSchedule.linear(10, 0.2, 0.1)  # decreasing
        with pytest.raises(ValueError):
            DiffusionSchedule.linear(10, 0.0, 0.1)  # zero start

    def test_dict_roundtrip(self):
        s = DiffusionSchedule.linear(123, 2e-4, 0.05)
        s2 = DiffusionSchedule.from_dict(s.to_dict())
        assert np.array_equal(s.betas, s2.betas)


class TestQSample:
    def test_zero_noise(self, rng):
        s = DiffusionSchedule.linear(50, 1e-3, 0.1)
        x0 = rng.standard_normal((2, 1, 4, 4))
        xt = q_sample(s, x0, 10, np.zeros_like(x0))
        assert np.allclose(xt, np.sqrt(s.alpha_bars[9]) * x0)

    def test_no_noise_limit(self, rng):
        # beta ~ 0 makes alpha_bar ~ 1 and x_t ~ x0
        s = DiffusionSchedule.linear(1, 1e-9, 1e-9)
        x0 = rng.standard_normal((3, 2))
        eps = rng.standard_normal((3, 2))
        assert np.allclose(q_sample(s, x0, 1, eps), x0, atol=1e-3)

    def test_marginal_variance_at_T(self):
        s = DiffusionSchedule.linear(400, 1e-4, 0.02)
        r = stream(5, 0)
        x0 = r.standard_normal((10_000, 1))
        eps = r.standard_normal((10_000, 1))
        xt = q_sample(s, x0, 400, eps)
        assert abs(xt.var() - 1.0) < 0.05

    def test_per_item_timesteps(self, rng):
        s = DiffusionSchedule.linear(50, 1e-3, 0.1)
        x0 = rng.standard_normal((4, 1, 2, 2))
        eps = rng.standard_normal(x0.shape)
        ts = np.array([1, 10, 25, 50])
        batched = q_sample(s, x0, ts, eps)
        for k, t in enumerate(ts):
            single = q_sample(s, x0[k], int(t), eps[k])
            assert np.allclose(batched[k], single)

    def test_t_out_of_range(self, rng):
        s = DiffusionSchedule.linear(10, 1e-3, 0.1)
        x = rng.standard_normal((1, 2))
        with pytest.raises(IndexError):
            q_sample(s, x, 0, x)
        with pytest.raises(IndexError):
            q_sample(s, x, 11, x)


class TestInvertWithOracle:
    def test_roundtrip_exact(self, rng):
        s = DiffusionSchedule.linear(400, 1e-4, 0.02)
        x0 = rng.standard_normal((1, 1, 32, 32))
        for t in (1, 200, 400):
            eps = rng.standard_normal(x0.shape)
            xt = q_sample(s, x0, t, eps)
            back = invert_with_oracle(s, xt, t, eps)
            assert np.abs(back - x0).max() <= 1e-9

    def test_zero_eps_is_rescale(self, rng):
        s = DiffusionSchedule.linear(50, 1e-3, 0.1)
        xt = rng.standard_normal((2, 3))
        back = invert_with_oracle(s, xt, 7, np.zeros_like(xt))
        assert np.allclose(back, xt / np.sqrt(s.alpha_bars[6]))


class TestDiffusionLoss:
    def test_oracle_noise_gives_zero(self, rng):
        s = DiffusionSchedule.linear(60, 1e-3, 0.08)
        x0 = rng.standard_normal((8, 1, 4, 4))

        def perfect(x_t, ts):
            ab = s.alpha_bars[np.asarray(ts) - 1].reshape(-1, 1, 1, 1)
            eps = (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
            return Tensor(eps)

        loss = diffusion_loss({}, TINY_DEN, s, x0, stream(0, 0), denoise_fn=perfect)
        assert loss.item() < 1e-12

    def test_zero_predictor_matches_chi_square_moment(self):
        s = DiffusionSchedule.linear(60, 1e-3, 0.08)
        r = stream(1, 0)
        x0 = np.zeros((10_000, 1, 2, 2))

        def zero(x_t, ts):
            return Tensor(np.zeros_like(x_t))

        loss = diffusion_loss({}, TINY_DEN, s, x0, r, denoise_fn=zero)
        # E||eps||^2 = number of pixels per item
        assert loss.item() == pytest.approx(4.0, rel=0.02)

    def test_nonnegative_and_differentiable(self, rng):
        s = DiffusionSchedule.linear(20, 1e-3, 0.1)
        params = init_denoiser(TINY_DEN, stream(0, 0))
        loss = diffusion_loss(params, TINY_DEN, s, rng.standard_normal((2, 1, 8, 8)), stream(2, 0))
        assert loss.item() >= 0.0
        assert loss.requires_grad


class TestAncestralSample:
    def test_empty_request(self):
        s = DiffusionSchedule.linear(10, 1e-3, 0.1)
        params = init_denoiser(TINY_DEN, stream(0, 0))
        out = ancestral_sample(params, TINY_DEN, s, 0, seed=0, image_shape=(1, 8, 8))
        assert out.shape == (0, 1, 8, 8)

    def test_shape_contract(self):
        s = DiffusionSchedule.linear(5, 1e-3, 0.1)
        params = init_denoiser(TINY_DEN, stream(0, 0))
        out = ancestral_sample(params, TINY_DEN, s, 3, seed=1, image_shape=(1, 8, 8))
        assert out.shape == (3, 1, 8, 8)
        assert np.all((out >= -1.0) & (out <= 1.0))

    def test_deterministic_in_seed(self):
        s = DiffusionSchedule.linear(5, 1e-3, 0.1)
        params = init_denoiser(TINY_DEN, stream(0, 0))
        a = ancestral_sample(params, TINY_DEN, s, 5, seed=9, image_shape=(1, 8, 8), batch=2)
        b = ancestral_sample(params, TINY_DEN, s, 5, seed=9, image_shape=(1, 8, 8), batch=2)
        assert np.array_equal(a, b)
        c = ancestral_sample(params, TINY_DEN, s, 5, seed=10, image_shape=(1, 8, 8), batch=2)
        assert not np.array_equal(a, c)

    def test_one_pixel_gaussian_with_closed_form_denoiser(self):
        s = DiffusionSchedule.linear(400, 1e-4, 0.02)
        denoise = optimal_gaussian_denoiser(s, mu0=0.5, sigma0=0.1)
        out = ancestral_sample(
            None, None, s, 2000, seed=3, image_shape=(1, 1, 1), denoise_fn=denoise
        )
        assert abs(out.mean() - 0.5) < 0.05
        assert abs(out.std() - 0.1) < 0.05


class TestTrainDenoiser:
    def test_loss_decreases_on_tiny_task(self):
        s = DiffusionSchedule.linear(20, 1e-3, 0.15)
        r = stream(0, 3)
        # one fixed pattern: easy to memorize
        images = np.tile(r.standard_normal((1, 1, 8, 8)) * 0.5, (32, 1, 1, 1))
        params, losses = train_denoiser(
            TINY_DEN, s, images, seed=1, steps=60, batch=8, learning_rate=3e-4, log_every=20
        )
        assert len(losses) == 3
        assert losses[-1][1] < losses[0][1]


class TestPoolFiles:
    def test_roundtrip(self, tmp_path, rng):
        images = np.clip(rng.standard_normal((10, 1, 8, 8)), -1, 1)
        save_pool(tmp_path / "pool", images, meta={"seed": 7, "schedule": {"num_steps": 5}})
        back, meta = load_pool(tmp_path / "pool")
        assert np.array_equal(back, images.astype(np.float32).astype(np.float64))
        assert meta["seed"] == 7
        assert meta["count"] == 10

    def test_missing_pool(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="pool"):
            load_pool(tmp_path / "nothing")

    def test_sampler_config_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(num_samples=-1)
        with pytest.raises(ValueError):
            SamplerConfig(num_samples=1, sigma_mode="tilde")
