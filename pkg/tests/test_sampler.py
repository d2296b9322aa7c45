import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from staintrans.codec import CodecSpec
from staintrans.denoiser import ConditioningBundle, DenoiserConfig, UNet
from staintrans.diffusion import forward_sample
from staintrans.sampler import (
    SamplerConfig,
    ddim_invert,
    ddim_step,
    denoise,
    generate,
    inversion_path,
    reconstruct,
    translate,
)
from staintrans.schedule import (
    EtaSchedule,
    NoiseSchedule,
    ddim_sigma,
    make_linear_schedule,
    rescale_zero_terminal_snr,
    trailing_timesteps,
)

ETA0 = EtaSchedule("constant", 0.0, 0.0)
SHAPE = (2, 3, 8, 8)


@pytest.fixture(scope="module")
def sched():
    return rescale_zero_terminal_snr(make_linear_schedule(1000, 1e-4, 0.02))


def cond(mode="generation", shape=SHAPE):
    return ConditioningBundle(mode, torch.zeros(shape, dtype=torch.float64), torch.zeros(shape[0], 1, 4, dtype=torch.float64))


class TrueV:
    """Returns the exact velocity of a known (x0, eps) pair, whatever the input."""

    def __init__(self, s, x0, eps):
        self.s, self.x0, self.eps = s, x0, eps

    def __call__(self, z, t, c):
        a = self.s.alpha_bar(t)
        return math.sqrt(a) * self.eps - math.sqrt(1 - a) * self.x0


def pair(seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(SHAPE, generator=g, dtype=torch.float64), torch.randn(SHAPE, generator=g, dtype=torch.float64)


def test_eta_zero_step_ignores_noise(sched):
    x0, eps = pair()
    d = TrueV(sched, x0, eps)
    z = forward_sample(sched, x0, 500, eps)
    a = ddim_step(d, sched, z, 500, 400, cond(), 0.0, torch.zeros(SHAPE, dtype=torch.float64))
    b = ddim_step(d, sched, z, 500, 400, cond(), 0.0, torch.randn(SHAPE, dtype=torch.float64))
    assert torch.equal(a, b)


def test_final_step_returns_x0_estimate(sched):
    x0, eps = pair(1)
    z = forward_sample(sched, x0, 5, eps)
    out = ddim_step(TrueV(sched, x0, eps), sched, z, 5, 0, cond(), 1.0, torch.randn(SHAPE, dtype=torch.float64))
    torch.testing.assert_close(out, x0, rtol=0, atol=1e-12)


def test_step_validation(sched):
    x0, eps = pair()
    d = TrueV(sched, x0, eps)
    with pytest.raises(ValueError):
        ddim_step(d, sched, x0, 10, 10, cond(), 0.0)
    with pytest.raises(ValueError):
        ddim_step(d, sched, x0, 10, 5, cond(), 1.5)
    with pytest.raises(ValueError):
        ddim_step(d, sched, x0, 10, 5, cond(), 0.5, torch.zeros(1, 3, 8, 8))
    with pytest.raises(ValueError):
        ddim_step(d, sched, x0, 10, 5, cond(), 0.5)


def test_oracle_reproduces_analytic_trajectory(sched):
    x0, eps = pair(2)
    d = TrueV(sched, x0, eps)
    plan = trailing_timesteps(1000, 50)
    z = forward_sample(sched, x0, 1000, eps)
    worst = 0.0
    for t, tp in plan.pairs():
        z = ddim_step(d, sched, z, t, tp, cond(), 0.0)
        want = x0 if tp == 0 else forward_sample(sched, x0, tp, eps)
        worst = max(worst, (z - want).abs().max().item())
    assert worst <= 1e-5


def test_oracle_invert_denoise_round_trip(sched):
    x0, eps = pair(3)
    d = TrueV(sched, x0, eps)
    plan = trailing_timesteps(1000, 200)
    top = inversion_path(sched, plan)[-1]
    z_top = ddim_invert(d, sched, x0, plan, cond())
    torch.testing.assert_close(z_top, forward_sample(sched, x0, top, eps), rtol=0, atol=1e-5)
    back = denoise(d, sched, z_top, plan, cond("translation"), ETA0, start=top)
    assert (back - x0).abs().max().item() <= 1e-5


def test_one_step_inversion_with_zero_eps():
    s = NoiseSchedule(T=2, betas=np.zeros(2), alpha_bars=np.array([0.5, 0.25]))
    seen = []

    def zero_eps(z, t, c):
        a = s.alpha_bar(t)
        seen.append(z.clone())
        return -math.sqrt((1 - a) / a) * z

    z = torch.randn(SHAPE, dtype=torch.float64)
    out = ddim_invert(zero_eps, s, z, trailing_timesteps(2, 2), cond())
    # the last hop 1 -> 2 is a pure rescale by sqrt(abar_2 / abar_1)
    torch.testing.assert_close(out, math.sqrt(0.25 / 0.5) * seen[-1], rtol=1e-12, atol=1e-12)


def test_inversion_path_stops_below_zero_snr(sched):
    assert inversion_path(sched, trailing_timesteps(1000, 200))[-1] == 995
    assert inversion_path(sched, trailing_timesteps(1000, 50))[-1] == 980
    plain = make_linear_schedule(1000, 1e-4, 0.02)
    path = inversion_path(plain, trailing_timesteps(1000, 10))
    assert path == [0, 100, 200, 300, 400, 500, 600, 700, 800, 900, 1000]
    with pytest.raises(ValueError):
        inversion_path(sched, trailing_timesteps(1000, 1))


def test_inversion_rejects_translation_mode(sched):
    x0, eps = pair()
    with pytest.raises(ValueError):
        ddim_invert(TrueV(sched, x0, eps), sched, x0, trailing_timesteps(1000, 10), cond("translation"))


def test_inversion_is_deterministic(sched):
    x0, eps = pair(4)
    d = TrueV(sched, x0, eps)
    plan = trailing_timesteps(1000, 20)
    assert torch.equal(ddim_invert(d, sched, x0, plan, cond()), ddim_invert(d, sched, x0, plan, cond()))


def test_denoise_noise_stream(sched):
    def linear(z, t, c):
        return 0.5 * z

    plan = trailing_timesteps(1000, 20)
    z = torch.randn(SHAPE, dtype=torch.float64)
    eta = EtaSchedule("cosine", 0.2, 1.0)
    a = denoise(linear, sched, z, plan, cond(), eta, seed=7)
    assert torch.equal(a, denoise(linear, sched, z, plan, cond(), eta, seed=7))
    assert not torch.equal(a, denoise(linear, sched, z, plan, cond(), eta, seed=8))
    assert torch.equal(denoise(linear, sched, z, plan, cond(), ETA0, seed=1),
                       denoise(linear, sched, z, plan, cond(), ETA0, seed=2))


def test_denoise_start_must_be_in_plan(sched):
    x0, eps = pair()
    with pytest.raises(ValueError):
        denoise(TrueV(sched, x0, eps), sched, x0, trailing_timesteps(1000, 10), cond(), ETA0, start=555)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(1e-4, 0.5), min_size=2, max_size=40), st.floats(0, 1), st.data())
def test_variance_term_nonnegative(bs, eta, data):
    bs = np.asarray(bs)
    s = NoiseSchedule(T=len(bs), betas=bs, alpha_bars=np.cumprod(1 - bs))
    t = data.draw(st.integers(1, s.T))
    tp = data.draw(st.integers(0, t - 1))
    if s.alpha_bar(tp) == 1.0:
        return
    sig = eta * ddim_sigma(s, t, tp)
    assert 1 - s.alpha_bar(tp) - sig * sig >= -1e-15


# small real network on 16x16 images

@pytest.fixture(scope="module")
def tiny():
    torch.manual_seed(0)
    model = UNet(DenoiserConfig(base_width=8, d_tok=8, heads=2, patch=8, zero_init_out=False)).eval()
    s = rescale_zero_terminal_snr(make_linear_schedule(50, 1e-3, 0.1))
    rng = np.random.default_rng(0)
    imgs = [rng.integers(0, 256, (16, 16, 3), dtype=np.uint8) for _ in range(2)]
    return model, s, imgs


def test_translate_shapes_and_seeds(tiny):
    model, s, imgs = tiny
    codec = CodecSpec()
    cfg = SamplerConfig(10, 10, EtaSchedule("cosine", 0.2, 1.0), seed=3)
    out = translate(model, s, codec, imgs, cfg)
    assert len(out) == 2 and out[0].shape == imgs[0].shape and out[0].dtype == np.uint8
    again = translate(model, s, codec, imgs, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(out, again))
    single = translate(model, s, codec, imgs[0], cfg)
    assert single.shape == (16, 16, 3)


def test_translate_eta_zero_is_seed_independent(tiny):
    model, s, imgs = tiny
    a = translate(model, s, CodecSpec(), imgs[0], SamplerConfig(10, 10, ETA0, seed=1))
    b = translate(model, s, CodecSpec(), imgs[0], SamplerConfig(10, 10, ETA0, seed=2))
    assert np.array_equal(a, b)


def test_translate_step_counts_validated(tiny):
    model, s, imgs = tiny
    with pytest.raises(ValueError):
        translate(model, s, CodecSpec(), imgs[0], SamplerConfig(51, 10))
    with pytest.raises(ValueError):
        SamplerConfig(0, 10)


def test_reconstruct_returns_latents(tiny):
    model, s, imgs = tiny
    z0, z = reconstruct(model, s, CodecSpec(), imgs, 10)
    assert z0.shape == z.shape == (2, 3, 16, 16)
    assert torch.isfinite(z).all()


def test_generate_deterministic(tiny):
    model, s, _ = tiny
    cfg = SamplerConfig(10, 10)
    a = generate(model, s, CodecSpec(), (16, 16), cfg, seed=5, batch=2)
    b = generate(model, s, CodecSpec(), (16, 16), cfg, seed=5, batch=2)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert a[0].dtype == np.uint8
    with pytest.raises(ValueError):
        generate(model, s, CodecSpec("downsample", 2), (15, 16), cfg, seed=0)
