"""DDIM stepping, DDIM inversion and the translate / generate pipelines.

A *denoiser* is any callable ``(z_t, t, cond) -> v_hat`` on batched tensors;
a trained ``UNet`` qualifies, and so do the closed-form oracles in tests.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .codec import CodecSpec, decode, encode
from .denoiser import (
    ConditioningBundle,
    embed_morphology,
    generation_conditioning,
    translation_conditioning,
)
from .diffusion import eps_from_v, x0_from_v
from .schedule import (
    EtaSchedule,
    NoiseSchedule,
    TimestepPlan,
    ddim_sigma,
    eta_value,
    trailing_timesteps,
)

log = logging.getLogger(__name__)

Denoiser = Callable[[torch.Tensor, int, ConditioningBundle], torch.Tensor]

# counts of clamped negative variance terms, for diagnostics
diagnostics: Counter = Counter()


def _velocity(denoiser: Denoiser, z: torch.Tensor, t: int, cond: ConditioningBundle) -> torch.Tensor:
    v = denoiser(z, t, cond)
    if not torch.isfinite(v).all():
        raise FloatingPointError(f"non-finite denoiser output at t={t}")
    return v


@dataclass(frozen=True)
class SamplerConfig:
    inversion_steps: int = 200
    denoise_steps: int = 200
    eta: EtaSchedule = field(default_factory=EtaSchedule)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.inversion_steps < 1 or self.denoise_steps < 1:
            raise ValueError("step counts must be >= 1")

    def validate(self, T: int) -> None:
        if self.inversion_steps > T or self.denoise_steps > T:
            raise ValueError(f"step counts must not exceed T={T}")


def ddim_step(
    denoiser: Denoiser,
    s: NoiseSchedule,
    z_t: torch.Tensor,
    t: int,
    t_prev: int,
    cond: ConditioningBundle,
    eta_t: float,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got {t}, {t_prev}")
    if not 0.0 <= eta_t <= 1.0:
        raise ValueError(f"eta_t {eta_t} outside [0, 1]")
    if noise is not None and noise.shape != z_t.shape:
        raise ValueError("noise shape differs from latent shape")
    a_t, a_prev = s.alpha_bar(t), s.alpha_bar(t_prev)
    v = _velocity(denoiser, z_t, t, cond)
    x0 = x0_from_v(z_t, v, a_t)
    eps = eps_from_v(z_t, v, a_t)
    sig = eta_t * ddim_sigma(s, t, t_prev)
    rest = 1.0 - a_prev - sig * sig
    if rest < 0.0:
        diagnostics["negative_variance_clamped"] += 1
        rest = 0.0
    out = math.sqrt(a_prev) * x0 + math.sqrt(rest) * eps
    if sig > 0.0:
        if noise is None:
            raise ValueError("stochastic step needs a noise tensor")
        out = out + sig * noise
    return out


def inversion_path(s: NoiseSchedule, plan: TimestepPlan) -> list[int]:
    """Ascending timesteps ``0 -> top`` visited by inversion.

    A zero-SNR top step is excluded: inversion stops at the highest plan
    timestep with non-zero ``alpha_bar``.
    """
    steps = [0] + list(reversed(plan.steps))
    while len(steps) > 1 and s.alpha_bar(steps[-1]) == 0.0:
        steps.pop()
    if len(steps) < 2:
        raise ValueError("plan has no invertible timestep")
    return steps


def ddim_invert(
    denoiser: Denoiser,
    s: NoiseSchedule,
    z0: torch.Tensor,
    plan: TimestepPlan,
    cond_gen: ConditioningBundle,
) -> torch.Tensor:
    """Run deterministic DDIM updates upward from ``z0``; returns the latent at
    ``inversion_path(s, plan)[-1]``."""
    if cond_gen.mode != "generation":
        raise ValueError("inversion uses generation-mode conditioning")
    path = inversion_path(s, plan)
    z = z0
    for t, t_next in zip(path, path[1:]):
        a_t, a_next = s.alpha_bar(t), s.alpha_bar(t_next)
        if a_t == 0.0:
            raise ValueError(f"alpha_bar is zero at t={t} during inversion")
        v = _velocity(denoiser, z, t, cond_gen)
        x0 = x0_from_v(z, v, a_t)
        eps = eps_from_v(z, v, a_t)
        z = math.sqrt(a_next) * x0 + math.sqrt(1.0 - a_next) * eps
    return z


def denoise(
    denoiser: Denoiser,
    s: NoiseSchedule,
    z: torch.Tensor,
    plan: TimestepPlan,
    cond: ConditioningBundle,
    eta: EtaSchedule,
    seed: int = 0,
    start: int | None = None,
) -> torch.Tensor:
    """Denoise ``z`` down the plan, starting at timestep ``start`` (plan top by default).

    Step ``i`` of ``n`` uses ``eta(i / (n - 1))``.
    """
    hops = [(t, tp) for t, tp in plan.pairs() if start is None or t <= start]
    if start is not None and (not hops or hops[0][0] != start):
        raise ValueError(f"start timestep {start} is not in the plan")
    gen = torch.Generator().manual_seed(int(seed))
    n = len(hops)
    for i, (t, t_prev) in enumerate(hops):
        eta_t = eta_value(eta, i / (n - 1) if n > 1 else 0.0)
        noise = None
        if eta_t > 0.0:
            noise = torch.randn(z.shape, generator=gen, dtype=z.dtype)
        z = ddim_step(denoiser, s, z, t, t_prev, cond, eta_t, noise)
    return z


def _as_batch(images: np.ndarray | Sequence[np.ndarray]) -> tuple[list[np.ndarray], bool]:
    if isinstance(images, np.ndarray) and images.ndim == 3:
        return [images], True
    return list(images), False


def _stack_latents(codec: CodecSpec, images: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack([encode(codec, im) for im in images]))


def _decode_all(codec: CodecSpec, z: torch.Tensor) -> list[np.ndarray]:
    return [decode(codec, zi) for zi in z.detach().cpu().numpy()]


def morphology_tokens(model, images: list[np.ndarray]) -> torch.Tensor:
    cfg = model.cfg
    return torch.from_numpy(
        np.stack([embed_morphology(im, cfg.d_tok, cfg.patch, cfg.embed_seed) for im in images])
    )


@torch.no_grad()
def invert_sources(model, s: NoiseSchedule, codec: CodecSpec, sources, steps: int):
    """Encode and invert source images; returns ``(z0, z_top, t_top)``."""
    imgs, _ = _as_batch(sources)
    z0 = _stack_latents(codec, imgs)
    plan = trailing_timesteps(s.T, steps)
    cond = generation_conditioning(model, len(imgs), tuple(z0.shape[1:]))
    z_top = ddim_invert(model, s, z0, plan, cond)
    return z0, z_top, inversion_path(s, plan)[-1]


@torch.no_grad()
def translate(model, s: NoiseSchedule, codec: CodecSpec, source, cfg: SamplerConfig, inverted=None):
    """Inversion under generation conditioning, then eta-scheduled denoising
    under translation conditioning. Accepts one image or a list.

    ``inverted`` may carry a precomputed ``invert_sources`` result.
    """
    cfg.validate(s.T)
    imgs, single = _as_batch(source)
    z0, z_top, t_top = inverted or invert_sources(model, s, codec, imgs, cfg.inversion_steps)
    plan = trailing_timesteps(s.T, cfg.denoise_steps)
    cond = translation_conditioning(z0, morphology_tokens(model, imgs))
    if t_top not in plan.steps:
        raise ValueError("inversion and denoising plans do not share the start timestep")
    z = denoise(model, s, z_top, plan, cond, cfg.eta, cfg.seed, start=t_top)
    out = _decode_all(codec, z)
    return out[0] if single else out


@torch.no_grad()
def reconstruct(model, s: NoiseSchedule, codec: CodecSpec, source, steps: int, inverted=None):
    """Invert then denoise with eta = 0 and generation conditioning; returns the latents."""
    imgs, _ = _as_batch(source)
    z0, z_top, t_top = inverted or invert_sources(model, s, codec, imgs, steps)
    plan = trailing_timesteps(s.T, steps)
    cond = generation_conditioning(model, len(imgs), tuple(z0.shape[1:]))
    z = denoise(model, s, z_top, plan, cond, EtaSchedule("constant", 0.0, 0.0), start=t_top)
    return z0, z


@torch.no_grad()
def generate(model, s: NoiseSchedule, codec: CodecSpec, shape: tuple[int, int], cfg: SamplerConfig,
             seed: int, batch: int = 1):
    """Sample H&E-like images from pure noise with generation conditioning."""
    if cfg.denoise_steps > s.T:
        raise ValueError(f"denoise_steps must not exceed T={s.T}")
    h, w = shape
    f = codec.scale
    if h % f or w % f:
        raise ValueError("image size not divisible by codec factor")
    lat = (model.cfg.latent_channels, h // f, w // f)
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn((batch, *lat), generator=gen)
    plan = trailing_timesteps(s.T, cfg.denoise_steps)
    cond = generation_conditioning(model, batch, lat)
    z = denoise(model, s, z, plan, cond, cfg.eta, seed=int(seed) + 1)
    out = _decode_all(codec, z)
    return out[0] if batch == 1 else out
