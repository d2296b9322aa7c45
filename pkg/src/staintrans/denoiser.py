"""Conditional U-Net predicting v, plus the morphology embedder.

The network sees ``[z_t || structural_latent]`` on its input channels and
attends to a token sequence through one cross-attention block per
resolution level. Generation mode passes a zero structural latent and the
single learned generation token.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import check_image


@dataclass(frozen=True)
class DenoiserConfig:
    base_width: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 2)
    d_tok: int = 64
    heads: int = 4
    latent_channels: int = 3
    patch: int = 16
    embed_seed: int = 1234
    zero_init_out: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "channel_mult", tuple(int(m) for m in self.channel_mult))
        if self.base_width < 1 or self.d_tok < 1 or self.heads < 1:
            raise ValueError("widths and head count must be positive")
        if len(self.channel_mult) < 1:
            raise ValueError("need at least one resolution level")
        for m in self.channel_mult:
            if (self.base_width * m) % self.heads:
                raise ValueError("channel counts must be divisible by the head count")

    @property
    def downsamples(self) -> int:
        return len(self.channel_mult) - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d


@dataclass
class ConditioningBundle:
    mode: Literal["generation", "translation"]
    structural: torch.Tensor  # (B, C, H, W)
    tokens: torch.Tensor  # (B, N, d_tok)

    def __post_init__(self) -> None:
        if self.mode not in ("generation", "translation"):
            raise ValueError(f"unknown conditioning mode {self.mode!r}")
        if self.structural.ndim != 4 or self.tokens.ndim != 3:
            raise ValueError("structural must be (B,C,H,W) and tokens (B,N,d)")
        if self.structural.shape[0] != self.tokens.shape[0]:
            raise ValueError("batch size mismatch between structural latent and tokens")


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Spatial features (queries) attend to conditioning tokens (keys/values)."""

    def __init__(self, ch: int, d_tok: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.q = nn.Linear(ch, ch)
        self.k = nn.Linear(d_tok, ch)
        self.v = nn.Linear(d_tok, ch)
        self.out = nn.Linear(ch, ch)

    def forward(self, x, tokens):
        b, c, h, w = x.shape
        hd = c // self.heads
        q = self.q(self.norm(x).flatten(2).transpose(1, 2))  # (B, HW, C)
        k = self.k(tokens)
        v = self.v(tokens)
        q = q.reshape(b, h * w, self.heads, hd).transpose(1, 2)
        k = k.reshape(b, -1, self.heads, hd).transpose(1, 2)
        v = v.reshape(b, -1, self.heads, hd).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        o = (att @ v).transpose(1, 2).reshape(b, h * w, c)
        return x + self.out(o).transpose(1, 2).reshape(b, c, h, w)


class UNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        chans = [w * m for m in cfg.channel_mult]
        temb = 4 * w
        self.time_mlp = nn.Sequential(nn.Linear(w, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.gen_token = nn.Parameter(torch.randn(1, cfg.d_tok) * 0.02)
        self.inp = nn.Conv2d(2 * cfg.latent_channels, chans[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_att = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = chans[0]
        for i, ch in enumerate(chans):
            self.down_res.append(ResBlock(prev, ch, temb))
            self.down_att.append(CrossAttention(ch, cfg.d_tok, cfg.heads))
            if i < len(chans) - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch
        self.mid = ResBlock(prev, prev, temb)

        self.up_res = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(chans))):
            ch = chans[i]
            self.up_res.append(ResBlock(prev + ch, ch, temb))
            if i > 0:
                self.upsample.append(nn.Conv2d(ch, chans[i - 1], 3, padding=1))
                prev = chans[i - 1]
            else:
                prev = ch
        self.out_norm = nn.GroupNorm(_groups(prev), prev)
        self.out = nn.Conv2d(prev, cfg.latent_channels, 3, padding=1)
        if cfg.zero_init_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, z_t: torch.Tensor, t, cond: ConditioningBundle) -> torch.Tensor:
        if z_t.shape != cond.structural.shape:
            raise ValueError(
                f"noisy latent {tuple(z_t.shape)} and structural latent "
                f"{tuple(cond.structural.shape)} differ"
            )
        if cond.tokens.shape[-1] != self.cfg.d_tok:
            raise ValueError(f"tokens have dim {cond.tokens.shape[-1]}, expected {self.cfg.d_tok}")
        size = 2**self.cfg.downsamples
        if z_t.shape[-1] % size or z_t.shape[-2] % size:
            raise ValueError(f"spatial size must be divisible by {size}")
        b = z_t.shape[0]
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        emb = self.time_mlp(timestep_embedding(t, self.cfg.base_width).to(z_t.dtype))
        tokens = cond.tokens.to(z_t.dtype)

        h = self.inp(torch.cat([z_t, cond.structural.to(z_t.dtype)], dim=1))
        skips = []
        for i, (res, att) in enumerate(zip(self.down_res, self.down_att)):
            h = att(res(h, emb), tokens)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid(h, emb)
        for j, res in enumerate(self.up_res):
            h = res(torch.cat([h, skips.pop()], dim=1), emb)
            if j < len(self.upsample):
                h = self.upsample[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out(F.silu(self.out_norm(h)))


def predict_v(model: UNet, z_t: torch.Tensor, t, cond: ConditioningBundle) -> torch.Tensor:
    """v-prediction for a batch ``(B, C, H, W)`` or a single grid ``(C, H, W)``."""
    single = z_t.ndim == 3
    if single:
        z_t = z_t[None]
        if cond.structural.ndim == 3:
            raise ValueError("conditioning must be batched")
    out = model(z_t, t, cond)
    if not torch.isfinite(out).all():
        raise FloatingPointError("non-finite activations in denoiser output")
    return out[0] if single else out


def generation_token(model: UNet) -> torch.Tensor:
    """The learned ``(1, d_tok)`` token used in generation mode."""
    return model.gen_token


def generation_conditioning(model: UNet, batch: int, shape: tuple[int, int, int]) -> ConditioningBundle:
    p = model.gen_token
    structural = torch.zeros((batch, *shape), dtype=p.dtype)
    return ConditioningBundle("generation", structural, p.expand(batch, 1, -1))


def translation_conditioning(structural, tokens) -> ConditioningBundle:
    structural = torch.as_tensor(structural, dtype=torch.float32)
    tokens = torch.as_tensor(tokens, dtype=torch.float32)
    if structural.ndim == 3:
        structural, tokens = structural[None], tokens[None]
    return ConditioningBundle("translation", structural, tokens)


def projection_matrix(d_in: int, d_tok: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((d_in, d_tok)) / math.sqrt(d_in)


def embed_morphology(img: np.ndarray, d_tok: int = 64, patch: int = 16, seed: int = 0) -> np.ndarray:
    """Seeded random projection of standardized patch tiles -> ``(N, d_tok)`` float32.

    Tiles are taken row-major; a zero-variance tile maps to the zero token.
    """
    img = check_image(img)
    h, w, _ = img.shape
    if patch < 1 or h % patch or w % patch:
        raise ValueError(f"patch {patch} does not divide image {h}x{w}")
    tiles = (
        img.astype(np.float64)
        .reshape(h // patch, patch, w // patch, patch, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(-1, patch * patch * 3)
    )
    mean = tiles.mean(axis=1, keepdims=True)
    std = tiles.std(axis=1, keepdims=True)
    flat = np.where(std > 1e-12, (tiles - mean) / np.where(std > 1e-12, std, 1.0), 0.0)
    return (flat @ projection_matrix(patch * patch * 3, d_tok, seed)).astype(np.float32)
