"""Noise schedules, timestep plans and eta schedules.

Timesteps are 1-based: ``t = 1..T``. Index ``t = 0`` is the clean sample and
always has ``alpha_bar = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    terminal_snr_zero: bool = False
    sqrt_alpha_bars: np.ndarray = field(init=False, repr=False)
    sqrt_one_minus_alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=np.float64).copy()
        abar = np.asarray(self.alpha_bars, dtype=np.float64).copy()
        if betas.shape != (self.T,) or abar.shape != (self.T,):
            raise ValueError(f"expected arrays of length T={self.T}")
        if np.any(np.diff(abar) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")
        if abar[0] > 1 or abar[-1] < 0 or np.any(abar[:-1] <= 0):
            raise ValueError("alpha_bars out of [0, 1] or zero before T")
        for name, arr in (
            ("betas", betas),
            ("alpha_bars", abar),
            ("sqrt_alpha_bars", np.sqrt(abar)),
            ("sqrt_one_minus_alpha_bars", np.sqrt(1.0 - abar)),
        ):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def alpha_bar(self, t: int) -> float:
        """ᾱ at integer timestep ``t``; ``t = 0`` gives 1.0."""
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bars[t - 1])

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (math.isfinite(beta_start) and math.isfinite(beta_end)):
        raise ValueError("betas must be finite")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(T=int(T), betas=betas, alpha_bars=np.cumprod(1.0 - betas))


def rescale_zero_terminal_snr(s: NoiseSchedule) -> NoiseSchedule:
    """Shift and scale sqrt(ᾱ) so the first value is kept and the last becomes 0."""
    if s.terminal_snr_zero or s.alpha_bars[-1] == 0:
        raise ValueError("schedule already has zero terminal SNR")
    root = s.sqrt_alpha_bars
    first, last = root[0], root[-1]
    if first == last:
        raise ValueError("degenerate schedule: sqrt(alpha_bar_1) == sqrt(alpha_bar_T)")
    root = (root - last) * (first / (first - last))
    root[0] = first
    root[-1] = 0.0
    abar = root**2
    abar[0] = s.alpha_bars[0]
    # per-step betas recovered from consecutive ratios
    ratios = np.empty_like(abar)
    ratios[0] = abar[0]
    ratios[1:] = abar[1:] / abar[:-1]
    return NoiseSchedule(T=s.T, betas=1.0 - ratios, alpha_bars=abar, terminal_snr_zero=True)


def snr(s: NoiseSchedule, t: int) -> float:
    s._check(t)
    a = float(s.alpha_bars[t - 1])
    if a == 0.0:
        return 0.0
    if a == 1.0:
        return math.inf
    return a / (1.0 - a)


@dataclass(frozen=True)
class TimestepPlan:
    steps: tuple[int, ...]
    T: int

    def __post_init__(self) -> None:
        steps = tuple(int(x) for x in self.steps)
        if not steps:
            raise ValueError("empty plan")
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ValueError("plan steps must be strictly decreasing")
        if steps[0] > self.T or steps[-1] < 1:
            raise ValueError("plan steps out of [1, T]")
        object.__setattr__(self, "steps", steps)

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def pairs(self) -> list[tuple[int, int]]:
        """Denoising hops ``(t, t_prev)`` ending at 0."""
        nxt = list(self.steps[1:]) + [0]
        return list(zip(self.steps, nxt))


def trailing_timesteps(T: int, S: int) -> TimestepPlan:
    if not 1 <= S <= T:
        raise ValueError(f"need 1 <= S <= T, got S={S}, T={T}")
    steps: list[int] = []
    for i in range(S):
        num = T * (S - i)
        # round half up in integer arithmetic
        t = (2 * num + S) // (2 * S)
        t = min(max(t, 1), T)
        if not steps or steps[-1] != t:
            steps.append(t)
    return TimestepPlan(tuple(steps), T)


def ddim_sigma(s: NoiseSchedule, t: int, t_prev: int) -> float:
    """Full-stochasticity DDIM sigma for the hop ``t -> t_prev`` (eta = 1)."""
    if t <= t_prev or t_prev < 0:
        raise ValueError(f"need t > t_prev >= 0, got {t}, {t_prev}")
    a_t = s.alpha_bar(t)
    a_prev = s.alpha_bar(t_prev)
    if a_t == 1.0:
        raise ValueError("alpha_bar_t == 1: sigma undefined")
    if a_t == a_prev:
        return 0.0
    var = (1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev)
    return math.sqrt(max(var, 0.0))


@dataclass(frozen=True)
class EtaSchedule:
    kind: Literal["constant", "cosine"] = "cosine"
    start: float = 0.2
    end: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "cosine"):
            raise ValueError(f"unknown eta kind {self.kind!r}")
        if not (0.0 <= self.start <= 1.0 and 0.0 <= self.end <= 1.0):
            raise ValueError("eta start/end must lie in [0, 1]")
        if self.kind == "cosine" and self.start > self.end:
            raise ValueError("cosine eta needs start <= end")

    @classmethod
    def parse(cls, text: str) -> "EtaSchedule":
        """Parse ``0``, ``constant:v`` or ``cosine:s``."""
        text = text.strip()
        if ":" not in text:
            return cls("constant", float(text), float(text))
        kind, value = text.split(":", 1)
        if kind == "constant":
            return cls("constant", float(value), float(value))
        if kind == "cosine":
            return cls("cosine", float(value), 1.0)
        raise ValueError(f"cannot parse eta schedule {text!r}")


def eta_value(e: EtaSchedule, progress: float) -> float:
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress {progress} outside [0, 1]")
    if e.kind == "constant":
        return e.start
    mid = 0.5 * (e.end + e.start)
    half = 0.5 * (e.end - e.start)
    return min(max(mid - half * math.cos(math.pi * progress), e.start), e.end)
