"""Forward noising and the eps / v / x0 parameterization algebra.

Functions accept numpy arrays or torch tensors shaped ``(C, H, W)`` or
``(B, C, H, W)``. ``alpha_bar`` is a scalar or a length-``B`` vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch

from .schedule import NoiseSchedule, snr

Array = Union[np.ndarray, torch.Tensor]

LAMBDA_FLOOR = 1e-8


@dataclass(frozen=True)
class LossWeighting:
    gamma: float = 5.0

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")

    def weight(self, snr_t: float) -> float:
        """SNR-capped weight ``min(snr, gamma) / (snr + 1)`` with a small floor."""
        if snr_t == float("inf"):
            return LAMBDA_FLOOR
        return max(min(snr_t, self.gamma) / (snr_t + 1.0), LAMBDA_FLOOR)


def _same_shape(a: Array, b: Array) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _coefs(alpha_bar, like: Array):
    """Return (sqrt(ab), sqrt(1 - ab)) broadcastable against ``like``."""
    if isinstance(like, torch.Tensor):
        ab = torch.as_tensor(alpha_bar, dtype=like.dtype, device=like.device)
        if ab.ndim == 1 and like.ndim > 1:
            ab = ab.reshape(-1, *([1] * (like.ndim - 1)))
        if torch.any((ab < 0) | (ab > 1)):
            raise ValueError("alpha_bar outside [0, 1]")
        return torch.sqrt(ab), torch.sqrt(1.0 - ab)
    ab = np.asarray(alpha_bar, dtype=np.float64)
    if ab.ndim == 1 and like.ndim > 1:
        ab = ab.reshape(-1, *([1] * (like.ndim - 1)))
    if np.any((ab < 0) | (ab > 1)):
        raise ValueError("alpha_bar outside [0, 1]")
    return np.sqrt(ab), np.sqrt(1.0 - ab)


def forward_sample(s: NoiseSchedule, x0: Array, t, eps: Array) -> Array:
    """Closed-form marginal ``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    _same_shape(x0, eps)
    if np.ndim(t) == 0:
        ab = s.alpha_bar(_checked(s, int(t)))
    else:
        ab = np.array([s.alpha_bar(_checked(s, int(k))) for k in np.asarray(t).ravel()])
    a, b = _coefs(ab, x0)
    return a * x0 + b * eps


def _checked(s: NoiseSchedule, t: int) -> int:
    s._check(t)
    return t


def velocity_from(x0: Array, eps: Array, alpha_bar) -> Array:
    _same_shape(x0, eps)
    a, b = _coefs(alpha_bar, x0)
    return a * eps - b * x0


def x0_from_v(xt: Array, v: Array, alpha_bar) -> Array:
    _same_shape(xt, v)
    a, b = _coefs(alpha_bar, xt)
    return a * xt - b * v


def eps_from_v(xt: Array, v: Array, alpha_bar) -> Array:
    _same_shape(xt, v)
    a, b = _coefs(alpha_bar, xt)
    return b * xt + a * v


def loss_weights(s: NoiseSchedule, t: Sequence[int] | int, w: LossWeighting) -> np.ndarray:
    ts = np.atleast_1d(np.asarray(t, dtype=np.int64))
    return np.array([w.weight(snr(s, int(k))) for k in ts], dtype=np.float64)


def _per_sample_mse(a: Array, b: Array, batched: bool):
    diff = (a - b) ** 2
    if not batched:
        return diff.mean().reshape(1)
    return diff.reshape(diff.shape[0], -1).mean(1)


def v_loss(v_pred: Array, v_true: Array, t, s: NoiseSchedule, w: LossWeighting):
    """Weighted v-prediction loss.

    With a scalar ``t`` the inputs are one grid (or a batch sharing ``t``);
    with a vector ``t`` the first axis is the batch. The batch reduces by mean.
    """
    _same_shape(v_pred, v_true)
    per_sample_t = np.ndim(t) > 0
    lam = loss_weights(s, t, w)
    mse = _per_sample_mse(v_pred, v_true, per_sample_t)
    if isinstance(mse, torch.Tensor):
        lam_t = torch.as_tensor(lam, dtype=mse.dtype, device=mse.device)
        return (lam_t * mse).mean()
    return float((lam * mse).mean())


def eps_loss(eps_pred: Array, eps_true: Array):
    _same_shape(eps_pred, eps_true)
    out = ((eps_pred - eps_true) ** 2).mean()
    return out if isinstance(out, torch.Tensor) else float(out)
