"""Image <-> working-space maps.

Images are ``uint8`` arrays shaped ``(H, W, 3)``; latents are ``float32``
arrays shaped ``(3, h, w)`` in ``[-1, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Mapping

import numpy as np
from PIL import Image, PngImagePlugin


@dataclass(frozen=True)
class CodecSpec:
    kind: Literal["identity", "downsample"] = "identity"
    factor: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("identity", "downsample"):
            raise ValueError(f"unknown codec kind {self.kind!r}")
        if self.factor < 1:
            raise ValueError("factor must be positive")

    @property
    def scale(self) -> int:
        return self.factor if self.kind == "downsample" else 1


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3 or 0 in img.shape:
        raise ValueError(f"expected a non-empty uint8 (H, W, 3) image, got {img.dtype} {img.shape}")
    return img


def encode(c: CodecSpec, img: np.ndarray) -> np.ndarray:
    img = check_image(img)
    h, w, _ = img.shape
    f = c.scale
    if h % f or w % f:
        raise ValueError(f"image {h}x{w} not divisible by codec factor {f}")
    z = img.astype(np.float64).transpose(2, 0, 1) / 127.5 - 1.0
    if f > 1:
        z = z.reshape(3, h // f, f, w // f, f).mean(axis=(2, 4))
    return z.astype(np.float32)


def decode(c: CodecSpec, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3 or z.shape[0] != 3:
        raise ValueError(f"expected a 3-channel latent, got shape {z.shape}")
    f = c.scale
    if f > 1:
        z = z.repeat(f, axis=1).repeat(f, axis=2)
    pix = np.floor((z + 1.0) * 127.5 + 0.5)
    return np.clip(pix, 0, 255).astype(np.uint8).transpose(1, 2, 0).copy()


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path: str | Path, img: np.ndarray, text: Mapping[str, str] | None = None) -> None:
    """Write an 8-bit RGB PNG; ``text`` entries go into tEXt chunks."""
    info = PngImagePlugin.PngInfo()
    for k, v in (text or {}).items():
        info.add_text(k, v)
    Image.fromarray(check_image(img), mode="RGB").save(path, format="PNG", pnginfo=info)
