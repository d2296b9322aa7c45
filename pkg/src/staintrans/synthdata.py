"""Procedural paired H&E-like / IHC-like tiles with shared nucleus geometry.

Expression of every nucleus is a deterministic function of the nucleus
records (size and crowding), so the target staining is predictable from
the source morphology.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .codec import read_png, write_png

GENERATOR_VERSION = "synth-1"

EOSIN_BG = np.array([0.97, 0.74, 0.86])
HEMATOXYLIN = np.array([0.30, 0.16, 0.50])
NEUTRAL_BG = np.array([0.95, 0.94, 0.92])
COUNTERSTAIN = np.array([0.42, 0.50, 0.80])
DAB = np.array([0.52, 0.30, 0.10])


@dataclass(frozen=True)
class SynthParams:
    size: int = 64
    count_min: int = 6
    count_max: int = 14
    radius_min: float = 3.0
    radius_max: float = 7.0
    texture_amp: float = 0.10
    exposure_min: float = 0.25
    exposure_max: float = 1.10
    c1: float = 1.5
    c2: float = 1.0
    density_radius: float = 16.0
    density_center: float = 2.0
    density_scale: float = 1.5
    max_overlap: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.size < 16:
            raise ValueError("size must be at least 16")
        if not 0 <= self.count_min <= self.count_max:
            raise ValueError("empty nuclei count range")
        if not 0 < self.radius_min <= self.radius_max or 2 * self.radius_max >= self.size:
            raise ValueError("bad radius range")
        if not 0 < self.exposure_min <= self.exposure_max:
            raise ValueError("bad exposure range")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Nucleus:
    cx: float
    cy: float
    a: float
    b: float
    theta: float
    expression: float = 0.0

    @property
    def area(self) -> float:
        return math.pi * self.a * self.b


@dataclass
class PairedSample:
    source: np.ndarray
    target: np.ndarray
    nuclei: list[Nucleus]
    image_id: int
    exposure: float = 1.0
    params: SynthParams = field(default_factory=SynthParams)


def ellipse_mask(n: Nucleus, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - n.cx, yy - n.cy
    c, s = math.cos(n.theta), math.sin(n.theta)
    u = (c * dx + s * dy) / n.a
    v = (-s * dx + c * dy) / n.b
    return u * u + v * v <= 1.0


def area_stats(sp: SynthParams) -> tuple[float, float]:
    """Mean and std of pi*a*b for independent uniform semi-axes."""
    r0, r1 = sp.radius_min, sp.radius_max
    m1 = (r0 + r1) / 2
    m2 = (r0 * r0 + r0 * r1 + r1 * r1) / 3
    mean = math.pi * m1 * m1
    var = math.pi**2 * (m2 * m2 - m1**4)
    return mean, math.sqrt(var) if var > 0 else 1.0


def expression_levels(nuclei: list[Nucleus], sp: SynthParams) -> list[float]:
    """Sigmoid of standardized area plus standardized neighbour count."""
    mean, std = area_stats(sp)
    out = []
    for i, n in enumerate(nuclei):
        k = sum(
            1
            for j, m in enumerate(nuclei)
            if j != i and math.hypot(n.cx - m.cx, n.cy - m.cy) <= sp.density_radius
        )
        density = (k - sp.density_center) / sp.density_scale
        x = sp.c1 * (n.area - mean) / std + sp.c2 * density
        out.append(1.0 / (1.0 + math.exp(-x)))
    return out


def _value_noise(rng: np.random.Generator, size: int, cells: int = 8) -> np.ndarray:
    grid = rng.uniform(-1.0, 1.0, (cells + 1, cells + 1))
    pos = (np.arange(size) + 0.5) * cells / size
    i0 = np.floor(pos).astype(int)
    f = pos - i0
    f = f * f * (3 - 2 * f)
    rows = grid[i0] * (1 - f)[:, None] + grid[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(rgb * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _sample_nuclei(rng: np.random.Generator, sp: SynthParams) -> list[Nucleus]:
    count = int(rng.integers(sp.count_min, sp.count_max + 1))
    union = np.zeros((sp.size, sp.size), dtype=bool)
    nuclei: list[Nucleus] = []
    lo, hi = sp.radius_max, sp.size - sp.radius_max
    for _ in range(count):
        for _attempt in range(1000):
            cand = Nucleus(
                cx=float(rng.uniform(lo, hi)),
                cy=float(rng.uniform(lo, hi)),
                a=float(rng.uniform(sp.radius_min, sp.radius_max)),
                b=float(rng.uniform(sp.radius_min, sp.radius_max)),
                theta=float(rng.uniform(0.0, math.pi)),
            )
            m = ellipse_mask(cand, sp.size)
            if m.sum() and (m & union).sum() <= sp.max_overlap * m.sum():
                break
        else:
            raise ValueError(
                f"could not place nucleus {len(nuclei)} within overlap {sp.max_overlap} "
                "after 1000 attempts"
            )
        union |= m
        nuclei.append(cand)
    return nuclei


def render_pair(nuclei: list[Nucleus], sp: SynthParams, exposure: float, texture: np.ndarray):
    size = sp.size
    src = EOSIN_BG[None, None, :] * (1.0 + sp.texture_amp * texture)[:, :, None]
    tgt = np.broadcast_to(NEUTRAL_BG, (size, size, 3)).copy()
    amin = math.pi * sp.radius_min**2
    amax = math.pi * sp.radius_max**2
    for n in nuclei:
        m = ellipse_mask(n, size)
        k = 0.45 + 0.5 * (n.area - amin) / max(amax - amin, 1e-12)
        src[m] = src[m] * (1 - k) + HEMATOXYLIN * k
        tgt[m] = COUNTERSTAIN * (1 - n.expression) + DAB * n.expression
    return _to_uint8(src * exposure), _to_uint8(tgt * exposure)


def nucleus_union_mask(nuclei: list[Nucleus], size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    for n in nuclei:
        mask |= ellipse_mask(n, size)
    return mask


def generate_pair(sp: SynthParams, index: int) -> PairedSample:
    rng = np.random.default_rng([sp.seed, index])
    nuclei = _sample_nuclei(rng, sp)
    exposure = float(rng.uniform(sp.exposure_min, sp.exposure_max))
    texture = _value_noise(rng, sp.size)
    levels = expression_levels(nuclei, sp)
    nuclei = [Nucleus(n.cx, n.cy, n.a, n.b, n.theta, e) for n, e in zip(nuclei, levels)]
    src, tgt = render_pair(nuclei, sp, exposure, texture)
    return PairedSample(src, tgt, nuclei, index, exposure, sp)


def _meta(sample: PairedSample) -> dict:
    return {
        "image_id": sample.image_id,
        "exposure": sample.exposure,
        "nuclei": [asdict(n) for n in sample.nuclei],
        "params": asdict(sample.params),
        "generator_version": GENERATOR_VERSION,
        "tool_version": __version__,
        "config_hash": sample.params.digest(),
    }


def write_dataset(sp: SynthParams, n: int, directory: str | Path, start: int = 0) -> list[int]:
    """Write ``n`` pairs with ids ``start..start+n-1`` plus ``manifest.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    tag = {"tool_version": __version__, "config_hash": sp.digest()}
    ids = list(range(start, start + n))
    for i in ids:
        s = generate_pair(sp, i)
        write_png(out / f"{i}_src.png", s.source, tag)
        write_png(out / f"{i}_tgt.png", s.target, tag)
        (out / f"{i}_meta.json").write_text(json.dumps(_meta(s), indent=1, sort_keys=True) + "\n")
    manifest = {
        "ids": ids,
        "generator_version": GENERATOR_VERSION,
        "params": asdict(sp),
        "params_hash": sp.digest(),
        **tag,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return ids


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ValueError(f"corrupt manifest {path}: {err}") from None
    if manifest.get("generator_version") != GENERATOR_VERSION:
        raise ValueError(
            f"generator version {manifest.get('generator_version')!r} != {GENERATOR_VERSION!r}"
        )
    return manifest


def read_dataset(directory: str | Path) -> list[PairedSample]:
    root = Path(directory)
    manifest = read_manifest(root)
    sp = SynthParams(**manifest["params"])
    out = []
    for i in manifest["ids"]:
        try:
            meta = json.loads((root / f"{i}_meta.json").read_text())
            src = read_png(root / f"{i}_src.png")
            tgt = read_png(root / f"{i}_tgt.png")
        except (OSError, json.JSONDecodeError) as err:
            raise ValueError(f"missing or corrupt files for sample {i}: {err}") from None
        if meta.get("generator_version") != GENERATOR_VERSION:
            raise ValueError(f"sample {i}: generator version mismatch")
        nuclei = [Nucleus(**n) for n in meta["nuclei"]]
        out.append(PairedSample(src, tgt, nuclei, int(meta["image_id"]), float(meta["exposure"]), sp))
    return out
