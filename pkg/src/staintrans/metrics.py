"""SSIM, molecular retrieval accuracy, Frechet and kernel distances."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .codec import check_image
from .denoiser import embed_morphology

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _valid_filter(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = len(win)
    out = correlate1d(img, win, axis=0, mode="constant")
    out = correlate1d(out, win, axis=1, mode="constant")
    lo = k // 2
    return out[lo : img.shape[0] - (k - 1 - lo), lo : img.shape[1] - (k - 1 - lo)]


def luminance(img: np.ndarray) -> np.ndarray:
    return check_image(img).astype(np.float64) @ LUMA


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM on ITU-R 601 luminance, mean over valid window positions."""
    a, b = check_image(a), check_image(b)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"images smaller than the {window}x{window} window")
    x, y = luminance(a), luminance(b)
    win = _gaussian_window(window, sigma)
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    mx, my = _valid_filter(x, win), _valid_filter(y, win)
    sxx = _valid_filter(x * x, win) - mx * mx
    syy = _valid_filter(y * y, win) - my * my
    sxy = _valid_filter(x * y, win) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    ids: list = field(default_factory=list)

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be (n, d)")
        if not self.ids:
            self.ids = list(range(len(self.vectors)))
        if len(self.ids) != len(self.vectors):
            raise ValueError("ids and vectors differ in length")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("non-finite embedding values")

    def __len__(self) -> int:
        return len(self.vectors)


def mra(pred: EmbeddingSet, gt: EmbeddingSet) -> float:
    """Fraction of predictions whose most cosine-similar ground truth is their own pair.

    Ties resolve to the lowest index, so a tie only counts as a hit when the
    own pair is the lowest-indexed maximum.
    """
    if list(pred.ids) != list(gt.ids):
        raise ValueError("prediction and ground-truth ids are not aligned")
    if len(pred) < 2:
        raise ValueError("MRA needs at least two pairs")
    if pred.vectors.shape[1] != gt.vectors.shape[1]:
        raise ValueError("embedding dimensions differ")
    pn = np.linalg.norm(pred.vectors, axis=1)
    gn = np.linalg.norm(gt.vectors, axis=1)
    if np.any(pn == 0) or np.any(gn == 0):
        raise ValueError("zero-norm embedding vector")
    sim = (pred.vectors / pn[:, None]) @ (gt.vectors / gn[:, None]).T
    hits = np.argmax(sim, axis=1) == np.arange(len(pred))
    return float(hits.mean())


def _check_pair(fa: EmbeddingSet, fb: EmbeddingSet) -> None:
    if fa.vectors.shape[1] != fb.vectors.shape[1]:
        raise ValueError("embedding dimensions differ")
    if len(fa) < 2 or len(fb) < 2:
        raise ValueError("need at least two vectors per set")


def frechet_distance(fa: EmbeddingSet, fb: EmbeddingSet) -> float:
    _check_pair(fa, fb)
    d = fa.vectors.shape[1]
    if len(fa) <= d or len(fb) <= d:
        warnings.warn(f"covariance from n <= d={d} samples is singular", RuntimeWarning)
    mu_a, mu_b = fa.vectors.mean(0), fb.vectors.mean(0)
    cov_a = np.cov(fa.vectors, rowvar=False, ddof=1).reshape(d, d)
    cov_b = np.cov(fb.vectors, rowvar=False, ddof=1).reshape(d, d)
    # tr sqrt(A B) = tr sqrt(A^1/2 B A^1/2), the latter symmetric PSD
    w, q = np.linalg.eigh((cov_a + cov_a.T) / 2)
    root_a = (q * np.sqrt(np.clip(w, 0, None))) @ q.T
    m = root_a @ cov_b @ root_a
    ev = np.linalg.eigvalsh((m + m.T) / 2)
    neg = -ev[ev < 0].sum()
    scale = max(np.trace(m), 1e-300)
    if neg > 1e-6 * scale:
        log.warning("clamped negative eigenvalues (mass %.3g of trace %.3g)", neg, scale)
    tr_root = np.sqrt(np.clip(ev, 0, None)).sum()
    diff = mu_a - mu_b
    val = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_root
    return float(max(val, 0.0))


def _mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    d = x.shape[1]
    kxx = (x @ x.T / d + 1) ** 3
    kyy = (y @ y.T / d + 1) ** 3
    kxy = (x @ y.T / d + 1) ** 3
    m, n = len(x), len(y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2 * kxy.mean())


def kernel_subsets(n: int, size: int, count: int, seed: int) -> list[np.ndarray]:
    """Index subsets: disjoint blocks when ``n >= count * size``, else independent draws."""
    rng = np.random.default_rng(seed)
    if n >= count * size:
        perm = rng.permutation(n)
        return [perm[i * size : (i + 1) * size] for i in range(count)]
    return [rng.permutation(n)[:size] for _ in range(count)]


def kernel_distance(fa: EmbeddingSet, fb: EmbeddingSet, subsets: int = 10,
                    subset_size: int = 100, seed: int = 0) -> float:
    """Mean unbiased MMD^2 with the cubic polynomial kernel over subsets."""
    _check_pair(fa, fb)
    m = min(subset_size, len(fa), len(fb))
    sa = kernel_subsets(len(fa), m, subsets, seed)
    sb = kernel_subsets(len(fb), m, subsets, seed + 1)
    vals = [_mmd2_unbiased(fa.vectors[i], fb.vectors[j]) for i, j in zip(sa, sb)]
    return float(np.mean(vals))


@dataclass(frozen=True)
class EmbedderSpec:
    d_tok: int = 64
    patch: int = 16
    seed: int = 2024

    @property
    def name(self) -> str:
        return f"patchproj-d{self.d_tok}-p{self.patch}-s{self.seed}"


def embed_for_eval(img: np.ndarray, spec: EmbedderSpec = EmbedderSpec()) -> np.ndarray:
    """Mean-pooled patch-projection tokens as one vector."""
    return embed_morphology(img, spec.d_tok, spec.patch, spec.seed).astype(np.float64).mean(0)


def embed_all(images: Sequence[np.ndarray], spec: EmbedderSpec = EmbedderSpec(), ids=None) -> EmbeddingSet:
    return EmbeddingSet(np.stack([embed_for_eval(im, spec) for im in images]), list(ids or []))


@dataclass
class MetricsReport:
    ssim_mean: float
    mra: float
    frechet: float
    kernel_distance: float
    n_samples: int
    embedder: str
    config: dict = field(default_factory=dict)
    per_sample_ssim: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("per_sample_ssim")
        return d


def evaluate(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray], ids=None,
             spec: EmbedderSpec = EmbedderSpec(), config: dict | None = None) -> MetricsReport:
    if len(pred) != len(gt) or not len(pred):
        raise ValueError("prediction and ground-truth sets must be non-empty and aligned")
    ids = list(ids) if ids is not None else list(range(len(pred)))
    per = [ssim(p, g) for p, g in zip(pred, gt)]
    ep, eg = embed_all(pred, spec, ids), embed_all(gt, spec, ids)
    return MetricsReport(
        ssim_mean=float(np.mean(per)),
        mra=mra(ep, eg),
        frechet=frechet_distance(ep, eg),
        kernel_distance=kernel_distance(ep, eg),
        n_samples=len(pred),
        embedder=spec.name,
        config=dict(config or {}),
        per_sample_ssim=per,
    )
