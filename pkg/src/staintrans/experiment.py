"""End-to-end toy experiment: synth -> train -> invert/translate -> metrics.

Every stage caches its output under one run directory so the acceptance
suite and the scripts can share a single (expensive) training run.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .codec import read_png, write_png
from .config import config_hash
from .metrics import EmbedderSpec, evaluate
from .sampler import SamplerConfig, invert_sources, reconstruct, translate
from .schedule import EtaSchedule
from .synthdata import SynthParams, nucleus_union_mask, read_dataset, read_manifest, write_dataset
from .trainer import TrainConfig, load_model, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    n_train: int = 2048
    n_test: int = 128
    train_seed: int = 0
    test_seed: int = 1
    steps: int = 200
    sampler_seed: int = 0
    chunk: int = 16


def ensure_dataset(directory: Path, sp: SynthParams, n: int) -> None:
    try:
        m = read_manifest(directory)
        if m["params_hash"] == sp.digest() and len(m["ids"]) == n:
            return
    except (FileNotFoundError, ValueError):
        pass
    log.info("writing %d pairs to %s", n, directory)
    write_dataset(sp, n, directory)


def cache_key(tcfg: TrainConfig) -> str:
    # paths relative to the run root, so a moved or differently spelled root still hits the cache
    return replace(tcfg, dataset_dir="data/train", checkpoint_dir="model").digest()


def ensure_model(root: Path, tcfg: TrainConfig) -> Path:
    ckpt = Path(tcfg.checkpoint_dir) / "last.ckpt"
    done = root / "train_done.json"
    if ckpt.exists() and done.exists() and json.loads(done.read_text()).get("cache_key") == cache_key(tcfg):
        return ckpt
    log_path = Path(tcfg.checkpoint_dir) / "train_log.jsonl"
    if log_path.exists():
        log_path.unlink()
    t0 = time.time()
    res = train(tcfg)
    done.write_text(json.dumps({"cache_key": cache_key(tcfg), "config_hash": tcfg.digest(), "seconds": time.time() - t0,
                                "steps": res.step, "tool_version": __version__}))
    return ckpt


def stained_mask(img: np.ndarray, threshold: float = 0.1) -> np.ndarray:
    """Foreground of a target-style image: pixels with visible chroma.

    The neutral background is nearly grey at any exposure, while both the
    counterstain and the brown stain are strongly saturated.
    """
    x = img.astype(np.float64)
    hi, lo = x.max(axis=2), x.min(axis=2)
    return (hi - lo) / np.maximum(hi, 1.0) > threshold


def structure_iou(images, samples) -> float:
    """Mean IoU between stained masks of ``images`` and the true nucleus geometry."""
    vals = []
    for img, s in zip(images, samples):
        truth = nucleus_union_mask(s.nuclei, img.shape[0])
        m = stained_mask(img)
        union = (m | truth).sum()
        vals.append((m & truth).sum() / union if union else 1.0)
    return float(np.mean(vals))


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield i // size, seq[i : i + size]


def _save_images(directory: Path, ids, images, tag) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i, im in zip(ids, images):
        write_png(directory / f"{i}.png", im, tag)


def _load_images(directory: Path, ids):
    if not all((directory / f"{i}.png").exists() for i in ids):
        return None
    return [read_png(directory / f"{i}.png") for i in ids]


def run(root: str | Path = "runs/acceptance", ecfg: ExperimentConfig = ExperimentConfig(),
        tcfg: TrainConfig | None = None) -> dict:
    """Run (or resume from cache) the whole toy pipeline; returns the results dict."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    train_dir, test_dir = root / "data" / "train", root / "data" / "test"
    ensure_dataset(train_dir, SynthParams(seed=ecfg.train_seed), ecfg.n_train)
    ensure_dataset(test_dir, SynthParams(seed=ecfg.test_seed), ecfg.n_test)
    tcfg = tcfg or TrainConfig()
    tcfg = replace(tcfg, dataset_dir=str(train_dir), checkpoint_dir=str(root / "model"))
    ckpt = ensure_model(root, tcfg)
    model, sched, codec, meta = load_model(ckpt)

    test = read_dataset(test_dir)
    ids = [s.image_id for s in test]
    sources = [s.source for s in test]
    targets = [s.target for s in test]
    tag = {"tool_version": __version__, "config_hash": config_hash({"exp": asdict(ecfg), "train": cache_key(tcfg)})}
    variants = {
        "eta_cosine_0.2": EtaSchedule("cosine", 0.2, 1.0),
        "eta_constant_0": EtaSchedule("constant", 0.0, 0.0),
    }

    results_path = root / "results.json"
    results = json.loads(results_path.read_text()) if results_path.exists() else {}
    if results.get("tag") != tag:
        results = {"tag": tag}

    inverted_cache: dict[int, tuple] = {}

    def inverted(k, chunk):
        if k not in inverted_cache:
            inverted_cache[k] = invert_sources(model, sched, codec, chunk, ecfg.steps)
        return inverted_cache[k]

    outputs = {}
    for name, eta in variants.items():
        out_dir = root / "outputs" / name
        imgs = _load_images(out_dir, ids)
        if imgs is None:
            t0 = time.time()
            imgs = []
            for k, chunk in _chunks(sources, ecfg.chunk):
                cfg = SamplerConfig(ecfg.steps, ecfg.steps, eta, ecfg.sampler_seed + k)
                imgs += translate(model, sched, codec, chunk, cfg, inverted=inverted(k, chunk))
            _save_images(out_dir, ids, imgs, tag)
            results.setdefault("timing", {})[name] = time.time() - t0
        outputs[name] = imgs

    if "reconstruction_mae" not in results:
        errs = []
        for k, chunk in _chunks(sources, ecfg.chunk):
            z0, z = reconstruct(model, sched, codec, chunk, ecfg.steps, inverted=inverted(k, chunk))
            errs.append((z - z0).abs().mean(dim=(1, 2, 3)))
        results["reconstruction_mae"] = float(torch.cat(errs).mean())

    spec = EmbedderSpec()
    for name, imgs in outputs.items():
        rep = evaluate(imgs, targets, ids, spec, config={"variant": name, **tag})
        results[name] = rep.to_dict()
        results[name]["structure_iou"] = structure_iou(imgs, test)
    src_rep = evaluate(sources, targets, ids, spec, config={"variant": "source", **tag})
    results["source_baseline"] = src_rep.to_dict()
    results["target_structure_iou"] = structure_iou(targets, test)
    done = root / "train_done.json"
    results["train"] = json.loads(done.read_text()) if done.exists() else {}
    results_path.write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")
    return results
