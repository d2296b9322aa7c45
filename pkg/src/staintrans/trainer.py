"""Joint generation / translation training with v-loss and AdamW."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .codec import CodecSpec, encode
from .config import config_hash
from .denoiser import (
    ConditioningBundle,
    DenoiserConfig,
    UNet,
    embed_morphology,
    generation_conditioning,
)
from .diffusion import LossWeighting, forward_sample, v_loss, velocity_from
from .schedule import NoiseSchedule, make_linear_schedule, rescale_zero_terminal_snr
from .synthdata import read_dataset

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    batch_size: int = 16
    learning_rate: float = 2e-4
    warmup_steps: int = 100
    weight_decay: float = 0.01
    p_gen: float = 0.5
    gamma: float = 5.0
    seed: int = 0
    dataset_dir: str = "data/train"
    checkpoint_dir: str = "runs/default"
    checkpoint_every: int = 500
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    rescale: bool = True
    base_width: int = 32
    d_tok: int = 64
    heads: int = 4
    patch: int = 16
    embed_seed: int = 1234
    codec: str = "identity"
    codec_factor: int = 1
    threads: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_gen <= 1.0:
            raise ValueError("p_gen must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0 or self.warmup_steps < 0 or self.checkpoint_every < 1:
            raise ValueError("bad optimizer settings")

    def model_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            base_width=self.base_width,
            d_tok=self.d_tok,
            heads=self.heads,
            patch=self.patch,
            embed_seed=self.embed_seed,
        )

    def schedule(self) -> NoiseSchedule:
        s = make_linear_schedule(self.T, self.beta_start, self.beta_end)
        return rescale_zero_terminal_snr(s) if self.rescale else s

    def codec_spec(self) -> CodecSpec:
        return CodecSpec(self.codec, self.codec_factor)

    def digest(self) -> str:
        return config_hash(self)


def lr_at(step: int, total: int, peak: float, warmup: int) -> float:
    """Linear warmup from 0 to ``peak`` over ``warmup`` updates, then half-cosine to 0."""
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    span = max(total - warmup, 1)
    frac = min(max(step - warmup, 0) / span, 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


class PairedArrays:
    """Encoded latents and morphology tokens for a paired dataset."""

    def __init__(self, source_latents, target_latents, tokens, ids=None):
        self.source_latents = source_latents
        self.target_latents = target_latents
        self.tokens = tokens
        self.ids = list(ids) if ids is not None else list(range(len(source_latents)))

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_samples(cls, samples, codec: CodecSpec, mcfg: DenoiserConfig) -> "PairedArrays":
        src = np.stack([encode(codec, s.source) for s in samples])
        tgt = np.stack([encode(codec, s.target) for s in samples])
        tok = np.stack([embed_morphology(s.source, mcfg.d_tok, mcfg.patch, mcfg.embed_seed) for s in samples])
        return cls(torch.from_numpy(src), torch.from_numpy(tgt), torch.from_numpy(tok),
                   [s.image_id for s in samples])


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, step])


def batch_indices(n: int, batch: int, seed: int, step: int) -> np.ndarray:
    per_epoch = max(n // batch, 1)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, 0, epoch]).permutation(n)
    return perm[pos * batch : (pos + 1) * batch]


def make_optimizer(model: UNet, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=cfg.weight_decay,
        foreach=False,
    )


def save_training_checkpoint(path, model: UNet, opt, cfg: TrainConfig, step: int) -> None:
    tensors = dict(model.state_dict())
    names = {id(p): n for n, p in model.named_parameters()}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            tensors[f"optim/{n}/exp_avg"] = st["exp_avg"]
            tensors[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"]
            tensors[f"optim/{n}/step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(())
    meta = {
        "kind": "staintrans-denoiser",
        "tool_version": __version__,
        "config_hash": cfg.digest(),
        "model": model.cfg.to_dict(),
        "train_config": asdict(cfg),
        "step": step,
    }
    write_checkpoint(path, meta, tensors)


def load_model(path) -> tuple[UNet, NoiseSchedule, CodecSpec, dict]:
    meta, tensors = read_checkpoint(path)
    if meta.get("kind") != "staintrans-denoiser":
        raise CheckpointError(f"{path}: not a denoiser checkpoint")
    model = UNet(DenoiserConfig(**meta["model"]))
    weights = {k: v for k, v in tensors.items() if not k.startswith("optim/")}
    model.load_state_dict(weights, strict=True)
    model.eval()
    cfg = TrainConfig(**meta["train_config"])
    return model, cfg.schedule(), cfg.codec_spec(), meta


def restore_optimizer(opt, model: UNet, tensors: dict) -> None:
    for n, p in model.named_parameters():
        key = f"optim/{n}/exp_avg"
        if key not in tensors:
            continue
        opt.state[p] = {
            "step": tensors[f"optim/{n}/step"].clone(),
            "exp_avg": tensors[key].clone(),
            "exp_avg_sq": tensors[f"optim/{n}/exp_avg_sq"].clone(),
        }


@dataclass
class TrainResult:
    model: UNet
    losses: list[float]
    tasks: list[str]
    step: int
    checkpoint: Path | None


def train(
    cfg: TrainConfig,
    data: PairedArrays | None = None,
    resume_from: str | Path | None = None,
    stop_at: int | None = None,
    log_path: str | Path | None = None,
    on_step: Callable[[int, str, float], None] | None = None,
) -> TrainResult:
    """Train (or resume) and return the model with its loss trace.

    ``stop_at`` ends early after that many total updates without changing
    the learning-rate schedule, which is what makes resumption exact.
    """
    torch.set_num_threads(cfg.threads)
    schedule = cfg.schedule()
    codec = cfg.codec_spec()
    mcfg = cfg.model_config()
    if data is None:
        data = PairedArrays.from_samples(read_dataset(cfg.dataset_dir), codec, mcfg)
    n = len(data)
    if n < cfg.batch_size:
        raise ValueError(f"dataset has {n} pairs, fewer than batch_size {cfg.batch_size}")
    per_epoch = n // cfg.batch_size
    total = cfg.epochs * per_epoch
    end = total if stop_at is None else min(stop_at, total)

    torch.manual_seed(cfg.seed)
    model = UNet(mcfg)
    opt = make_optimizer(model, cfg)
    start = 0
    if resume_from is not None:
        meta, tensors = read_checkpoint(resume_from)
        if meta.get("model") != mcfg.to_dict():
            raise CheckpointError("checkpoint architecture does not match the config")
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("optim/")})
        restore_optimizer(opt, model, tensors)
        start = int(meta["step"])
    model.train()

    weighting = LossWeighting(cfg.gamma)
    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(log_path) if log_path else ckpt_dir / "train_log.jsonl"
    tag = {"config_hash": cfg.digest(), "tool_version": __version__}
    shape = tuple(data.source_latents.shape[1:])
    losses: list[float] = []
    tasks: list[str] = []
    ckpt_path = None

    with open(log_path, "a") as logf:
        for step in range(start, end):
            t0 = time.perf_counter()
            idx = torch.from_numpy(batch_indices(n, cfg.batch_size, cfg.seed, step))
            rng = _step_rng(cfg.seed, step)
            task = "generation" if rng.random() < cfg.p_gen else "translation"
            gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
            b = len(idx)
            t = torch.randint(1, schedule.T + 1, (b,), generator=gen)
            eps = torch.randn((b, *shape), generator=gen)

            if task == "generation":
                x0 = data.source_latents[idx]
                cond = generation_conditioning(model, b, shape)
            else:
                x0 = data.target_latents[idx]
                cond = ConditioningBundle("translation", data.source_latents[idx], data.tokens[idx])

            tn = t.numpy()
            ab = schedule.alpha_bars[tn - 1]
            x_t = forward_sample(schedule, x0, tn, eps)
            v_true = velocity_from(x0, eps, ab)
            v_pred = model(x_t, t, cond)
            loss = v_loss(v_pred, v_true, tn, schedule, weighting)
            if not torch.isfinite(loss):
                dump = ckpt_dir / f"nonfinite_step{step}.json"
                dump.write_text(json.dumps({"step": step, "seed": cfg.seed, "task": task,
                                            "indices": idx.tolist(), "t": tn.tolist(), **tag}))
                raise NumericalError(f"non-finite loss at step {step}; state dumped to {dump}")

            lr = lr_at(step, total, cfg.learning_rate, cfg.warmup_steps)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

            val = float(loss.detach())
            losses.append(val)
            tasks.append(task)
            rec = {"step": step, "task": task, "loss": val, "lr": lr,
                   "wall_ms": round(1000 * (time.perf_counter() - t0), 3), **tag}
            logf.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(step, task, val)
            done = step + 1
            if done % cfg.checkpoint_every == 0 or done == end:
                ckpt_path = ckpt_dir / "last.ckpt"
                save_training_checkpoint(ckpt_path, model, opt, cfg, done)
                logf.flush()
            if step % 50 == 0:
                log.info("step %d/%d task=%s loss=%.5f lr=%.2e", step, total, task, val, lr)

    model.eval()
    return TrainResult(model, losses, tasks, end, ckpt_path)
