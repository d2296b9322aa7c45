"""Mean brightness of unconditional samples across seeds.

A zero-terminal-SNR model should not pull every sample toward mid grey, so
the spread of per-image mean brightness is a quick health check.

Usage: python scripts/generation_brightness.py CHECKPOINT [N_SEEDS] [STEPS]
"""

import json
import sys

import numpy as np
import torch

from staintrans.sampler import SamplerConfig, generate
from staintrans.trainer import load_model


def main(argv):
    ckpt = argv[1] if len(argv) > 1 else "runs/acceptance/model/last.ckpt"
    n = int(argv[2]) if len(argv) > 2 else 64
    steps = int(argv[3]) if len(argv) > 3 else 200
    torch.set_num_threads(1)
    model, sched, codec, _ = load_model(ckpt)
    cfg = SamplerConfig(steps, steps)
    means = []
    for seed in range(n):
        img = generate(model, sched, codec, (64, 64), cfg, seed=seed)
        means.append(float(img.mean() / 255.0))
    means = np.array(means)
    print(json.dumps({"n": n, "steps": steps, "min": means.min(), "max": means.max(),
                      "mean": means.mean(), "std": means.std(),
                      "deciles": np.quantile(means, np.linspace(0, 1, 11)).round(4).tolist()}, indent=1))


if __name__ == "__main__":
    main(sys.argv)
