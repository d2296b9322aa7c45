from dataclasses import replace

import numpy as np

from staintrans.experiment import cache_key, stained_mask
from staintrans.synthdata import SynthParams, generate_pair, nucleus_union_mask
from staintrans.trainer import TrainConfig


def test_cache_key_ignores_run_root_spelling():
    rel = TrainConfig(dataset_dir="runs/a/data/train", checkpoint_dir="runs/a/model")
    absolute = replace(rel, dataset_dir="/root/pkg/runs/a/data/train", checkpoint_dir="/root/pkg/runs/a/model")
    assert rel.digest() != absolute.digest()
    assert cache_key(rel) == cache_key(absolute)
    assert cache_key(rel) != cache_key(replace(rel, epochs=rel.epochs + 1))


def test_stained_mask_recovers_target_geometry():
    sp = SynthParams(seed=5)
    for i in range(20):
        s = generate_pair(sp, i)
        assert np.array_equal(stained_mask(s.target), nucleus_union_mask(s.nuclei, sp.size))
