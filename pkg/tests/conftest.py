"""Shared fixtures: a tiny on-disk dataset and quick checkpoints.

The tiny fixtures exist so plumbing tests (file formats, CLI, evaluation
bookkeeping) never wait on real training; quality-bearing runs live in
test_acceptance.py with their own session fixtures.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from zvos.dataset import DatasetConfig, SplitSpec, generate_dataset
from zvos.synth import GeneratorConfig
from zvos.train import TrainConfig, train_stage

TINY_GEN = GeneratorConfig(height=32, width=32, frames=3)


def tiny_dataset_config(seed=5):
    return DatasetConfig(
        generator=TINY_GEN,
        splits={
            "train": SplitSpec(count=6),
            "aps": SplitSpec(count=4, corrupt_fraction=0.5),
            "val": SplitSpec(count=4, corrupt_fraction=0.5),
        },
        seed=seed,
    )


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    generate_dataset(tiny_dataset_config(), root)
    return root


@pytest.fixture(scope="session")
def mini_ckpts(tiny_root, tmp_path_factory):
    """Stage 1-3 checkpoints trained just long enough to be loadable."""
    out = tmp_path_factory.mktemp("mini_ckpts")
    common = dict(data=str(tiny_root), seed=0, batch_size=2, base_lr=0.05,
                  max_iter=30, log_every=1000)
    ck1 = str(out / "stage1.ckpt")
    train_stage(TrainConfig(stage=1, out=ck1, **common))
    ck2 = str(out / "stage2.ckpt")
    train_stage(TrainConfig(stage=2, out=ck2, stage1_ckpt=ck1, **common))
    ck3 = str(out / "stage3.ckpt")
    train_stage(TrainConfig(stage=3, out=ck3, stage1_ckpt=ck1, stage2_ckpt=ck2,
                            **common))
    return {"stage1": ck1, "stage2": ck2, "stage3": ck3, "dir": out}


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
