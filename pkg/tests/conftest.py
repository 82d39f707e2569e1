"""Session fixtures.

Two trained teachers are shared across the expensive end-to-end tests so the
training cost is paid once per pytest run.
"""
import time

import pytest

from matchkd.data import DatasetConfig
from matchkd.model import ModelConfig
from matchkd.pipeline import DistillConfig, train_teacher


@pytest.fixture(scope="session")
def default_teacher():
    """Teacher trained on the default 4x4 task, tuned so decoding is sharp.

    A slightly lower learning rate than the distillation default keeps the
    final steps from oscillating; 1500 steps is enough to reach exact match
    1.0 on the eval split.
    """
    data_cfg = DatasetConfig()
    model_cfg = ModelConfig(role="teacher")
    train_cfg = DistillConfig(
        learning_rate=1.5e-3, teacher_steps=1500, eval_interval=1500,
    )
    start = time.perf_counter()
    params, records = train_teacher(model_cfg, data_cfg, train_cfg)
    seconds = time.perf_counter() - start
    return {
        "params": params,
        "records": records,
        "model_cfg": model_cfg,
        "data_cfg": data_cfg,
        "train_cfg": train_cfg,
        "seconds": seconds,
    }


@pytest.fixture(scope="session")
def a6_teacher():
    """Teacher for the distillation comparison: larger 8x8 grid, small corpus.

    400 steps on 256 examples reaches label agreement 1.0, so the teacher is
    a faithful stand-in for the labels when student arms are compared.
    """
    data_cfg = DatasetConfig(grid=(8, 8), train_size=256, eval_size=16)
    model_cfg = ModelConfig(role="teacher", patch_grid=(8, 8), mlp_ratio=2)
    train_cfg = DistillConfig(teacher_steps=400, eval_interval=400)
    start = time.perf_counter()
    params, records = train_teacher(model_cfg, data_cfg, train_cfg)
    seconds = time.perf_counter() - start
    return {
        "params": params,
        "records": records,
        "model_cfg": model_cfg,
        "data_cfg": data_cfg,
        "train_cfg": train_cfg,
        "seconds": seconds,
    }
