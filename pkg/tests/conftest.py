from __future__ import annotations

import pytest

from ship import corpus as cp
from ship import models as md
from ship import trainer as tr


def micro_tasks():
    return [cp.TaskProgram(cp.REVERSE, (), 16), cp.TaskProgram(cp.SHIFT, (1,), 16)]


@pytest.fixture(scope="session")
def micro_split():
    return cp.build_split(micro_tasks(), 16, seed=0)


@pytest.fixture(scope="session")
def micro_model_config():
    return md.ModelConfig(d_model=16, m_soft=2, n_layers=1, n_heads=2, d_ff=32,
                          enc_positions=16, dec_positions=64, task_positions=96)


@pytest.fixture(scope="session")
def micro_train_config():
    # 2 tasks x 16 instances, batch 8 -> 4 steps per epoch
    return tr.TrainConfig(seed=0, epochs=75, batch_size=8, k_dropout=0.25)


@pytest.fixture(scope="session")
def micro_trained(micro_split, micro_model_config, micro_train_config):
    bundle, log = tr.train(micro_split, micro_model_config, micro_train_config)
    return bundle, log
