import numpy as np
import pytest

from moelab import kernels
from moelab.trainer import TrainConfig


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    kernels.warmup()


def tiny_config(**overrides) -> TrainConfig:
    """Small encoder + short run; the default for unit-level trainer tests."""
    base = dict(
        vocab_size=64,
        model_dim=16,
        num_layers=2,
        max_seq_len=12,
        batch_size=4,
        total_steps=6,
        t_warmup=3,
        num_experts=2,
        rank=2,
        alpha=4.0,
        learning_rate=5e-3,
        seed=11,
        tau=0.2,
    )
    base.update(overrides)
    return TrainConfig(**base)


def random_unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)
