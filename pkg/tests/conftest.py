import numpy as np
import pytest
from fastapi.testclient import TestClient

from secagg_uplink.models import GroupVector, MaskSeed
from secagg_uplink.schemas import ExperimentConfig, SchemeConfig, TaskConfig, TrainConfig
from secagg_uplink.tee_service import create_app

GOLDEN_SEED_BYTES = bytes(range(16))


@pytest.fixture
def golden_seed() -> MaskSeed:
    return MaskSeed(seed=GOLDEN_SEED_BYTES)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def random_vector(rng):
    def make(n: int, p: int) -> GroupVector:
        return GroupVector(values=rng.integers(0, 1 << p, size=n, dtype=np.uint64), p=p)
    return make


@pytest.fixture
def small_task() -> TaskConfig:
    return TaskConfig(n_clients=8, n_features=16, n_classes=4, n_samples=800, n_test=200,
                      label_skew=0.5)


@pytest.fixture
def small_experiment(small_task) -> ExperimentConfig:
    return ExperimentConfig(
        name="test",
        seed=0,
        n_seeds=1,
        task=small_task,
        train=TrainConfig(rounds=2, clients_per_round=4),
        schemes=[SchemeConfig(kind="sq", b=8)],
    )


@pytest.fixture
def tee_client() -> TestClient:
    return TestClient(create_app())
