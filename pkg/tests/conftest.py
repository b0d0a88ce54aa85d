import numpy as np
import pytest

from cepa.attacks import AttackSpec, poison
from cepa.data import sample_defense_set, synth_shapes
from cepa.model import desk_cnn
from cepa.trainer import TrainConfig, train


@pytest.fixture(scope="session")
def desk_data():
    return synth_shapes(seed=0)


@pytest.fixture(scope="session")
def defense(desk_data):
    return sample_defense_set(desk_data, 10, 0)[0]


@pytest.fixture(scope="session")
def clean_trained(desk_data):
    model = desk_cnn(seed=0)
    result = train(model, desk_data, TrainConfig(seed=0))
    return model, result


@pytest.fixture(scope="session")
def patch_spec():
    return AttackSpec(kind="patch", target_class=4, seed=0)


@pytest.fixture(scope="session")
def patch_trained(desk_data, patch_spec):
    model = desk_cnn(seed=0)
    result = train(model, poison(desk_data, patch_spec).dataset, TrainConfig(seed=0))
    return model, result


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
