import numpy as np
import pytest

from intersection_mappo.config import RunConfig
from intersection_mappo.geometry import IntersectionLayout, build_paths


@pytest.fixture(scope="session")
def layout():
    return IntersectionLayout()


@pytest.fixture(scope="session")
def paths(layout):
    return build_paths(layout)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Small network and batches so trainer-level tests run in seconds."""
    return RunConfig().replace(
        env={"vehicles": ("RL", "UD")},
        net={"hidden_units": 16},
        train={
            "workers": 2,
            "batch_size": 64,
            "minibatch_size": 16,
            "epochs": 2,
            "model_horizon": 64,
            "total_timesteps": 64 * 2 * 20,
            "seeds": (0,),
        },
        run={"checkpoint_every": 0},
    )
