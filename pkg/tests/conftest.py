import numpy as np
import pytest

from taskclip.synth import SynthConfig, generate_data
from taskclip.tensor import float64_mode


@pytest.fixture
def f64():
    with float64_mode():
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    return generate_data(SynthConfig(n_tasks=3, scenes_per_task=6, boxes_per_scene=(3, 8), d=16,
                                     n_word=5, split_scenes={"val": 4, "test": 2}, seed=3))
