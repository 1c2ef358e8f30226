import numpy as np
import pytest

from fewshot_attention import data as datamod
from fewshot_attention import episodic
from fewshot_attention.model import AdaptiveAttentionNetwork, ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small synthetic corpus shared by episodic tests."""
    return datamod.synthetic_shapes_generate(8, 20, 28, seed=77)


@pytest.fixture(scope="session")
def micro_model():
    """Untrained reference-config network (float32, seed 0)."""
    return AdaptiveAttentionNetwork(ModelConfig(), seed=0)


@pytest.fixture
def micro_episode(tiny_dataset):
    spec = episodic.EpisodeSpec(way=3, shot=1, query=2)
    return episodic.sample_episode(tiny_dataset, spec, np.random.default_rng(5))
