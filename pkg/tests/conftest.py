import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from cxgan.nets import DiscriminatorSpec, GeneratorSpec  # noqa: E402
from cxgan.syndata import SynthConfig, generate_dataset  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    return SynthConfig(image_size=32, n_samples=40, seed=3)


@pytest.fixture(scope="session")
def small_data(small_cfg):
    return generate_dataset(small_cfg)


@pytest.fixture
def tiny_specs():
    return GeneratorSpec(32, 4, 3), DiscriminatorSpec(32, 4, 2)
