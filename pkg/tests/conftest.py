import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tokenizer():
    from grain.tokenizer import Tokenizer

    return Tokenizer.default()


@pytest.fixture
def tiny_model():
    from grain.model import GrainModel, ModelConfig

    torch.manual_seed(0)
    return GrainModel(ModelConfig.tiny())


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """Small shared synthetic dataset: 8 images over 4 classes."""
    from grain.synth import synth_grounded_dataset

    out = tmp_path_factory.mktemp("synth")
    synth_grounded_dataset(out, n_images=8, n_classes=4, seed=7)
    return out
