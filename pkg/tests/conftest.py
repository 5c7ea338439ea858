import numpy as np
import pytest

from models.rimformer.rimformer import ModelConfig
from models.rimformer.training import init_params
from radar.dataset import generate_dataset, load_dataset
from radar.simulation import toy_configs
from utils.autodiff import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Four segments of eight samples; small enough for finite differences."""
    return ModelConfig(
        n_layers=1, d_model=4, n_heads=2, d_k=2, d_v=2, ff_expansion=2, conv_kernel=3,
        n_frames=4, segment_len=8, slide=4,
    )


@pytest.fixture
def random_params():
    """Initialized parameters with every zero/one-initialized tensor perturbed."""

    def make(cfg, seed=0, spread=0.1):
        params = init_params(cfg, seed)
        noise = np.random.default_rng(seed + 1)
        for name, p in params.items():
            if name.endswith((".rel", ".bias", ".b", ".c", ".b1", ".b2", ".gain", ".shift")):
                params[name] = Tensor(p.data + spread * noise.standard_normal(p.shape), requires_grad=True)
        return params

    return make


@pytest.fixture(scope="session")
def toy_dataset_path(tmp_path_factory):
    chirp, sim = toy_configs(256)
    path = str(tmp_path_factory.mktemp("toy") / "data")
    generate_dataset(24, path, split="8:1:1", master_seed=0, chirp=chirp, sim=sim)
    return path


@pytest.fixture(scope="session")
def toy_dataset(toy_dataset_path):
    return load_dataset(toy_dataset_path)
