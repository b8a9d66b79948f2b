import numpy as np
import pytest

from parkflow.data import FeatureSample, SampleSet
from parkflow.model import ModelConfig, ModelParams


def random_samples(rng, n, N, K=1, L=12, p_range=(0.25, 6.0)) -> SampleSet:
    return SampleSet(
        rng.uniform(0, 1, (n, K, N)),
        rng.uniform(0, 1, (n, L, N)),
        rng.choice(np.arange(p_range[0], p_range[1] + 1e-9, 0.25), size=(n, N)),
        rng.uniform(0, 1, (n, N)),
        np.arange(n).astype("datetime64[h]").astype("datetime64[m]"),
        [f"B{i}" for i in range(N)],
    )


def random_sample(rng, N, K=1) -> FeatureSample:
    return random_samples(rng, 1, N, K)[0]


def small_model(N=3, K=2, dh=3, M=2, seed=0, p_max=6.0) -> ModelParams:
    return ModelParams.init(ModelConfig(N=N, K=K, dim_h_short=dh, M=M, c_init=0.1, p_max=p_max), seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
