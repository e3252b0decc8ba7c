"""Session fixtures shared by module and acceptance tests (training is expensive)."""

import time

import numpy as np
import pytest

from skillforge.config import stream_seed
from skillforge.motions import generate_reference_set
from skillforge.pretrain import PretrainConfig, pretrain_encoder

SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def point_mass_set():
    return generate_reference_set("point_mass_2d")


@pytest.fixture(scope="session")
def pretrained(point_mass_set):
    """Per root seed: (encoder, log) from the default pretraining run.

    ``get.seconds[seed]`` holds the wall time of that run.
    """
    cache = {}

    def get(seed):
        if seed not in cache:
            start = time.perf_counter()
            cache[seed] = pretrain_encoder(point_mass_set, PretrainConfig(), stream_seed(seed, "pretrain"))
            get.seconds[seed] = time.perf_counter() - start
        return cache[seed]

    get.seconds = {}
    return get


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
