import numpy as np
import pytest

from solvercarto.game import RPS, center_normalize


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def rps():
    return center_normalize(RPS, -RPS, id="rps")


def random_games(rng, k, n=3, m=3):
    return [center_normalize(rng.normal(size=(n, m)), rng.normal(size=(n, m)), id=f"g{i}") for i in range(k)]
