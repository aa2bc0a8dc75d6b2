import numpy as np
import pytest

from drdfl.data import make_blobs, partition_shard
from drdfl.networks import ModelDims, init_client


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def dims():
    return ModelDims(D=8, d_p=4, d_l=4, K=4, hidden=32, n_hidden=2)


@pytest.fixture
def model(dims):
    return init_client(dims.bundle(seed=7), client_id=0, shared_learngene_seed=99)


@pytest.fixture(scope="session")
def small_blobs():
    return make_blobs(K=4, per_class=40, D=8, separation=6.0, seed=3)


@pytest.fixture(scope="session")
def small_plan(small_blobs):
    return partition_shard(small_blobs, M=4, s=2, seed=5)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
