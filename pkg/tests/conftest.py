import numpy as np
import pytest

from cfmplan.flownet import VelocityModel
from cfmplan.scenario import dataset_build, load_dataset
from cfmplan.vocab import fps_build


def pytest_addoption(parser):
    parser.addoption("--run-acceptance", action="store_true", default=False,
                     help="run the long acceptance criteria suite")


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of a scalar function over an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(x)
        flat[i] = keep - h
        fm = f(x)
        flat[i] = keep
        gf[i] = (fp - fm) / (2.0 * h)
    return g


@pytest.fixture(scope="session")
def fork_records(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "fork.jsonl"
    dataset_build({"fork": 12}, seed=101, path=path)
    _, records = load_dataset(path)
    return records


@pytest.fixture(scope="session")
def mixed_records(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "mixed.jsonl"
    dataset_build({"straight": 4, "fork": 4, "obstacle_avoid": 4}, seed=7,
                  path=path)
    _, records = load_dataset(path)
    return records


@pytest.fixture(scope="session")
def small_vocab(fork_records):
    return fps_build([r.trajectory for r in fork_records], 4)


@pytest.fixture(scope="session")
def zero_model():
    return VelocityModel.build(seed=0, embed_dim=16)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
