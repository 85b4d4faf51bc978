import numpy as np
import pytest
import torch

from interfuse.data import PairDataset, save_image
from interfuse.synthetic import write_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_dataset_dir(tmp_path_factory):
    """Four 64x64 synthetic pairs laid out as vi/ + ir/."""
    root = tmp_path_factory.mktemp("toy_data")
    write_dataset(root, n=4, height=64, width=64, seed=7)
    return root


@pytest.fixture
def toy_dataset(toy_dataset_dir):
    return PairDataset.from_directory(toy_dataset_dir)


@pytest.fixture
def write_png(tmp_path):
    def _write(name, array):
        return save_image(tmp_path / name, np.asarray(array, dtype=np.float32))
    return _write


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
