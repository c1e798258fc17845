import numpy as np
import pytest
import torch

from cxrbench.dataset import generate_synthetic
from cxrbench.transforms import load_image

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synthetic_manifest(tmp_path_factory):
    return generate_synthetic(20, 20, 64, seed=1, out_dir=tmp_path_factory.mktemp("syn"))


@pytest.fixture(scope="session")
def synthetic_images(synthetic_manifest):
    m = synthetic_manifest
    return [load_image(m.resolve(r)) for r in m.records], m.labels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
