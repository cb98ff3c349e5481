import numpy as np
import pytest

from tlab import data, nn


@pytest.fixture(scope="session")
def mnist_paths(tmp_path_factory):
    return data.export_mnist5k(tmp_path_factory.mktemp("mnist"))


@pytest.fixture(scope="session")
def train_set(mnist_paths):
    return data.load_idx_dataset(mnist_paths["train_images"], mnist_paths["train_labels"])


@pytest.fixture(scope="session")
def test_set(mnist_paths):
    return data.load_idx_dataset(mnist_paths["test_images"], mnist_paths["test_labels"])


@pytest.fixture(scope="session")
def proxy(train_set, test_set):
    return nn.train(nn.build("cnn_a", 1), train_set, seed=1, test=test_set, **nn.TRAIN_DEFAULTS)


@pytest.fixture(scope="session")
def target(train_set, test_set):
    return nn.train(nn.build("cnn_b", 2), train_set, seed=2, test=test_set, **nn.TRAIN_DEFAULTS)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title} [{detail}]")


@pytest.fixture(scope="session")
def acceptance_results():
    return ACCEPTANCE_RESULTS
