import sys

import numpy as np
import pytest

from keylock.dataio import synthetic_cifar10, write_cifar10


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_small():
    """2000/500 class-structured images; enough for quick training runs."""
    return synthetic_cifar10(2000, 500, seed=7)


@pytest.fixture(scope="session")
def synthetic_archive(tmp_path_factory):
    """A full-size archive (50000/10000 records) in the CIFAR-10 binary layout."""
    train, test = synthetic_cifar10(50000, 10000, seed=3)
    root = tmp_path_factory.mktemp("cifar") / "cifar-10-batches-bin"
    write_cifar10(root, train, test)
    return root


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
