import numpy as np
import pytest

from riccilab.heat import build_generator_graph
from riccilab.mmspace import circle, sphere_fibonacci


@pytest.fixture(scope="session")
def sphere2000():
    return sphere_fibonacci(2, 1.0, 2000)


@pytest.fixture(scope="session")
def sphere_model(sphere2000):
    model = build_generator_graph(sphere2000)
    model.eig()
    return model


@pytest.fixture(scope="session")
def circle1000():
    return circle(2 * np.pi, 1000)


@pytest.fixture(scope="session")
def circle_model(circle1000):
    model = build_generator_graph(circle1000, 1e-3)
    model.eig()
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    acc = __import__("sys").modules.get("test_acceptance")
    if acc is not None and acc.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acc.VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
