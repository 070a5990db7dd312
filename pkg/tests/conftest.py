import os

import pytest
import torch

from seulab import datasets
from seulab.training import use_cpu_determinism

use_cpu_determinism()

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def data_cache(tmp_path_factory):
    """Dataset cache holding the offline MNIST subset (or $SEULAB_CACHE when it already has it)."""
    env = os.environ.get(datasets.CACHE_ENV)
    if env and datasets.is_cached("mnist5k", env):
        return env
    cache = tmp_path_factory.mktemp("cache")
    datasets.fetch("mnist5k", cache)
    return cache


@pytest.fixture(scope="session")
def mnist5k(data_cache):
    return datasets.load("mnist5k", data_cache)


@pytest.fixture
def report_criterion():
    def record(name, passed, detail=""):
        ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
