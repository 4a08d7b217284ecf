"""Shared test fixtures for spikelab."""

from __future__ import annotations

import numpy as np
import pytest

from src.population.model import BulkMeasure, PopulationModel, build_case1, build_case2
from src.theory.spectral import StieltjesContext


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption(
        "--runslow", action="store_true", default=False,
        help="Run full-scale Monte Carlo checks (minutes each)",
    )


def pytest_configure(config: pytest.Config) -> None:
    config.addinivalue_line("markers", "slow: full-scale Monte Carlo check, needs --runslow")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def unit_bulk() -> BulkMeasure:
    """Point mass at 1."""
    return BulkMeasure.point(1.0)


@pytest.fixture
def unit_ctx(unit_bulk: BulkMeasure) -> StieltjesContext:
    """c = 0.5 with a unit bulk, the setting of the reference designs."""
    return StieltjesContext(c=0.5, bulk=unit_bulk)


@pytest.fixture
def case1_small() -> PopulationModel:
    return build_case1(20)


@pytest.fixture
def case2_small() -> PopulationModel:
    return build_case2(20, 0.5)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
