import sys
from pathlib import Path
from typing import Generator

import pytest

from src.tails.galton_watson import GridSpec
from src.tails.offspring import OffspringDistribution
from src.tails.stats_core import RngStream

# Add the src directory to the Python path
src_path = Path(__file__).parent.parent / "src"
sys.path.insert(0, str(src_path.absolute()))


@pytest.fixture
def rng() -> RngStream:
    return RngStream(seed=12345, stream_id=0)


@pytest.fixture(scope="session")
def geometric() -> OffspringDistribution:
    """Geometric law with a = 1/2, whose martingale limit is Exp(1)"""
    return OffspringDistribution.geometric(0.5)


@pytest.fixture(scope="session")
def schroeder() -> OffspringDistribution:
    return OffspringDistribution.parse("pmf: 1:0.5, 2:0.5")


@pytest.fixture(scope="session")
def boettcher() -> OffspringDistribution:
    return OffspringDistribution.parse("pmf: 2:0.5, 3:0.5")


@pytest.fixture(scope="session")
def small_grid() -> GridSpec:
    """Coarse grid for fast solver runs; 1.0 and 2.0 remain nodes"""
    return GridSpec(x_max=20.0, n_geometric=128, n_linear=312)


@pytest.fixture(autouse=True)
def setup_test_environment(
    monkeypatch: pytest.MonkeyPatch,
) -> Generator[None, None, None]:
    """Keep runner environment variables from leaking into tests"""
    monkeypatch.delenv("SMALLVALUE_SEED", raising=False)
    monkeypatch.delenv("SMALLVALUE_THREADS", raising=False)
    yield
