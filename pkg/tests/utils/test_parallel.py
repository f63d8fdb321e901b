"""
Test budget splitting and the work queue
"""

import concurrent.futures as cf

import pytest
from pytest_mock import MockerFixture

from src.tails.exceptions import ValidationError
from src.utils.parallel import WorkItem, WorkQueue, split_budget


def _describe(item: WorkItem) -> tuple:
    return item.stream_id, item.n_samples


def _fail(item: WorkItem) -> int:
    raise ValueError(f"item {item.stream_id} failed")


def test_split_budget() -> None:
    items = split_budget(5000, 2048)

    assert [item.n_samples for item in items] == [2048, 2048, 904]
    assert [item.stream_id for item in items] == [0, 1, 2]


@pytest.mark.parametrize("budget,chunk_size", [(0, 10), (10, 0)])
def test_split_budget_invalid(budget: int, chunk_size: int) -> None:
    with pytest.raises(ValidationError):
        split_budget(budget, chunk_size)


def test_queue_rejects_zero_threads() -> None:
    with pytest.raises(ValidationError):
        WorkQueue(0)


def test_serial_queue_does_not_start_processes(mocker: MockerFixture) -> None:
    """Test one thread maps in process"""
    pool = mocker.patch.object(cf, "ProcessPoolExecutor")
    results = WorkQueue(1).map(_describe, split_budget(10, 3))

    assert results == [(0, 3), (1, 3), (2, 3), (3, 1)]
    pool.assert_not_called()


def test_pool_keeps_item_order() -> None:
    items = split_budget(10_000, 1000)
    assert WorkQueue(3).map(_describe, items) == WorkQueue(1).map(_describe, items)


def test_pool_propagates_failures() -> None:
    with pytest.raises(ValueError) as exc_info:
        WorkQueue(2).map(_fail, split_budget(4, 2))
    assert "failed" in str(exc_info.value)
