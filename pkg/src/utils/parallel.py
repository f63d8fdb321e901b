"""
Work queue for embarrassingly parallel Monte Carlo batches
"""

import concurrent.futures as cf
import logging
from dataclasses import dataclass
from typing import Callable, List, Sequence, TypeVar

from ..tails.constants import DEFAULT_CHUNK_SIZE
from ..tails.exceptions import ValidationError

logger = logging.getLogger(__name__)

R = TypeVar("R")


@dataclass(frozen=True)
class WorkItem:
    """One batch of samples drawn from its own random stream"""

    stream_id: int
    n_samples: int


def split_budget(budget: int, chunk_size: int = DEFAULT_CHUNK_SIZE) -> List[WorkItem]:
    """
    Split a sample budget into fixed-size work items

    The split depends only on the budget and chunk size, never on the number
    of workers, so results are identical for every thread count.
    """
    if budget < 1:
        raise ValidationError(f"budget must be at least 1, got {budget}")
    if chunk_size < 1:
        raise ValidationError(f"chunk_size must be at least 1, got {chunk_size}")
    items = []
    stream_id = 0
    remaining = budget
    while remaining > 0:
        size = min(chunk_size, remaining)
        items.append(WorkItem(stream_id=stream_id, n_samples=size))
        remaining -= size
        stream_id += 1
    return items


class WorkQueue:
    """Map a work function over items, in process or across a process pool"""

    def __init__(self, threads: int = 1) -> None:
        if threads < 1:
            raise ValidationError(f"threads must be at least 1, got {threads}")
        self.threads = threads

    def map(self, func: Callable[[WorkItem], R], items: Sequence[WorkItem]) -> List[R]:
        """
        Run `func` on every item

        Args:
            func: Picklable top-level callable, such as a functools.partial
            items: Work items, each carrying its own stream id

        Returns:
            Results in item order
        """
        if self.threads == 1 or len(items) <= 1:
            return [func(item) for item in items]

        logger.debug(f"Dispatching {len(items)} work items to {self.threads} processes")
        with cf.ProcessPoolExecutor(max_workers=self.threads) as executor:
            futures = [executor.submit(func, item) for item in items]
            try:
                return [future.result() for future in futures]
            except Exception as e:
                logger.error(f"Work item failed: {str(e)}")
                for future in futures:
                    future.cancel()
                raise


SERIAL = WorkQueue(1)
