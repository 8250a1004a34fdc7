"""
Ordered fan-out over a thread pool.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class TaskPool:
    """Runs independent work items, returning results in input order."""

    def __init__(self, max_workers: int = 1):
        self.max_workers = max(1, int(max_workers))

    def map(self, func: Callable[[T], R], items: Sequence[T]) -> List[R]:
        if self.max_workers == 1 or len(items) <= 1:
            return [func(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            return list(executor.map(func, items))

