"""
Worker pool helper
Fans independent tasks out to threads and returns results in submission order
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> List[R]:
    """
    Apply fn to every item, optionally on a thread pool

    Results keep the order of `items` whatever order workers finish in, so any
    reduction over them is independent of scheduling. The first task error is re-raised.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    workers = min(threads, len(items))
    logger.debug(f"Running {len(items)} tasks on {workers} workers")
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(fn, item) for item in items]
        return [future.result() for future in futures]
