"""Intra-worker data-parallel loops with static or dynamic scheduling."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor


class LanePool:
    """Runs independent per-region tasks on ``lanes`` threads.

    Static scheduling splits the task list into ``lanes`` contiguous chunks
    up front; dynamic scheduling hands out one task at a time to whichever
    lane is idle. Results always come back in input order.
    """

    def __init__(self, lanes: int = 1, dynamic: bool = False):
        if lanes < 1:
            raise ValueError(f"need at least one lane, got {lanes}")
        self.lanes = lanes
        self.dynamic = dynamic
        self._pool = ThreadPoolExecutor(max_workers=lanes, thread_name_prefix="mra-lane") if lanes > 1 else None

    def map(self, fn, items) -> list:
        items = list(items)
        if self._pool is None or len(items) <= 1:
            return [fn(x) for x in items]
        if self.dynamic:
            return list(self._pool.map(fn, items))
        n = len(items)
        bounds = [n * k // self.lanes for k in range(self.lanes + 1)]
        chunks = [items[bounds[k] : bounds[k + 1]] for k in range(self.lanes)]
        parts = self._pool.map(lambda chunk: [fn(x) for x in chunk], chunks)
        return [y for part in parts for y in part]

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
