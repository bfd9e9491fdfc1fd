"""Thread pool sized by ``PAIRLINK_THREADS``.

Work items carry their own named random streams, so results never depend on
the number of workers or the order in which they finish.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count() -> int:
    raw = os.environ.get("PAIRLINK_THREADS", "")
    try:
        n = int(raw) if raw.strip() else (os.cpu_count() or 1)
    except ValueError:
        n = 1
    return max(1, n)


def pmap(fn, items) -> list:
    """Ordered map; runs inline when only one worker is allowed."""
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
