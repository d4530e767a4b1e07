"""Worker-pool plumbing.

The ``CORTEX3D_THREADS`` environment variable caps the number of worker
threads used when independent work items (batch members, feature channels)
are evaluated. Results are always combined in fixed item order, so worker
count affects speed only, never values.
"""

import os
from concurrent.futures import ThreadPoolExecutor

ENV_VAR = "CORTEX3D_THREADS"


def worker_count() -> int:
    """Number of worker threads to use (>= 1). Defaults to 1."""
    raw = os.environ.get(ENV_VAR)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{ENV_VAR} must be an integer, got {raw!r}") from exc
    return max(1, n)


def ordered_map(fn, items, workers: int | None = None) -> list:
    """Apply ``fn`` to every item, returning results in item order.

    With one worker this is a plain loop; otherwise items are dispatched to a
    thread pool. Either way the returned list order (and hence any downstream
    fixed-order reduction) is identical.
    """
    items = list(items)
    if workers is None:
        workers = worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
