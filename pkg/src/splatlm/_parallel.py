"""Worker-count control for the data-parallel pixel loops.

Parallelism only ever splits work into disjoint output regions (row bands of
an image, or whole images); no reduction order depends on the worker count, so
results are bitwise identical for any thread setting.
"""

from concurrent.futures import ThreadPoolExecutor

_num_threads = 1


def set_num_threads(n: int) -> None:
    global _num_threads
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _num_threads = int(n)


def get_num_threads() -> int:
    return _num_threads


def parallel_map(func, items):
    """Map ``func`` over ``items``, preserving order.

    Runs on a thread pool when more than one worker is configured. ``func``
    must write only to state owned by its own item.
    """
    items = list(items)
    if _num_threads == 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=_num_threads) as pool:
        return list(pool.map(func, items))


def row_bands(height: int) -> list[range]:
    """Split image rows into one contiguous band per worker."""
    n = min(_num_threads, height)
    bounds = [height * i // n for i in range(n + 1)]
    return [range(bounds[i], bounds[i + 1]) for i in range(n) if bounds[i] < bounds[i + 1]]
