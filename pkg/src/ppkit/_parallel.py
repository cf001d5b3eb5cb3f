import os
from concurrent.futures import ThreadPoolExecutor


def n_workers() -> int:
    env = os.environ.get("PPKIT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"PPKIT_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def pmap(fn, items):
    """Ordered map; results come back in input order whatever the worker count."""
    items = list(items)
    workers = min(n_workers(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(fn, items))
