"""Worker-count handling and an order-preserving chunked map."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

ENV_VAR = "GEONODE_THREADS"


def worker_count() -> int:
    """GEONODE_THREADS if set (>= 1), otherwise the hardware parallelism."""
    raw = os.environ.get(ENV_VAR)
    if raw is None or raw.strip() == "":
        return max(1, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}")
    return n


def chunk_bounds(n: int, parts: int):
    """Contiguous [start, stop) ranges splitting n items into at most ``parts`` pieces."""
    parts = max(1, min(parts, n))
    edges = np.linspace(0, n, parts + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def map_chunks(fn, args_list, workers=None):
    """[fn(*args) for args in args_list], across processes when workers > 1.

    Results come back in input order, so downstream reductions are
    independent of scheduling.
    """
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(args_list) <= 1:
        return [fn(*a) for a in args_list]
    with ProcessPoolExecutor(max_workers=min(workers, len(args_list))) as ex:
        futures = [ex.submit(fn, *a) for a in args_list]
        return [f.result() for f in futures]


__all__ = ["ENV_VAR", "worker_count", "chunk_bounds", "map_chunks"]
