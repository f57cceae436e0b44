"""Order-preserving parallel map used by the estimation stages."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def _run_chunk(fn, chunk):
    return [fn(x) for x in chunk]


def chunked(items: Sequence[T], n_chunks: int) -> list[Sequence[T]]:
    """Split into at most ``n_chunks`` contiguous pieces of near-equal size."""
    n = len(items)
    n_chunks = max(1, min(n_chunks, n))
    step, extra = divmod(n, n_chunks)
    out, start = [], 0
    for i in range(n_chunks):
        stop = start + step + (1 if i < extra else 0)
        out.append(items[start:stop])
        start = stop
    return out


def pmap(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    """Map ``fn`` over ``items``; the result order never depends on ``workers``.

    ``fn`` must be a picklable module-level callable when ``workers > 1``.
    """
    items = list(items)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    chunks = chunked(items, workers * 4)
    with ProcessPoolExecutor(max_workers=workers) as ex:
        parts = list(ex.map(_run_chunk, [fn] * len(chunks), chunks))
    return [r for part in parts for r in part]
