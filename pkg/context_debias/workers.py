from __future__ import annotations

import asyncio
from collections.abc import Callable, Sequence
from typing import TypeVar

T = TypeVar("T")


async def run_bounded(jobs: Sequence[Callable[[], T]], *, workers: int) -> list[T]:
    """Run blocking jobs in threads, at most ``workers`` at a time, results in input order."""
    sem = asyncio.Semaphore(max(1, int(workers)))

    async def _run_one(job: Callable[[], T]) -> T:
        async with sem:
            return await asyncio.to_thread(job)

    return list(await asyncio.gather(*(_run_one(job) for job in jobs)))


def run_bounded_sync(jobs: Sequence[Callable[[], T]], *, workers: int) -> list[T]:
    if int(workers) <= 1:
        return [job() for job in jobs]
    return asyncio.run(run_bounded(jobs, workers=workers))
