from __future__ import annotations

import threading
import time
from collections.abc import Callable

from context_debias.workers import run_bounded, run_bounded_sync


def _tracking_jobs(count: int) -> tuple[list[Callable[[], int]], dict[str, int]]:
    lock = threading.Lock()
    state = {"active": 0, "peak": 0}

    def make(k: int) -> Callable[[], int]:
        def job() -> int:
            with lock:
                state["active"] += 1
                state["peak"] = max(state["peak"], state["active"])
            time.sleep(0.01 * (count - k))
            with lock:
                state["active"] -= 1
            return k * k

        return job

    return [make(k) for k in range(count)], state


async def test_run_bounded_keeps_order_and_limit() -> None:
    jobs, state = _tracking_jobs(8)
    results = await run_bounded(jobs, workers=3)
    assert results == [k * k for k in range(8)]
    assert 1 <= state["peak"] <= 3


def test_sync_wrapper_runs_inline_for_one_worker() -> None:
    seen: list[str] = []
    jobs = [lambda: seen.append(threading.current_thread().name) or 1 for _ in range(3)]
    assert run_bounded_sync(jobs, workers=1) == [1, 1, 1]
    assert set(seen) == {threading.current_thread().name}


def test_sync_wrapper_uses_threads_for_several_workers() -> None:
    jobs, state = _tracking_jobs(6)
    assert run_bounded_sync(jobs, workers=2) == [k * k for k in range(6)]
    assert state["peak"] <= 2
