"""Structured parallelism: finish/async joins, keyed locks, batch prefetch.

A finish block spawns one thread per async statement and exits only after
every task and its own serial block have completed; the first captured task
error (in task order, serial last) is re-raised at the join. Shared
attributions are serialized by named re-entrant locks, one per storage key.

The prefetch queue is a bounded multi-producer channel: workers claim batch
indices, run the loader, and push results while the consumer trains on the
previous batch. Delivery is exactly-once and unordered across workers; the
end marker is sticky and a loader failure poisons the queue.
"""

from __future__ import annotations

import queue
import threading
from collections.abc import Callable

from nsk.errors import NskRuntimeError


class EndOfData:
    def __repr__(self):
        return "<end-of-data>"


END_OF_DATA = EndOfData()


class LockRegistry:
    """Named re-entrant locks created on first use."""

    def __init__(self):
        self._locks: dict[str, threading.RLock] = {}
        self._meta = threading.Lock()

    def lock(self, name: str) -> threading.RLock:
        lk = self._locks.get(name)
        if lk is None:
            with self._meta:
                lk = self._locks.setdefault(name, threading.RLock())
        return lk

    def __len__(self):
        return len(self._locks)


def locked_assign(registry: LockRegistry, key: str, action: Callable):
    """Run a read-modify-write (or plain write) atomically for its storage key."""
    with registry.lock(key):
        return action()


class FinishScope:
    """Join bookkeeping for one finish block."""

    def __init__(self, task_count: int):
        self.pending = task_count
        self.failures: list[tuple[int, BaseException]] = []
        self._lock = threading.Lock()

    def task_done(self, index: int, error: BaseException | None) -> None:
        with self._lock:
            self.pending -= 1
            if error is not None:
                self.failures.append((index, error))


def run_finish(serial: Callable[[], None], async_tasks: list[Callable[[], None]]) -> None:
    """Run async tasks on their own threads, the serial block here, join all.

    Every task runs to completion even if another fails; afterwards the
    lowest-index async error (or else the serial block's error) is re-raised.
    """
    fs = FinishScope(len(async_tasks))
    threads = []
    for index, task in enumerate(async_tasks):
        def runner(i=index, fn=task):
            try:
                fn()
                fs.task_done(i, None)
            except BaseException as exc:  # noqa: BLE001 - captured for the join
                fs.task_done(i, exc)

        th = threading.Thread(target=runner, name=f"nsk-async-{index}", daemon=True)
        threads.append(th)
        th.start()
    serial_error: BaseException | None = None
    try:
        serial()
    except BaseException as exc:  # noqa: BLE001
        serial_error = exc
    for th in threads:
        th.join()
    if fs.failures:
        fs.failures.sort(key=lambda pair: pair[0])
        raise fs.failures[0][1]
    if serial_error is not None:
        raise serial_error


class _Poison:
    def __init__(self, error: BaseException):
        self.error = error


class PrefetchQueue:
    """Bounded channel fed by W workers claiming batch indices."""

    def __init__(self, loader, workers: int, capacity: int, n_batches: int):
        if workers < 1:
            raise NskRuntimeError(f"prefetch needs at least 1 worker, got {workers}")
        if capacity < 1:
            raise NskRuntimeError(f"prefetch capacity must be at least 1, got {capacity}")
        self.loader = loader
        self.workers = workers
        self.capacity = capacity
        self.n_batches = n_batches
        self._slots: queue.Queue = queue.Queue(maxsize=capacity)
        self._next_index = 0
        self._active_workers = workers
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def _claim(self) -> int | None:
        with self._lock:
            if self._next_index >= self.n_batches:
                return None
            i = self._next_index
            self._next_index += 1
            return i

    def _put(self, item) -> None:
        while not self._stop.is_set():
            try:
                self._slots.put(item, timeout=0.05)
                return
            except queue.Full:
                continue

    def _worker(self) -> None:
        try:
            while not self._stop.is_set():
                i = self._claim()
                if i is None:
                    break
                try:
                    value = self.loader(i)
                except BaseException as exc:  # noqa: BLE001 - poison the queue
                    self._put(_Poison(exc))
                    return
                self._put(value)
        finally:
            with self._lock:
                self._active_workers -= 1
                last = self._active_workers == 0
            if last:
                self._put(END_OF_DATA)

    def start(self) -> "PrefetchQueue":
        for w in range(self.workers):
            th = threading.Thread(target=self._worker, name=f"nsk-prefetch-{w}", daemon=True)
            self._threads.append(th)
            th.start()
        return self

    def next(self):
        item = self._slots.get()
        if item is END_OF_DATA:
            self._slots.put(item)  # sticky: every consumer sees the marker
            return END_OF_DATA
        if isinstance(item, _Poison):
            self._stop.set()
            self._slots.put(item)
            raise item.error
        return item

    def shutdown(self) -> None:
        self._stop.set()


def prefetch_start(loader, workers: int, capacity: int, n_batches: int) -> PrefetchQueue:
    """Start W workers mapping batch indices through ``loader`` into a queue."""
    return PrefetchQueue(loader, workers, capacity, n_batches).start()


def prefetch_next(q: PrefetchQueue):
    """Next ready batch, blocking; END_OF_DATA (sticky) after the last one."""
    return q.next()
