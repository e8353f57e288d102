"""Background workers: a bounded prefetch thread and an ordered thread map."""

from __future__ import annotations

import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, TypeVar

from dave.log import get_logger

log = get_logger("WORKER")

T = TypeVar("T")
R = TypeVar("R")

_DONE = object()


class _Failure:
    __slots__ = ("exc",)

    def __init__(self, exc: BaseException):
        self.exc = exc


class Prefetcher(Iterator[T]):
    """Runs ``source`` on a daemon thread, ``depth`` items ahead of the consumer.

    Items come out in source order. An exception raised by the source is
    re-raised in the consumer at the position it occurred.
    """

    def __init__(self, source: Iterable[T], depth: int = 2, name: str = "prefetch"):
        if depth < 1:
            raise ValueError(f"prefetch depth must be >= 1, got {depth}")
        self._q: "queue.Queue[object]" = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._finished = False
        self._thread = threading.Thread(target=self._run, args=(iter(source),), name=name, daemon=True)
        self._thread.start()

    def _put(self, item: object) -> bool:
        while not self._stop.is_set():
            try:
                self._q.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self, it: Iterator[T]) -> None:
        try:
            for item in it:
                if not self._put(item):
                    return
        except BaseException as e:  # forwarded to the consumer
            self._put(_Failure(e))
            return
        self._put(_DONE)

    def __iter__(self) -> "Prefetcher[T]":
        return self

    def __next__(self) -> T:
        if self._finished:
            raise StopIteration
        item = self._q.get()
        if item is _DONE:
            self._finished = True
            raise StopIteration
        if isinstance(item, _Failure):
            self._finished = True
            raise item.exc
        return item  # type: ignore[return-value]

    def close(self) -> None:
        self._stop.set()
        self._finished = True
        with self._q.mutex:
            self._q.queue.clear()
        self._thread.join(timeout=1.0)
        if self._thread.is_alive():
            log.debug("prefetch thread still draining its source")

    def __enter__(self) -> "Prefetcher[T]":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def maybe_prefetch(source: Iterable[T], enabled: bool, depth: int = 2) -> Iterable[T]:
    return Prefetcher(source, depth=depth) if enabled else source


def run_parallel(
    fn: Callable[[T], R],
    items: Sequence[T],
    workers: Optional[int] = None,
    deterministic: bool = False,
) -> List[R]:
    """``[fn(x) for x in items]``, on a thread pool unless ``deterministic``.

    Results keep input order either way.
    """
    if deterministic or len(items) <= 1 or (workers is not None and workers <= 1):
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="dave") as pool:
        return list(pool.map(fn, items))
