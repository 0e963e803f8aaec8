"""Point-to-point message transports for the worker protocol.

A transport launches ``p`` workers, hands each an :class:`Endpoint` and
collects one result per worker. Messages are reliable and ordered per
(sender, receiver) pair; ``send`` never blocks. Two implementations ship:
threads in the calling process, and forked processes.
"""

from __future__ import annotations

import logging
import multiprocessing as mp
import pickle
import queue
import threading
import traceback
from typing import Any, Callable

log = logging.getLogger(__name__)

POLL_SECONDS = 0.2


class TransportError(RuntimeError):
    pass


class Endpoint:
    def __init__(self, rank: int, size: int, inboxes, abort):
        self.rank = rank
        self.size = size
        self._inboxes = inboxes
        self._abort = abort
        self._pending: dict = {}
        self.sent_messages = 0
        self.sent_values = 0

    def send(self, dest: int, tag, payload: Any) -> None:
        if not 0 <= dest < self.size:
            raise TransportError(f"worker {self.rank}: no worker {dest}")
        self.sent_messages += 1
        self.sent_values += getattr(payload, "size", 1)
        self._inboxes[dest].put((self.rank, tag, payload))

    def recv(self, source: int, tag) -> Any:
        key = (source, tag)
        box = self._pending.get(key)
        if box:
            return box.pop(0)
        inbox = self._inboxes[self.rank]
        while True:
            if self._abort.is_set():
                raise TransportError(f"worker {self.rank}: run aborted while waiting for {tag} from {source}")
            try:
                src, t, payload = inbox.get(timeout=POLL_SECONDS)
            except queue.Empty:
                continue
            if (src, t) == key:
                return payload
            self._pending.setdefault((src, t), []).append(payload)

    def gather(self, value: Any, tag="gather", root: int = 0):
        """Collect ``value`` from every worker at ``root`` in rank order; others get None."""
        if self.rank != root:
            self.send(root, tag, value)
            return None
        out = []
        for w in range(self.size):
            out.append(value if w == root else self.recv(w, tag))
        return out


WorkerFn = Callable[[Endpoint], Any]


class ThreadTransport:
    """Workers as threads of the current process (shared address space, isolated state)."""

    name = "thread"

    def run(self, p: int, fn: WorkerFn) -> list:
        inboxes = [queue.Queue() for _ in range(p)]
        abort = threading.Event()
        results: list = [None] * p
        errors: list = [None] * p

        def target(rank):
            try:
                results[rank] = fn(Endpoint(rank, p, inboxes, abort))
            except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
                errors[rank] = exc
                abort.set()

        threads = [threading.Thread(target=target, args=(w,), name=f"mra-worker-{w}") for w in range(p)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        _raise_first(errors)
        return results


def _process_main(fn, rank, p, inboxes, abort, results):
    try:
        out = fn(Endpoint(rank, p, inboxes, abort))
        results.put((rank, True, out))
    except BaseException as exc:  # noqa: BLE001
        abort.set()
        try:
            pickle.dumps(exc)
            results.put((rank, False, exc))
        except Exception:  # noqa: BLE001 - unpicklable exception, ship the text
            results.put((rank, False, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"))


class ProcessTransport:
    """One forked process per worker; payloads travel pickled through pipes."""

    name = "process"

    def __init__(self, start_method: str = "fork"):
        self.ctx = mp.get_context(start_method)

    def run(self, p: int, fn: WorkerFn) -> list:
        ctx = self.ctx
        inboxes = [ctx.Queue() for _ in range(p)]
        abort = ctx.Event()
        resq = ctx.Queue()
        procs = [
            ctx.Process(target=_process_main, args=(fn, w, p, inboxes, abort, resq), name=f"mra-worker-{w}")
            for w in range(p)
        ]
        for pr in procs:
            pr.start()
        results: list = [None] * p
        errors: list = [None] * p
        got = 0
        while got < p:
            try:
                rank, ok, out = resq.get(timeout=POLL_SECONDS)
            except queue.Empty:
                dead = [w for w, pr in enumerate(procs) if not pr.is_alive() and pr.exitcode not in (0, None)]
                if dead:
                    abort.set()
                    for pr in procs:
                        pr.join(timeout=5)
                        if pr.is_alive():
                            pr.terminate()
                    raise TransportError(f"worker process(es) {dead} died (exit codes {[procs[w].exitcode for w in dead]})")
                continue
            got += 1
            if ok:
                results[rank] = out
            elif isinstance(out, BaseException):
                errors[rank] = out
            else:
                errors[rank] = TransportError(f"worker {rank} failed: {out}")
        for pr in procs:
            pr.join()
        _raise_first(errors)
        return results


def _raise_first(errors) -> None:
    primary = [e for e in errors if e is not None and not isinstance(e, TransportError)]
    any_err = primary or [e for e in errors if e is not None]
    if any_err:
        raise any_err[0]


def get_transport(name: str):
    if name == "thread":
        return ThreadTransport()
    if name == "process":
        return ProcessTransport()
    raise ValueError(f"unknown transport {name!r} (expected 'thread' or 'process')")
