"""Ordered point-to-point message passing between in-process ranks.

Each rank is a generator that yields ``SendOp`` and ``RecvOp`` requests.
Sends never block; a receive suspends the rank until the matching message
(same source, destination and tag) arrives. Two drivers run the same rank
generators: a single-threaded round-robin scheduler and one OS thread per
rank. Both deliver identical data, so results never depend on the driver.
"""
from __future__ import annotations

import queue
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..errors import Deadlock, NoSuchRank


@dataclass(frozen=True)
class SendOp:
    dst: int
    tag: tuple
    payload: np.ndarray
    nbytes: int


@dataclass(frozen=True)
class RecvOp:
    src: int
    tag: tuple


@dataclass
class Counters:
    world: int
    rank_group: tuple  # group id of every rank
    comm_bytes: list = field(default_factory=list)
    inter_group_bytes: list = field(default_factory=list)
    messages: list = field(default_factory=list)

    def __post_init__(self):
        self.comm_bytes = [0] * self.world
        self.inter_group_bytes = [0] * self.world
        self.messages = [0] * self.world

    def record(self, src: int, op: SendOp):
        self.comm_bytes[src] += op.nbytes
        self.messages[src] += 1
        if self.rank_group[src] != self.rank_group[op.dst]:
            self.inter_group_bytes[src] += op.nbytes


def _check_dst(world: int, op: SendOp):
    if not 0 <= op.dst < world:
        raise NoSuchRank(f"send to rank {op.dst} outside the {world}-rank world")


def run_roundrobin(gens: dict, counters: Counters) -> dict:
    """Drive rank generators one after another until all finish."""
    mail: dict[tuple, deque] = {}
    waiting: dict[int, RecvOp] = {}
    results: dict[int, object] = {}
    active = sorted(gens)
    inbox: dict[int, object] = {r: None for r in active}
    while active:
        progressed = False
        for rank in list(active):
            if rank in waiting:
                op = waiting[rank]
                box = mail.get((op.src, rank, op.tag))
                if not box:
                    continue
                inbox[rank] = box.popleft()
                del waiting[rank]
            gen = gens[rank]
            while True:
                try:
                    op = gen.send(inbox[rank])
                except StopIteration as stop:
                    results[rank] = stop.value
                    active.remove(rank)
                    break
                inbox[rank] = None
                progressed = True
                if isinstance(op, SendOp):
                    _check_dst(counters.world, op)
                    counters.record(rank, op)
                    mail.setdefault((rank, op.dst, op.tag), deque()).append(op.payload.copy())
                    continue
                box = mail.get((op.src, rank, op.tag))
                if box:
                    inbox[rank] = box.popleft()
                    continue
                waiting[rank] = op
                break
        if active and not progressed:
            stuck = {r: (waiting[r].src, waiting[r].tag) for r in active if r in waiting}
            raise Deadlock(f"no rank can make progress; waiting on {stuck}")
    return results


def run_threaded(gens: dict, counters: Counters, timeout: float = 60.0) -> dict:
    """Drive every rank generator on its own thread."""
    lock = threading.Lock()
    boxes: dict[tuple, queue.Queue] = {}
    abort = threading.Event()
    results: dict[int, object] = {}
    errors: dict[int, BaseException] = {}

    def box(key):
        with lock:
            q = boxes.get(key)
            if q is None:
                q = boxes[key] = queue.Queue()
            return q

    def receive(rank: int, op: RecvOp):
        q = box((op.src, rank, op.tag))
        waited = 0.0
        while True:
            try:
                return q.get(timeout=0.05)
            except queue.Empty:
                waited += 0.05
                if abort.is_set():
                    raise Deadlock("aborted because another rank failed") from None
                if waited >= timeout:
                    raise Deadlock(f"rank {rank} timed out waiting for {op.src} tag {op.tag}") \
                        from None

    def worker(rank: int):
        gen = gens[rank]
        value = None
        try:
            while True:
                try:
                    op = gen.send(value)
                except StopIteration as stop:
                    results[rank] = stop.value
                    return
                value = None
                if isinstance(op, SendOp):
                    _check_dst(counters.world, op)
                    counters.record(rank, op)
                    box((rank, op.dst, op.tag)).put(op.payload.copy())
                else:
                    value = receive(rank, op)
        except BaseException as exc:  # surfaced to the caller below
            errors[rank] = exc
            abort.set()

    threads = [threading.Thread(target=worker, args=(r,), daemon=True) for r in sorted(gens)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        # report the root cause rather than the ranks aborted because of it
        first = [errors[r] for r in sorted(errors) if not isinstance(errors[r], Deadlock)]
        raise (first or [errors[min(errors)]])[0]
    return results


def run(gens: dict, counters: Counters, mode: str = "threads") -> dict:
    if mode == "roundrobin":
        return run_roundrobin(gens, counters)
    if mode == "threads":
        return run_threaded(gens, counters)
    raise ValueError(f"unknown runtime mode {mode!r}")
