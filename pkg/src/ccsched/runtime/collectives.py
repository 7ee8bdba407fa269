"""Chunked ring collectives as per-rank message-passing generators.

Buffers are flat and slice-major: for a tensor sliced along ``dim`` the
flat buffer is ``moveaxis(x, dim, 0).ravel()``, so block ``b`` of the
buffer is exactly slice ``b``. Data moves towards the left neighbour: rank
``i`` sends to ``i - 1`` and receives from ``i + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DivisibilityError, InvalidInput, ShapeMismatch
from .chunks import Chunk, chunk_map
from .comm import Counters, RecvOp, SendOp, run
from .config import CommConfig


def to_slice_major(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 0:
        return x.reshape(1)
    return np.ascontiguousarray(np.moveaxis(x, dim, 0)).reshape(-1)


def from_slice_major(flat: np.ndarray, shape: tuple, dim: int) -> np.ndarray:
    if not shape:
        return flat.reshape(())
    moved = (shape[dim],) + tuple(s for i, s in enumerate(shape) if i != dim)
    return np.ascontiguousarray(np.moveaxis(flat.reshape(moved), 0, dim))


def combine(a: np.ndarray, b: np.ndarray, reducer: str) -> np.ndarray:
    if reducer == "+":
        return np.add(a, b)
    if reducer == "max":
        return np.maximum(a, b)
    raise InvalidInput(f"unknown reducer {reducer!r}")


class Ring:
    """One rank's view of a ring over ``ranks`` (global rank ids)."""

    def __init__(self, ranks, pos: int, tag: tuple, byte_width: int):
        self.ranks = tuple(ranks)
        self.pos = pos
        self.tag = tuple(tag)
        self.bw = byte_width
        self.size = len(self.ranks)
        self.left = self.ranks[(pos - 1) % self.size]
        self.right = self.ranks[(pos + 1) % self.size]

    def reduce_scatter_chunk(self, read, write, chunk: Chunk, reducer: str):
        """Reduce one chunk; ``read(b, s, e)`` gives this rank's piece of block b.

        The fully reduced piece of the own block is passed to ``write(s, e, v)``.
        """
        s, e, w, i = chunk.start, chunk.stop, self.size, self.pos
        if w == 1:
            write(s, e, np.array(read(0, s, e), copy=True))
            return
        acc = np.array(read((i + 1) % w, s, e), copy=True)
        for k in range(w - 1):
            tag = self.tag + ("rs", chunk.chunk_id, k)
            yield SendOp(self.left, tag, acc, acc.size * self.bw)
            got = yield RecvOp(self.right, tag)
            acc = combine(got, read((i + k + 2) % w, s, e), reducer)
        write(s, e, acc)

    def all_gather_chunk(self, own: np.ndarray, write, chunk: Chunk):
        """Gather one chunk; ``write(b, s, e, v)`` stores block b's piece."""
        s, e, w, i = chunk.start, chunk.stop, self.size, self.pos
        cur = np.array(own, copy=True)
        write(i, s, e, cur)
        for k in range(w - 1):
            tag = self.tag + ("ag", chunk.chunk_id, k)
            yield SendOp(self.left, tag, cur, cur.size * self.bw)
            cur = yield RecvOp(self.right, tag)
            write((i + k + 1) % w, s, e, cur)

    def scalar_all_reduce(self, value: np.ndarray, reducer: str, tag: tuple):
        """Exchange one scalar with every rank and reduce in rank order."""
        if self.size == 1:
            return value
        value = np.asarray(value)
        for j, r in enumerate(self.ranks):
            if j != self.pos:
                yield SendOp(r, self.tag + tag + (self.pos,), value, value.size * self.bw)
        parts = []
        for j, r in enumerate(self.ranks):
            parts.append(value if j == self.pos else (yield RecvOp(r, self.tag + tag + (j,))))
        acc = parts[0]
        for x in parts[1:]:
            acc = combine(acc, x, reducer)
        return acc


class BlockBuffer:
    """A flat buffer of ``world`` blocks with piecewise read/write helpers."""

    def __init__(self, flat: np.ndarray, block: int):
        self.flat = flat
        self.block = block

    def read(self, b: int, s: int, e: int) -> np.ndarray:
        return self.flat[b * self.block + s: b * self.block + e]

    def write(self, b: int, s: int, e: int, v: np.ndarray):
        self.flat[b * self.block + s: b * self.block + e] = v


def padded_flat(x: np.ndarray, world: int) -> tuple:
    """Flat copy of ``x`` padded with zeros to a multiple of ``world``."""
    flat = np.asarray(x, dtype=np.float32).reshape(-1)
    n = flat.size
    total = -(-n // world) * world if n else world
    out = np.zeros(total, dtype=np.float32)
    out[:n] = flat
    return out, n


# whole-tensor collectives on one rank ------------------------------------------------------

def reduce_scatter(ring: Ring, cfg: CommConfig, x: np.ndarray, dim: int, reducer: str):
    """Ring reduce-scatter of ``x`` along ``dim``; returns this rank's slice."""
    w = ring.size
    if x.shape[dim] % w:
        raise DivisibilityError(f"extent {x.shape[dim]} not divisible by {w} ranks")
    buf = BlockBuffer(to_slice_major(x, dim).astype(np.float32), x.size // w)
    out = np.empty(buf.block, dtype=np.float32)
    cm = chunk_map(x.size, w, cfg)

    def keep(s, e, v):
        out[s:e] = v

    for c in cm.chunks:
        yield from ring.reduce_scatter_chunk(buf.read, keep, c, reducer)
    shape = list(x.shape)
    shape[dim] //= w
    return from_slice_major(out, tuple(shape), dim)


def all_gather(ring: Ring, cfg: CommConfig, x: np.ndarray, dim: int):
    """Ring all-gather of slices along ``dim``; returns the full tensor."""
    w = ring.size
    own = to_slice_major(x, dim).astype(np.float32)
    out = BlockBuffer(np.empty(own.size * w, dtype=np.float32), own.size)
    cm = chunk_map(own.size * w, w, cfg)
    for c in cm.chunks:
        yield from ring.all_gather_chunk(own[c.start:c.stop], out.write, c)
    shape = list(x.shape)
    shape[dim] *= w
    return from_slice_major(out.flat, tuple(shape), dim)


def all_reduce(ring: Ring, cfg: CommConfig, x: np.ndarray, reducer: str):
    """Ring all-reduce: reduce-scatter then all-gather of every chunk."""
    w = ring.size
    flat, n = padded_flat(x, w)
    src = BlockBuffer(flat, flat.size // w)
    out = BlockBuffer(np.empty_like(flat), src.block)
    own = np.empty(src.block, dtype=np.float32)

    def keep(s, e, v):
        own[s:e] = v

    for c in chunk_map(flat.size, w, cfg).chunks:
        yield from ring.reduce_scatter_chunk(src.read, keep, c, reducer)
        yield from ring.all_gather_chunk(own[c.start:c.stop], out.write, c)
    return out.flat[:n].reshape(np.shape(x))


def broadcast(ring: Ring, cfg: CommConfig, x: np.ndarray, root: int):
    """Pipelined chain broadcast from group position ``root``."""
    w = ring.size
    flat = np.asarray(x, dtype=np.float32).reshape(-1).copy()
    order = [(root + j) % w for j in range(w)]
    at = order.index(ring.pos)
    for c in chunk_map(flat.size, 1, cfg).chunks:
        tag = ring.tag + ("bc", c.chunk_id)
        if at > 0:
            flat[c.start:c.stop] = yield RecvOp(ring.ranks[order[at - 1]], tag)
        if at < w - 1:
            piece = flat[c.start:c.stop]
            yield SendOp(ring.ranks[order[at + 1]], tag, piece, piece.size * ring.bw)
    return flat.reshape(np.shape(x))


def reduce_to_root(ring: Ring, cfg: CommConfig, x: np.ndarray, reducer: str, root: int):
    """Reduce-scatter, then every rank sends its block to the root."""
    w = ring.size
    flat, n = padded_flat(x, w)
    src = BlockBuffer(flat, flat.size // w)
    own = np.empty(src.block, dtype=np.float32)

    def keep(s, e, v):
        own[s:e] = v

    for c in chunk_map(flat.size, w, cfg).chunks:
        yield from ring.reduce_scatter_chunk(src.read, keep, c, reducer)
    tag = ring.tag + ("gather",)
    if ring.pos != root:
        yield SendOp(ring.ranks[root], tag + (ring.pos,), own, own.size * ring.bw)
        return np.zeros(np.shape(x), dtype=np.float32)
    out = BlockBuffer(np.empty_like(flat), src.block)
    for b in range(w):
        piece = own if b == root else (yield RecvOp(ring.ranks[b], tag + (b,)))
        out.write(b, 0, src.block, piece)
    return out.flat[:n].reshape(np.shape(x))


# standalone entry points -----------------------------------------------------------------

@dataclass
class CollectiveResult:
    outputs: list
    comm_bytes: list
    kernel_steps: int = 1


def _check_inputs(inputs: list):
    if not inputs:
        raise ShapeMismatch("no inputs")
    shapes = {np.shape(x) for x in inputs}
    if len(shapes) > 1:
        raise ShapeMismatch(f"ranks hold different shapes {sorted(shapes)}")


def _run_all(cfg: CommConfig, make, world: int, mode: str, byte_width: int) -> CollectiveResult:
    cfg.check_world(world)
    counters = Counters(world, (0,) * world)
    gens = {r: make(Ring(range(world), r, ("c",), byte_width)) for r in range(world)}
    out = run(gens, counters, mode)
    return CollectiveResult([out[r] for r in range(world)], list(counters.comm_bytes))


def ring_reduce_scatter(cfg: CommConfig, inputs: list, reducer: str = "+", dim: int = -1,
                        byte_width: int = 4, mode: str = "roundrobin") -> CollectiveResult:
    _check_inputs(inputs)
    dim = dim % max(np.ndim(inputs[0]), 1)
    return _run_all(cfg, lambda ring: reduce_scatter(
        ring, cfg, np.asarray(inputs[ring.pos], dtype=np.float32), dim, reducer), len(inputs), mode, byte_width)


def ring_all_gather(cfg: CommConfig, inputs: list, dim: int = -1, byte_width: int = 4,
                    mode: str = "roundrobin") -> CollectiveResult:
    _check_inputs(inputs)
    dim = dim % max(np.ndim(inputs[0]), 1)
    return _run_all(cfg, lambda ring: all_gather(
        ring, cfg, np.asarray(inputs[ring.pos], dtype=np.float32), dim), len(inputs), mode, byte_width)


def ring_all_reduce(cfg: CommConfig, inputs: list, reducer: str = "+", byte_width: int = 4,
                    mode: str = "roundrobin") -> CollectiveResult:
    _check_inputs(inputs)
    return _run_all(cfg, lambda ring: all_reduce(
        ring, cfg, np.asarray(inputs[ring.pos], dtype=np.float32), reducer), len(inputs), mode, byte_width)
