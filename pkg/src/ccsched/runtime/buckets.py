"""Bucket tables: one collective over many non-contiguous tensors.

Each tensor is cut into buckets of at most ``BUCKET_CAPACITY`` elements
(buckets never span two tensors) and the buckets are dealt to workers
round-robin. A bucket record is an 8-byte tensor address plus a 4-byte
offset, so a tensor of N elements costs 12 * ceil(N / 1024) bytes of metadata.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DivisibilityError, InvalidInput, ShapeMismatch
from .collectives import CollectiveResult, _run_all, all_reduce, reduce_scatter
from .config import CommConfig

BUCKET_CAPACITY = 1 << 10
BUCKET_RECORD_BYTES = 12


@dataclass(frozen=True)
class Bucket:
    tensor: int   # index into the table's tensor list
    offset: int   # first element inside that tensor
    extent: int


@dataclass(frozen=True)
class BucketTable:
    names: tuple
    counts: tuple
    buckets: tuple
    workers: int
    assignment: tuple  # worker index of every bucket
    capacity: int = BUCKET_CAPACITY

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def metadata_bytes(self) -> int:
        return BUCKET_RECORD_BYTES * len(self.buckets)

    def packed_offsets(self) -> list[int]:
        """Position of every bucket inside the packed contiguous buffer."""
        out, pos = [], 0
        for b in self.buckets:
            out.append(pos)
            pos += b.extent
        return out

    def pack(self, tensors: list) -> np.ndarray:
        flat = [np.asarray(t, dtype=np.float32).reshape(-1) for t in tensors]
        out = np.empty(self.total, dtype=np.float32)
        starts = self.packed_offsets()
        for w in range(self.workers):
            for i in range(w, len(self.buckets), self.workers):
                b = self.buckets[i]
                out[starts[i]:starts[i] + b.extent] = flat[b.tensor][b.offset:b.offset + b.extent]
        return out

    def unpack(self, packed: np.ndarray, shapes: list) -> list:
        flat = [np.empty(c, dtype=np.float32) for c in self.counts]
        for b, start in zip(self.buckets, self.packed_offsets()):
            flat[b.tensor][b.offset:b.offset + b.extent] = packed[start:start + b.extent]
        return [f.reshape(s) for f, s in zip(flat, shapes)]


def metadata_bytes(total_elems: int) -> int:
    return BUCKET_RECORD_BYTES * -(-int(total_elems) // BUCKET_CAPACITY)


def metadata_ratio(total_elems: int, byte_width: int) -> float:
    """Metadata bytes relative to the payload bytes."""
    return metadata_bytes(total_elems) / (total_elems * byte_width)


def build_bucket_table(tensors: list, workers: int = 1) -> BucketTable:
    """``tensors`` is a list of (name, element count)."""
    if workers < 1:
        raise InvalidInput("workers must be at least 1")
    buckets = []
    for i, (_, count) in enumerate(tensors):
        if count <= 0:
            raise InvalidInput(f"tensor {i} has {count} elements")
        for off in range(0, count, BUCKET_CAPACITY):
            buckets.append(Bucket(i, off, min(BUCKET_CAPACITY, count - off)))
    assignment = tuple(i % workers for i in range(len(buckets)))
    return BucketTable(tuple(n for n, _ in tensors), tuple(int(c) for _, c in tensors),
                       tuple(buckets), workers, assignment)


def scattered_collective(cfg: CommConfig, table: BucketTable, inputs: list, kind: str = "AllReduce",
                         reducer: str = "+", fused=None, byte_width: int = 4,
                         mode: str = "roundrobin") -> CollectiveResult:
    """One collective over every tensor of ``table``.

    ``inputs[r]`` is rank r's list of tensors. AllReduce returns every rank's
    tensors scattered back; ReduceScatter returns each rank's block of the
    packed buffer. ``fused`` is an optional element-wise function applied to
    the reduced values.
    """
    world = len(inputs)
    shapes = [np.shape(t) for t in inputs[0]]
    for r, ts in enumerate(inputs):
        if [np.shape(t) for t in ts] != shapes:
            raise ShapeMismatch(f"rank {r} holds tensors of different shapes")
    if [int(np.prod(s)) for s in shapes] != list(table.counts):
        raise ShapeMismatch("tensors do not match the bucket table")
    if kind == "ReduceScatter" and table.total % world:
        raise DivisibilityError(f"{table.total} elements do not split over {world} ranks")
    if kind not in ("AllReduce", "ReduceScatter"):
        raise InvalidInput(f"unsupported scattered collective {kind!r}")
    packed = [table.pack(ts) for ts in inputs]

    def make(ring):
        if kind == "AllReduce":
            value = yield from all_reduce(ring, cfg, packed[ring.pos], reducer)
            if fused is not None:
                value = np.asarray(fused(value), dtype=np.float32)
            return table.unpack(value, shapes)
        value = yield from reduce_scatter(ring, cfg, packed[ring.pos], 0, reducer)
        return value if fused is None else np.asarray(fused(value), dtype=np.float32)

    return _run_all(cfg, make, world, mode, byte_width)
