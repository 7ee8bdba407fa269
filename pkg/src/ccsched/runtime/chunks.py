"""Buffer tiles, rounds and chunks for ring collectives.

A tensor of N elements on W ranks is viewed as W blocks of N/W elements,
block b being the part rank b owns after a reduce-scatter. Every block is
processed in rounds of ``buffer_tile_elems / W`` elements, and each round is
split evenly across channels. A chunk is one (round, channel) piece; the
same element range is used inside every block.
"""
from __future__ import annotations

from dataclasses import dataclass

from .config import CommConfig


@dataclass(frozen=True)
class Chunk:
    chunk_id: int
    channel: int
    round: int
    start: int  # element range inside a block
    stop: int

    @property
    def size(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class ChunkMap:
    block: int
    world: int
    chunks: tuple

    @property
    def rounds(self) -> int:
        return max((c.round for c in self.chunks), default=-1) + 1

    def round_sizes(self) -> list[int]:
        sizes = [0] * self.rounds
        for c in self.chunks:
            sizes[c.round] += c.size
        return sizes


def chunk_map(total: int, world: int, cfg: CommConfig) -> ChunkMap:
    """Chunks of a ``total``-element tensor split into ``world`` blocks."""
    if total % world:
        raise ValueError(f"{total} elements do not split into {world} blocks")
    block = total // world
    per_round = max(cfg.buffer_tile_elems // world, 1)
    chunks = []
    rnd = 0
    for r_start in range(0, block, per_round):
        r_stop = min(r_start + per_round, block)
        n = r_stop - r_start
        base, extra = divmod(n, cfg.channels)
        pos = r_start
        for ch in range(cfg.channels):
            size = base + (1 if ch < extra else 0)
            if size:
                chunks.append(Chunk(len(chunks), ch, rnd, pos, pos + size))
            pos += size
        rnd += 1
    return ChunkMap(block, world, tuple(chunks))


def production_order(rank: int, n_chunks: int) -> list[int]:
    """Tile production order of an overlapped producer on ``rank``."""
    return [(rank + i) % n_chunks for i in range(n_chunks)]
