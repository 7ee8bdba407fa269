"""Simulated multi-rank runtime: ring collectives, fused kernels and overlap."""
from .buckets import BucketTable, build_bucket_table, metadata_bytes, scattered_collective
from .chunks import Chunk, ChunkMap, chunk_map, production_order
from .collectives import (CollectiveResult, ring_all_gather, ring_all_reduce,
                          ring_reduce_scatter)
from .config import CommConfig
from .executor import ExecutionPlan, RunReport, Step, execute, plan
from .standalone import fused_all_reduce, p2p_send_recv

__all__ = [
    "BucketTable", "Chunk", "ChunkMap", "CollectiveResult", "CommConfig", "ExecutionPlan",
    "RunReport", "Step", "build_bucket_table", "chunk_map", "execute", "fused_all_reduce",
    "metadata_bytes", "p2p_send_recv", "plan", "production_order", "ring_all_gather",
    "ring_all_reduce", "ring_reduce_scatter", "scattered_collective",
]
