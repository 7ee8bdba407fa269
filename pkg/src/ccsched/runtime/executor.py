"""Plans and executes programs on simulated ranks.

Every rank runs the same list of steps as a message-passing generator and
keeps only its local part of every value. Collectives use the chunked ring
routines; fused collectives and overlap groups go through a chunk engine
that processes one ring chunk at a time through a chain of members, so a
consumer starts on a chunk as soon as its producer has finished it.
"""
from __future__ import annotations

import heapq
import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import expr as ex
from ..errors import (CcschedError, OperandLayoutMismatch, ReplicationViolation, ShapeMismatch,
                      StepError)
from ..program import Layout, OpNode, Program, ref_node, require_valid, topo_order
from ..tensors import digest, global_value, info_local_size, local_shape, take_part
from .chunks import ChunkMap, chunk_map, production_order
from .collectives import (BlockBuffer, Ring, all_gather, all_reduce, broadcast, from_slice_major,
                          reduce_scatter, reduce_to_root, to_slice_major)
from .comm import Counters, RecvOp, SendOp, run
from .config import CommConfig
from .cost import VIEW_KINDS, CostModel, overlap_makespan
from .pointwise import DTYPE, BodyEvaluator, local_indices

# Planning ---------------------------------------------------------------------


@dataclass(frozen=True)
class Step:
    index: int
    kind: str      # "kernel", "view" or "overlap"
    nodes: tuple   # node ids; overlap members in chain order
    group: Optional[str] = None


@dataclass(frozen=True)
class ExecutionPlan:
    program: Program
    steps: tuple

    @property
    def kernel_steps(self) -> int:
        return sum(1 for s in self.steps if s.kind != "view")


def plan(p: Program) -> ExecutionPlan:
    """Topologically ordered steps; an overlap group is one step."""
    order = topo_order(p)
    rank_of = {nid: i for i, nid in enumerate(order)}
    unit_of: dict[str, str] = {}
    members: dict[str, tuple] = {}
    for g in p.overlap_groups:
        members[g.id] = tuple(g.attrs["members"])
        for m in g.attrs["members"]:
            unit_of[m] = g.id
    units: dict[str, list] = {}
    for nid in order:
        units.setdefault(unit_of.get(nid, nid), []).append(nid)
    deps = {u: set() for u in units}
    for u, nids in units.items():
        for nid in nids:
            for ref in p.node_map[nid].inputs:
                src = ref_node(ref)
                if src in rank_of and unit_of.get(src, src) != u:
                    deps[u].add(unit_of.get(src, src))
    users: dict[str, list] = {}
    for u, ds in deps.items():
        for d in ds:
            users.setdefault(d, []).append(u)
    indeg = {u: len(ds) for u, ds in deps.items()}
    first = {u: min(rank_of[n] for n in nids) for u, nids in units.items()}
    heap = [(first[u], u) for u, k in indeg.items() if k == 0]
    heapq.heapify(heap)
    steps = []
    while heap:
        _, u = heapq.heappop(heap)
        if u in members:
            steps.append(Step(len(steps), "overlap", members[u], u))
        else:
            kind = "view" if p.node_map[u].kind in VIEW_KINDS else "kernel"
            steps.append(Step(len(steps), kind, (u,)))
        for v in users.get(u, ()):
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, (first[v], v))
    return ExecutionPlan(p, tuple(steps))


# MatMul ---------------------------------------------------------------------------


def matmul_at(a2: np.ndarray, b: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Output entries (rows[i], cols[i]) of a2 @ b by an explicit k loop.

    Every entry is accumulated in the same order no matter which subset is
    requested, so tiles computed separately match the whole product bit for bit.
    """
    acc = a2[rows, 0] * b[0, cols]
    for k in range(1, a2.shape[1]):
        acc = acc + a2[rows, k] * b[k, cols]
    return acc


class MatMulTiles:
    """Index maps from slice-major output positions to (row, column)."""

    def __init__(self, a: np.ndarray, b: np.ndarray, dim: int):
        self.a2 = np.asarray(a, dtype=DTYPE).reshape(-1, a.shape[-1])
        self.b = np.asarray(b, dtype=DTYPE)
        self.shape = tuple(a.shape[:-1]) + (b.shape[1],)
        m = b.shape[1]
        flat_index = to_slice_major(np.arange(int(np.prod(self.shape))).reshape(self.shape), dim)
        self.rows = flat_index // m
        self.cols = flat_index % m

    def values(self, start: int, stop: int) -> np.ndarray:
        return matmul_at(self.a2, self.b, self.rows[start:stop], self.cols[start:stop])


def local_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    tiles = MatMulTiles(a, b, 0)
    return from_slice_major(tiles.values(0, tiles.rows.size), tiles.shape, 0)


# Rank context ------------------------------------------------------------------------


class RankContext:
    def __init__(self, p: Program, cfg: CommConfig, rank: int, env: dict, seed: int):
        self.p = p
        self.cfg = cfg
        self.rank = rank
        self.env = env
        self.seed = seed
        self.trace: dict[str, list] = {}

    def group_of(self, gid: int):
        return self.p.group_map[gid]

    def in_group(self, gid: int) -> bool:
        return self.rank in self.group_of(gid).rank_range

    def pos(self, gid: int) -> int:
        return self.rank - self.group_of(gid).first_rank

    def ring(self, gid: int, tag: tuple, byte_width: int) -> Ring:
        return Ring(self.group_of(gid).rank_range, self.pos(gid), tag, byte_width)

    def exec_groups(self, n: OpNode) -> tuple:
        """Groups whose ranks take part in ``n``."""
        if n.kind in ("Send", "FusedSend"):
            return (self.p.info(n.inputs[0]).group, n.info.group)
        return (n.info.group,)

    def evaluator(self, n: OpNode, gid: int, ring: Ring) -> BodyEvaluator:
        env_info = {r: (self.p.info(r).shape, self.p.info(r).layout) for r in n.inputs}
        if n.kind == "FusedAllReduce":
            src = self.p.info(n.inputs[0])
            env_info[n.attrs["rs_name"]] = (src.shape, Layout.sliced(fused_dim(self.p, n)))
            del env_info[n.inputs[0]]
        counter = [0]

        def reduce_scalar(reducer, value):
            counter[0] += 1
            return (yield from ring.scalar_all_reduce(np.asarray(value, dtype=DTYPE), reducer,
                                                      ("red", counter[0])))

        return BodyEvaluator(n.body, dict(n.stmt_info), env_info, self.seed, self.pos(gid),
                             self.group_of(gid).world_size, reduce_scalar)

    def store_body(self, n: OpNode, values: dict):
        for name, v in values.items():
            self.env[f"{n.id}:{name}"] = v
        if n.kind != "FusedAllReduce":
            self.env[n.id] = values[n.body[-1].name]


def fused_dim(p: Program, n: OpNode) -> int:
    return n.attrs.get("dim", len(p.info(n.inputs[0]).shape) - 1)


# Sequential node execution --------------------------------------------------------


def run_node(ctx: RankContext, n: OpNode, tag: tuple):
    p, env = ctx.p, ctx.env
    kind = n.kind
    if not any(ctx.in_group(g) for g in ctx.exec_groups(n)):
        return
    bw = n.info.elem.byte_width
    gid = n.info.group
    ins = [env.get(r) for r in n.inputs]
    if kind == "MatMul":
        env[n.id] = local_matmul(ins[0], ins[1])
    elif kind == "Slice":
        env[n.id] = np.ascontiguousarray(
            take_part(ins[0], n.attrs.get("dim", 0), ctx.pos(gid), ctx.group_of(gid).world_size))
    elif kind == "Recv":
        env[n.id] = ins[0]
    elif kind in ("AllReduce", "Broadcast") and p.info(n.inputs[0]).layout.kind == "replicated":
        env[n.id] = np.array(ins[0], dtype=DTYPE)
    elif kind == "AllReduce":
        env[n.id] = yield from all_reduce(ctx.ring(gid, tag, bw), ctx.cfg, ins[0],
                                          n.attrs.get("reducer", "+"))
    elif kind == "ReduceScatter":
        env[n.id] = yield from reduce_scatter(ctx.ring(gid, tag, bw), ctx.cfg, ins[0],
                                              n.info.layout.dim, n.attrs.get("reducer", "+"))
    elif kind == "AllGather":
        env[n.id] = yield from all_gather(ctx.ring(gid, tag, bw), ctx.cfg, ins[0],
                                          p.info(n.inputs[0]).layout.dim)
    elif kind == "Reduce":
        env[n.id] = yield from reduce_to_root(ctx.ring(gid, tag, bw), ctx.cfg, ins[0],
                                              n.attrs.get("reducer", "+"), n.attrs.get("root", 0))
    elif kind == "Broadcast":
        env[n.id] = yield from broadcast(ctx.ring(gid, tag, bw), ctx.cfg, ins[0],
                                         n.attrs.get("root", 0))
    elif kind == "Pointwise":
        ev = ctx.evaluator(n, gid, ctx.ring(gid, tag, bw))
        ctx.store_body(n, (yield from ev.run({r: env[r] for r in n.inputs})))
    elif kind in ("Send", "FusedSend"):
        src_gid = p.info(n.inputs[0]).group
        if ctx.in_group(src_gid):
            pos = ctx.pos(src_gid)
            if kind == "FusedSend":
                ev = ctx.evaluator(n, src_gid, ctx.ring(src_gid, tag, bw))
                values = yield from ev.run({r: env[r] for r in n.inputs})
                for name, v in values.items():
                    env[f"{n.id}:{name}"] = v
                payload = values[n.body[-1].name]
            else:
                payload = ins[0]
            payload = np.asarray(payload, dtype=DTYPE)
            dst = ctx.group_of(gid).first_rank + pos
            yield SendOp(dst, tag + ("p2p",), payload, payload.size * bw)
        if ctx.in_group(gid):
            src = ctx.group_of(src_gid).first_rank + ctx.pos(gid)
            env[n.id] = yield RecvOp(src, tag + ("p2p",))
    elif kind == "FusedAllReduce":
        lay = chunk_layout(p, [n], ctx.cfg)
        if lay is not None:
            yield from run_chunked(ctx, [n], tag, lay)
            return
        # statements that reduce or change shape run on the whole slice
        ring = ctx.ring(gid, tag, bw)
        reduced = yield from reduce_scatter(ring, ctx.cfg, ins[0], fused_dim(p, n),
                                            n.attrs.get("reducer", "+"))
        ev = ctx.evaluator(n, gid, ctx.ring(gid, tag + ("body",), bw))
        operands = {r: env[r] for r in n.inputs[1:]}
        operands[n.attrs["rs_name"]] = reduced
        values = yield from ev.run(operands)
        ctx.store_body(n, values)
        gather = n.attrs.get("gather", n.body[-1].name)
        env[n.id] = yield from all_gather(ctx.ring(gid, tag + ("ag",), bw), ctx.cfg,
                                          values[gather], dict(n.stmt_info)[gather].layout.dim)
    else:
        raise ValueError(f"cannot execute {kind}")


# Chunk engine ------------------------------------------------------------------------
#
# Values flowing between chain members are either "full" (every block of a
# flat slice-major buffer, for local and replicated tensors) or "own" (only
# this rank's block, for sliced tensors).

CHAIN_KINDS = ("MatMul", "ReduceScatter", "AllGather", "AllReduce", "FusedAllReduce", "Send",
               "FusedSend", "Pointwise")


@dataclass(frozen=True)
class ChunkLayout:
    dim: int
    shape: tuple
    world: int
    cm: ChunkMap


def _member_dim(p: Program, n: OpNode) -> Optional[int]:
    if n.kind == "ReduceScatter":
        return n.info.layout.dim
    if n.kind == "AllGather":
        return p.info(n.inputs[0]).layout.dim
    if n.kind == "FusedAllReduce":
        return fused_dim(p, n)
    if n.kind in ("Send", "FusedSend", "Pointwise"):
        return n.info.layout.dim if n.info.layout.is_sliced else None
    return None


def chunk_layout(p: Program, nodes: list, cfg: CommConfig) -> Optional[ChunkLayout]:
    """Shared chunking of a chain, or None when it cannot run chunk by chunk."""
    if any(n.kind not in CHAIN_KINDS for n in nodes):
        return None
    if any(n.kind == "MatMul" for n in nodes[1:]):
        return None
    if nodes[0].kind == "MatMul" and len(nodes) == 1:
        return None
    shapes = {n.info.shape for n in nodes}
    if len(shapes) != 1:
        return None
    shape = shapes.pop()
    if not shape:
        return None
    sizes = {p.group_map[g].world_size for n in nodes
             for g in ((p.info(n.inputs[0]).group, n.info.group) if n.kind != "MatMul"
                       else (n.info.group,))}
    if len(sizes) != 1:
        return None
    world = sizes.pop()
    dims = {d for d in (_member_dim(p, n) for n in nodes) if d is not None}
    if any(n.kind == "AllReduce" for n in nodes):
        dims.add(0)
    if len(dims) > 1:
        return None
    dim = dims.pop() if dims else 0
    total = int(np.prod(shape))
    if shape[dim] % world:
        return None
    for prev, n in zip(nodes, nodes[1:]):
        if n.inputs[0] != prev.id:
            return None
    if nodes[0].kind == "MatMul" and nodes[0].info.layout.is_sliced:
        return None
    if any(n.kind == "AllReduce" and p.info(n.inputs[0]).layout.kind == "replicated"
           for n in nodes):
        return None
    for n in nodes:
        if n.kind in ("Pointwise", "FusedSend", "FusedAllReduce"):
            sliced = Layout.sliced(dim)
            stmts = dict(n.stmt_info)
            if any(stmts[s.name].shape != shape or stmts[s.name].layout != sliced
                   or ex.has_reduction(s.expr) for s in n.body):
                return None
            extras = n.inputs[1:] if n.kind == "FusedAllReduce" else n.inputs
            if any(p.info(r).layout.kind == "local" for r in extras):
                return None
        if n.kind in ("Send", "AllGather") and not p.info(n.inputs[0]).layout.is_sliced:
            return None
    return ChunkLayout(dim, shape, world, chunk_map(total, world, cfg))


class _Full:
    def __init__(self, buf: BlockBuffer):
        self.buf = buf


class _Own:
    def __init__(self, flat: np.ndarray):
        self.flat = flat


def _input_handle(ctx: RankContext, n: OpNode, lay: ChunkLayout):
    value = np.asarray(ctx.env[n.inputs[0]], dtype=DTYPE)
    info = ctx.p.info(n.inputs[0])
    flat = to_slice_major(value, lay.dim)
    if info.layout.is_sliced:
        return _Own(flat)
    return _Full(BlockBuffer(flat, flat.size // lay.world))


class _Member:
    """One chain member on one rank; ``chunk`` is a generator per chunk."""

    def __init__(self, ctx: RankContext, n: OpNode, lay: ChunkLayout, tag: tuple):
        self.ctx, self.n, self.lay = ctx, n, lay
        self.block = int(np.prod(lay.shape)) // lay.world
        self.bw = n.info.elem.byte_width
        self.gid = n.info.group
        self.src_gid = ctx.p.info(n.inputs[0]).group if n.inputs else self.gid
        self.reducer = n.attrs.get("reducer", "+")
        self.tag = tag
        self.active = ctx.in_group(self.gid) or ctx.in_group(self.src_gid)
        if not self.active:
            return
        body_gid = self.src_gid if n.kind == "FusedSend" else self.gid
        self.ring = ctx.ring(self.gid, tag, self.bw) if ctx.in_group(self.gid) else None
        self.stmt_flat = {}
        if n.kind in ("Pointwise", "FusedSend", "FusedAllReduce") and ctx.in_group(body_gid):
            ev = ctx.evaluator(n, body_gid, ctx.ring(body_gid, tag, self.bw))
            self.ev = ev
            pos = ctx.pos(body_gid)
            sliced = Layout.sliced(lay.dim)
            self.local_shape = local_shape(lay.shape, sliced, lay.world)
            self.gidx = to_slice_major(local_indices(lay.shape, sliced, pos, lay.world), lay.dim)
            # input 0 is the chained value; the rest are read from the environment
            operands = {r: ctx.env[r] for r in n.inputs[1:]}
            self.flat_ops = ev.flat_operands(operands, self.local_shape, lay.dim)
            self.stmt_flat = {s.name: np.empty(self.block, dtype=DTYPE) for s in n.body}
        self.out = None

    def _body_piece(self, c, chained_name: str, piece: np.ndarray) -> dict:
        sl = slice(c.start, c.stop)
        values = self.ev.run_piece(self.flat_ops, sl, self.gidx, {chained_name: piece})
        for name, v in values.items():
            self.stmt_flat[name][sl] = v
        return values

    def prepare(self, inp):
        kind = self.n.kind
        if kind in ("ReduceScatter", "FusedSend", "Pointwise") or \
                (kind == "Send" and self.ctx.in_group(self.gid)):
            self.out = _Own(np.empty(self.block, dtype=DTYPE))
        elif kind in ("AllGather", "AllReduce", "FusedAllReduce"):
            self.out = _Full(BlockBuffer(np.empty(self.block * self.lay.world, dtype=DTYPE),
                                         self.block))
        if kind == "Send" and not self.ctx.in_group(self.gid):
            self.out = None

    def chunk(self, c, inp):
        kind, s, e = self.n.kind, c.start, c.stop
        if kind in ("ReduceScatter", "AllReduce", "FusedAllReduce"):
            own = np.empty(c.size, dtype=DTYPE)

            def keep(_s, _e, v):
                own[:] = v

            yield from self.ring.reduce_scatter_chunk(inp.buf.read, keep, c, self.reducer)
            if kind == "ReduceScatter":
                self.out.flat[s:e] = own
                return
            if kind == "FusedAllReduce":
                values = self._body_piece(c, self.n.attrs["rs_name"], own)
                own = values[self.n.attrs.get("gather", self.n.body[-1].name)]
            yield from self.ring.all_gather_chunk(own, self.out.buf.write, c)
        elif kind == "AllGather":
            yield from self.ring.all_gather_chunk(inp.flat[s:e], self.out.buf.write, c)
        elif kind == "Pointwise":
            values = self._body_piece(c, self.n.inputs[0], inp.flat[s:e])
            self.out.flat[s:e] = values[self.n.body[-1].name]
        elif kind in ("Send", "FusedSend"):
            ctx = self.ctx
            ptag = self.tag + ("p2p", c.chunk_id)
            if ctx.in_group(self.src_gid):
                piece = inp.flat[s:e]
                if kind == "FusedSend":
                    piece = self._body_piece(c, self.n.inputs[0], piece)[self.n.body[-1].name]
                dst = ctx.group_of(self.gid).first_rank + ctx.pos(self.src_gid)
                piece = np.ascontiguousarray(piece, dtype=DTYPE)
                yield SendOp(dst, ptag, piece, piece.size * self.bw)
            if ctx.in_group(self.gid):
                src = ctx.group_of(self.src_gid).first_rank + ctx.pos(self.gid)
                self.out.flat[s:e] = yield RecvOp(src, ptag)

    def finish(self):
        ctx, n, lay = self.ctx, self.n, self.lay
        sliced = Layout.sliced(lay.dim)
        lshape = local_shape(lay.shape, sliced, lay.world)
        if self.stmt_flat and hasattr(self, "ev"):
            for name, flat in self.stmt_flat.items():
                ctx.env[f"{n.id}:{name}"] = from_slice_major(flat, lshape, lay.dim)
        if self.out is None:
            return
        if isinstance(self.out, _Own):
            ctx.env[n.id] = from_slice_major(self.out.flat, lshape, lay.dim)
        else:
            ctx.env[n.id] = from_slice_major(self.out.buf.flat, lay.shape, lay.dim)


class _Producer:
    """A MatMul whose output tiles are computed on demand, chunk by chunk."""

    def __init__(self, ctx: RankContext, n: OpNode, lay: ChunkLayout, record: list):
        self.ctx, self.n, self.lay = ctx, n, lay
        self.active = ctx.in_group(n.info.group)
        if not self.active:
            return
        a, b = (ctx.env[r] for r in n.inputs)
        self.tiles = MatMulTiles(a, b, lay.dim)
        self.block = self.tiles.rows.size // lay.world
        self.out = _Full(BlockBuffer(np.empty(self.tiles.rows.size, dtype=DTYPE), self.block))
        self.pos = ctx.pos(n.info.group)
        self.record = record

    def produce(self, c):
        for b in production_order(self.pos, self.lay.world):
            lo = b * self.block
            self.out.buf.flat[lo + c.start: lo + c.stop] = self.tiles.values(lo + c.start,
                                                                             lo + c.stop)
            self.record.append((c.chunk_id, b))

    def finish(self):
        self.ctx.env[self.n.id] = from_slice_major(self.out.buf.flat, self.tiles.shape, self.lay.dim)


def run_chunked(ctx: RankContext, nodes: list, tag: tuple, lay: ChunkLayout):
    """Run a chain of members chunk by chunk on this rank."""
    record: list = []
    producer = None
    members = []
    for i, n in enumerate(nodes):
        if n.kind == "MatMul":
            producer = _Producer(ctx, n, lay, record)
        else:
            members.append(_Member(ctx, n, lay, tag + (i,)))
    first_input = None
    if producer is None and members[0].active:
        first_input = _input_handle(ctx, members[0].n, lay) \
            if members[0].n.inputs[0] in ctx.env else None
    handles = []
    prev = producer.out if producer is not None and producer.active else first_input
    for m in members:
        if m.active:
            m.prepare(prev)
        handles.append(prev)
        prev = m.out if m.active else None
    for c in lay.cm.chunks:
        if producer is not None and producer.active:
            producer.produce(c)
        for m, inp in zip(members, handles):
            if m.active:
                yield from m.chunk(c, inp)
    if producer is not None and producer.active:
        producer.finish()
        ctx.trace[nodes[0].id] = record
    for m in members:
        if m.active:
            m.finish()


# Execution -------------------------------------------------------------------------


@dataclass
class RunReport:
    program: str
    world: int
    outputs: dict        # ref -> per-rank local arrays of the owning group
    state: dict          # decl -> per-rank final local arrays
    simulated_time: float
    wall_time: float
    comm_bytes: list
    inter_group_bytes: list
    traffic_bytes: list
    kernel_steps: int
    memory_elems: dict   # decl -> elements held per rank
    step_times: list
    production_orders: dict = field(default_factory=dict)  # node -> {rank: [(chunk, block)]}
    deviation: Optional[float] = None
    digest: str = ""

    def global_values(self, p: Program) -> dict:
        """Assembled values keyed like the oracle's (positionally for outputs)."""
        out = {}
        for i, ref in enumerate(p.outputs):
            out[f"out#{i}"] = global_value(self.outputs[ref], p.info(ref).layout)
        for d in p.decls:
            layout = d.layout
            writers = p.writer_map.get(d.name)
            if writers:
                layout = p.info(writers[0]).layout
            out[f"state:{d.name}"] = global_value(self.state[d.name], layout)
        return out

    def to_json(self) -> dict:
        """Deterministic report content; wall time is deliberately excluded."""
        return {
            "program": self.program,
            "world": self.world,
            "digest": self.digest,
            "deviation": self.deviation,
            "simulated_time": round(self.simulated_time, 9),
            "comm_bytes": self.comm_bytes,
            "inter_group_bytes": self.inter_group_bytes,
            "traffic_bytes": self.traffic_bytes,
            "kernel_steps": self.kernel_steps,
            "memory_elems": self.memory_elems,
            "step_times": [round(t, 9) for t in self.step_times],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"


def check_replicated(p: Program, inputs: dict):
    for d in p.decls:
        parts = inputs[d.name]
        world = p.group_map[d.group].world_size
        if len(parts) != world:
            raise ShapeMismatch(f"{d.name}: expected {world} per-rank values, got {len(parts)}")
        want = local_shape(d.shape, d.layout, world)
        for r, x in enumerate(parts):
            if tuple(np.shape(x)) != tuple(want):
                raise ShapeMismatch(f"{d.name} on rank {r}: shape {np.shape(x)} != {want}")
        if d.layout.kind == "replicated":
            first = np.asarray(parts[0])
            for r, x in enumerate(parts[1:], start=1):
                if not np.array_equal(first, np.asarray(x)):
                    raise ReplicationViolation(f"replicated input {d.name!r} differs on rank {r}")


def step_cost(ex_plan: ExecutionPlan, costs: CostModel, step: Step) -> float:
    p, cfg = ex_plan.program, costs.cfg
    if step.kind == "view":
        return 0.0
    nodes = [p.node_map[m] for m in step.nodes]
    if step.kind == "kernel":
        return cfg.lam + costs.node(nodes[0]).busy
    lay = chunk_layout(p, nodes, cfg)
    if lay is None:
        return sum(cfg.lam + costs.node(n).busy for n in nodes)
    pieces = len(lay.cm.chunks) * lay.world
    return cfg.lam + overlap_makespan([(costs.node(n).resource, costs.node(n).busy)
                                       for n in nodes], pieces)


def _rank_program(ctx: RankContext, ex_plan: ExecutionPlan):
    p = ex_plan.program
    for step in ex_plan.steps:
        tag = ("s", step.index)
        try:
            nodes = [p.node_map[m] for m in step.nodes]
            if step.kind == "overlap":
                lay = chunk_layout(p, nodes, ctx.cfg)
                if lay is None:
                    for i, n in enumerate(nodes):
                        yield from run_node(ctx, n, tag + (i,))
                else:
                    yield from run_chunked(ctx, nodes, tag, lay)
            else:
                yield from run_node(ctx, nodes[0], tag)
        except StepError:
            raise
        except (CcschedError, ValueError, KeyError, IndexError, FloatingPointError) as exc:
            raise StepError(step.index, ",".join(step.nodes), exc) from exc
    return ctx


def _check_fused_operands(p: Program):
    for n in p.nodes:
        if n.kind == "FusedAllReduce":
            for r in n.inputs[1:]:
                lay = p.info(r).layout
                if lay.kind == "local":
                    raise OperandLayoutMismatch(f"{n.id}: operand {r!r} is local")
                if lay.is_sliced and lay.dim != fused_dim(p, n):
                    raise OperandLayoutMismatch(f"{n.id}: operand {r!r} sliced along {lay.dim}")


def execute(ex_plan: ExecutionPlan, cfg: CommConfig, inputs: dict, seed: int = 0,
            mode: str = "threads") -> RunReport:
    """Run ``ex_plan`` on per-rank ``inputs`` (decl name -> list over the group's ranks)."""
    p = require_valid(ex_plan.program)
    world = p.world_size
    for g in p.groups:
        cfg.check_world(g.world_size)
    check_replicated(p, inputs)
    _check_fused_operands(p)
    rank_group = tuple(g.group_id for g in p.groups for _ in g.rank_range)
    counters = Counters(world, rank_group)
    contexts = {}
    for r in range(world):
        env = {}
        for d in p.decls:
            g = p.group_map[d.group]
            if r in g.rank_range:
                env[d.name] = np.array(inputs[d.name][r - g.first_rank], dtype=DTYPE)
        contexts[r] = RankContext(p, cfg, r, env, seed)
    start = time.perf_counter()
    gens = {r: _rank_program(contexts[r], ex_plan) for r in range(world)}
    with np.errstate(all="ignore"):
        run(gens, counters, mode)
    wall = time.perf_counter() - start

    outputs = {}
    for ref in p.outputs:
        g = p.group_map[p.info(ref).group]
        outputs[ref] = [contexts[r].env[ref] for r in g.rank_range]
    state = {}
    for d in p.decls:
        g = p.group_map[d.group]
        writers = p.writer_map.get(d.name)
        ref = writers[0] if writers else d.name
        state[d.name] = [contexts[r].env[ref] for r in g.rank_range]

    costs = CostModel(p, cfg)
    step_times = [step_cost(ex_plan, costs, s) for s in ex_plan.steps]
    traffic = [0] * world
    for n in p.nodes:
        if n.kind in VIEW_KINDS:
            continue
        c = costs.node(n)
        gids = {n.info.group} if n.kind not in ("Send", "FusedSend") else \
            {p.info(n.inputs[0]).group}
        for gid in gids:
            for r in p.group_map[gid].rank_range:
                traffic[r] += c.traffic_bytes
    memory = {d.name: info_local_size(p.info(d.name), p.group_map[d.group].world_size)
              for d in p.decls}
    orders = {}
    for r in range(world):
        for nid, rec in contexts[r].trace.items():
            orders.setdefault(nid, {})[r] = rec
    report = RunReport(p.name, world, outputs, state, float(sum(step_times)), wall,
                       list(counters.comm_bytes), list(counters.inter_group_bytes), traffic,
                       ex_plan.kernel_steps, memory, step_times, orders)
    report.digest = digest(report.global_values(p))
    return report
