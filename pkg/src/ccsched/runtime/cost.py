"""Analytic alpha-beta cost model and memory-traffic accounting.

A ring phase over W ranks costs, for every round of its chunk map,
``(W - 1) * (alpha + chunk_bytes / beta)``; channels run in parallel so the
largest chunk of the round sets the pace. Computation costs
``(element ops + elements loaded + elements stored) / gamma``. Each kernel
step adds the launch overhead ``lam``.
"""
from __future__ import annotations

from dataclasses import dataclass

from .. import expr as ex
from ..program import OpNode, Program
from ..tensors import info_local_size
from .chunks import chunk_map
from .config import CommConfig

VIEW_KINDS = ("Slice", "Recv", "OverlapGroup")


@dataclass(frozen=True)
class StepCost:
    busy: float          # time the step occupies its resource, launch overhead excluded
    resource: str
    load_elems: int
    store_elems: int
    byte_width: int

    @property
    def traffic_bytes(self) -> int:
        return (self.load_elems + self.store_elems) * self.byte_width


ZERO = StepCost(0.0, "none", 0, 0, 4)


def ring_phase_time(total: int, world: int, byte_width: int, cfg: CommConfig,
                    alpha_factor: float = 1.0) -> float:
    if world <= 1 or total <= 0:
        return 0.0
    padded = -(-total // world) * world
    cm = chunk_map(padded, world, cfg)
    per_round: dict[int, int] = {}
    for c in cm.chunks:
        per_round[c.round] = max(per_round.get(c.round, 0), c.size)
    alpha = cfg.alpha_eff * alpha_factor
    return sum((world - 1) * (alpha + size * byte_width / cfg.beta_eff)
               for size in per_round.values())


def p2p_time(elems: int, byte_width: int, cfg: CommConfig) -> float:
    return cfg.alpha_eff + elems * byte_width / cfg.beta_eff


def ring_pieces(total: int, world: int, cfg: CommConfig) -> int:
    """Pipeline depth of a chunked ring operation: one piece per chunk and block."""
    if total <= 0:
        return 1
    padded = -(-total // world) * world
    return max(len(chunk_map(padded, world, cfg).chunks) * world, 1)


def scalar_reduce_time(world: int, byte_width: int, cfg: CommConfig) -> float:
    if world <= 1:
        return 0.0
    return (world - 1) * (cfg.alpha_eff + byte_width / cfg.beta_eff)


class CostModel:
    """Per-node costs for one program under one configuration."""

    def __init__(self, p: Program, cfg: CommConfig):
        self.p = p
        self.cfg = cfg
        used = set(p.outputs)
        for n in p.nodes:
            used.update(n.inputs)
        self.external_refs = used

    def world_of(self, group: int) -> int:
        return self.p.group_map[group].world_size

    def local(self, ref: str) -> int:
        info = self.p.info(ref)
        return info_local_size(info, self.world_of(info.group))

    def _narrowed_local(self, n: OpNode, ref: str, stmt_layouts) -> int:
        """Elements of ``ref`` a rank actually reads inside a sliced body."""
        info = self.p.info(ref)
        size = self.local(ref)
        if info.layout.kind != "replicated" or not info.shape:
            return size
        for shape, layout in stmt_layouts:
            if layout.is_sliced:
                axis = layout.dim - (len(shape) - len(info.shape))
                if 0 <= axis < len(info.shape) and info.shape[axis] == shape[layout.dim]:
                    return size // self.world_of(info.group)
        return size

    def _body(self, n: OpNode, skip_input: bool) -> tuple:
        """(element ops, loads, stores, scalar reductions) of a statement body."""
        stmts = dict(n.stmt_info)
        world = self.world_of(stmts[n.body[0].name].group)
        ops = 0
        reductions = 0
        for s in n.body:
            info = stmts[s.name]
            ops += ex.op_count(s.expr) * info_local_size(info, world)
            reductions += sum(1 for c in ex.walk(s.expr)
                              if isinstance(c, ex.Call) and c.fn in ex.REDUCTION_FUNCS)
        layouts = [(stmts[s.name].shape, stmts[s.name].layout) for s in n.body]
        ins = list(dict.fromkeys(n.inputs[1:] if skip_input else n.inputs))
        loads = sum(self._narrowed_local(n, r, layouts) for r in ins)
        stores = 0
        primary = n.attrs.get("gather") if n.kind == "FusedAllReduce" else n.body[-1].name
        for s in n.body:
            visible = (s.target or f"{n.id}:{s.name}" in self.external_refs
                       or (s.name == primary and n.kind != "FusedAllReduce"))
            if visible and not (n.kind == "FusedAllReduce" and s.name == primary):
                stores += info_local_size(stmts[s.name], world)
        return ops, loads, stores, reductions

    def node(self, n: OpNode) -> StepCost:
        cfg = self.cfg
        if n.kind in VIEW_KINDS:
            return ZERO
        bw = n.info.elem.byte_width
        group = n.info.group
        world = self.world_of(group)
        net = f"net{group}"
        if n.kind == "MatMul":
            a, b = n.inputs
            k = self.p.info(a).shape[-1]
            if self.p.info(a).layout.is_sliced and self.p.info(b).layout.is_sliced:
                k //= world
            out = self.local(n.id)
            loads, stores = self.local(a) + self.local(b), out
            return StepCost((2 * k * out + loads + stores) / cfg.gamma, "compute",
                            loads, stores, bw)
        if n.kind == "Pointwise":
            ops, loads, stores, red = self._body(n, skip_input=False)
            return StepCost((ops + loads + stores) / cfg.gamma
                            + red * scalar_reduce_time(world, bw, cfg), "compute", loads, stores, bw)
        src = self.p.info(n.inputs[0])
        src_group = src.group
        src_world = self.world_of(src_group)
        n_in = self.local(n.inputs[0])
        if n.kind == "Send":
            return StepCost(p2p_time(n_in, bw, cfg), f"p2p{src_group}", n_in, n_in, bw)
        if n.kind == "FusedSend":
            # the body runs on each piece just before it is sent
            ops, loads, stores, red = self._body(n, skip_input=False)
            out = self.local(n.id)
            busy = overlap_makespan([("inline", (ops + loads + stores) / cfg.gamma),
                                     ("p2p", p2p_time(out, bw, cfg))], ring_pieces(out, 1, cfg))
            busy += red * scalar_reduce_time(src_world, bw, cfg)
            return StepCost(busy, f"p2p{src_group}", loads, stores, bw)
        if n.kind == "FusedAllReduce":
            # the body runs on each chunk between its reduce-scatter and all-gather
            ops, loads, stores, red = self._body(n, skip_input=True)
            phase = ring_phase_time(n_in, world, bw, cfg, cfg.fused_alpha_factor)
            busy = overlap_makespan([(net, phase), ("inline", (ops + loads + stores) / cfg.gamma),
                                     (net, phase)], ring_pieces(n_in, world, cfg))
            busy += red * scalar_reduce_time(world, bw, cfg)
            gathered = self.local(n.id)
            return StepCost(busy, net, n_in + loads, gathered + stores, bw)
        if n.kind in ("AllReduce", "Broadcast") and src.layout.kind == "replicated":
            return StepCost(0.0, net, 0, 0, bw)
        if n.kind == "AllReduce":
            return StepCost(2 * ring_phase_time(n_in, world, bw, cfg), net, n_in, n_in, bw)
        if n.kind == "ReduceScatter":
            return StepCost(ring_phase_time(n_in, world, bw, cfg), net, n_in, self.local(n.id), bw)
        if n.kind == "AllGather":
            out = self.local(n.id)
            return StepCost(ring_phase_time(out, world, bw, cfg), net, n_in, out, bw)
        if n.kind == "Reduce":
            block = -(-n_in // world)
            gather = (world - 1) * p2p_time(block, bw, cfg) if world > 1 else 0.0
            return StepCost(ring_phase_time(n_in, world, bw, cfg) + gather, net, n_in, n_in, bw)
        if n.kind == "Broadcast":
            chunks = chunk_map(n_in, 1, cfg).chunks
            biggest = max((c.size for c in chunks), default=0)
            hops = len(chunks) + world - 2 if world > 1 else 0
            return StepCost(hops * p2p_time(biggest, bw, cfg), net, n_in, n_in, bw)
        raise ValueError(f"no cost rule for {n.kind}")


def overlap_makespan(members: list, pieces: int) -> float:
    """Chunk-major list schedule of a producer-consumer chain.

    ``members`` is a list of (resource, busy time). Each member is cut into
    ``pieces`` equal pieces; piece j of a member starts once piece j of the
    previous member is done and its resource is free.
    """
    pieces = max(int(pieces), 1)
    free: dict[str, float] = {}
    makespan = 0.0
    for _ in range(pieces):
        ready = 0.0
        for resource, busy in members:
            start = max(ready, free.get(resource, 0.0))
            ready = start + busy / pieces
            free[resource] = ready
        makespan = max(makespan, ready)
    return makespan
