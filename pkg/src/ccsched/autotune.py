"""Breadth-first schedule search and cost-based selection.

The search starts from a pre-pass that fuses connected element-wise
computations, then applies every applicable directive (or directive macro)
level by level. Programs reached twice up to isomorphism are explored once,
and the depth is bounded by the number of communication nodes plus three.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import (CandidateFailed, CcschedError, DependencyViolation, ProgramError,
                     ScheduleError, TransformError)
from .oracle import compare, oracle_execute
from .program import COMM_KINDS, Program, program_from_json, ref_node, topo_order
from .runtime.config import CommConfig
from .runtime.executor import chunk_layout, execute, plan
from .tensors import make_inputs, rebase_inputs
from .transforms import (Directive, Schedule, apply_directive, apply_schedule, check_fusable,
                         canonical_form)

METRICS = ("simulated_clock", "wall_clock")
EXTRA_DEPTH = 3


@dataclass(frozen=True)
class TuneConfig:
    fusion_threshold: int = 16
    world_sizes: tuple = (4,)
    tensor_sizes: tuple = ({"N": 4096},)   # each entry binds symbolic extents
    metric: str = "simulated_clock"
    seed: int = 0
    comm: CommConfig = field(default_factory=CommConfig)
    tol: float = 1e-5
    mode: str = "roundrobin"

    def __post_init__(self):
        if self.fusion_threshold < 1:
            raise ValueError("fusion_threshold must be at least 1")
        if not self.world_sizes or any(w < 1 for w in self.world_sizes):
            raise ValueError("world sizes must be positive")
        for s in self.tensor_sizes:
            if any(int(v) < 1 for v in s.values()):
                raise ValueError("tensor sizes must be positive")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")


@dataclass
class Candidate:
    schedule: Schedule
    family: str
    simulated_time: float = 0.0
    wall_time: float = 0.0
    comm_bytes: list = field(default_factory=list)
    kernel_steps: int = 0
    deviation: float = 0.0

    def metric(self, name: str) -> float:
        return self.simulated_time if name == "simulated_clock" else self.wall_time

    def to_json(self, include_wall: bool) -> dict:
        out = {
            "schedule": self.schedule.to_json(),
            "family": self.family,
            "simulated_time": round(self.simulated_time, 9),
            "comm_bytes": self.comm_bytes,
            "kernel_steps": self.kernel_steps,
            "deviation": self.deviation,
        }
        if include_wall:
            out["wall_time"] = self.wall_time
        return out


@dataclass
class TuneReport:
    candidates: list
    winner: int
    metric: str

    def to_json(self) -> dict:
        wall = self.metric == "wall_clock"
        return {"metric": self.metric, "winner": self.winner,
                "candidates": [c.to_json(wall) for c in self.candidates]}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"


# Enumeration -----------------------------------------------------------------------------


def fusion_prepass(p: Program, threshold: int) -> list:
    """Directives fusing connected computations, at most ``threshold`` nodes each."""
    comps = [nid for nid in topo_order(p) if p.node_map[nid].kind == "Pointwise"]
    comp_set = set(comps)
    neighbours = {c: set() for c in comps}
    for c in comps:
        for ref in p.node_map[c].inputs:
            src = ref_node(ref)
            if src in comp_set:
                neighbours[c].add(src)
                neighbours[src].add(c)
    rank = {c: i for i, c in enumerate(comps)}
    done: set = set()
    directives = []
    current = p
    for seed in comps:
        if seed in done:
            continue
        part = [seed]
        rejected: set = set()
        while len(part) < threshold:
            frontier = sorted({n for x in part for n in neighbours[x]}
                              - done - set(part) - rejected, key=rank.get)
            for cand in frontier:
                try:
                    check_fusable(current, part + [cand])
                except DependencyViolation:
                    rejected.add(cand)
                    continue
                part.append(cand)
                break
            else:
                break
        done |= set(part)
        if len(part) > 1:
            part.sort(key=rank.get)
            d = Directive("fuse_computation", {"ids": part})
            current, _ = apply_directive(current, d)
            directives.append(d)
    return directives


def _chains(p: Program, start: str) -> list:
    """Producer-consumer chains starting at ``start`` along primary inputs."""
    out = []
    chain = [start]
    while True:
        users = [c for c in p.consumers(chain[-1])
                 if p.node_map[c].inputs and p.node_map[c].inputs[0] == chain[-1]]
        if len(users) != 1:
            break
        chain.append(users[0])
        out.append(list(chain))
    return out


def candidate_moves(p: Program, cfg: CommConfig) -> list:
    """Directive sequences that may apply to ``p``, in a fixed order."""
    moves = []
    order = topo_order(p)
    grouped = {m for g in p.overlap_groups for m in g.attrs["members"]}
    for nid in order:
        n = p.node_map[nid]
        if n.kind == "AllReduce" and p.info(n.inputs[0]).layout.kind == "local":
            moves.append([Directive("split_ar_rs_ag", {"target": nid})])
        if n.kind in ("AllGather", "Broadcast"):
            kind, key = ("reorder_allgather", "ag") if n.kind == "AllGather" else \
                ("reorder_broadcast", "bc")
            comps: list = []
            frontier = nid
            while True:
                users = [c for c in p.consumers(frontier) if p.node_map[c].kind == "Pointwise"]
                if len(users) != 1:
                    break
                comps.append(users[0])
                frontier = users[0]
                moves.append([Directive(kind, {key: nid, "comps": list(comps)})])
        if n.kind == "ReduceScatter":
            for c in p.consumers(nid):
                cn = p.node_map[c]
                if cn.kind == "Pointwise" and cn.info.layout.is_sliced:
                    for ag in p.consumers(c):
                        if p.node_map[ag].kind == "AllGather":
                            moves.append([Directive("fuse_allreduce",
                                                    {"rs": nid, "comps": [c], "ag": ag})])
        if n.kind == "Send" and p.node_map.get(ref_node(n.inputs[0]), None) is not None:
            src = p.node_map[ref_node(n.inputs[0])]
            if src.kind == "Pointwise":
                moves.append([Directive("fuse_send", {"comp": src.id, "send": nid})])
    for nid in order:
        if nid in grouped:
            continue
        for chain in _chains(p, nid):
            if any(c in grouped for c in chain):
                break
            nodes = [p.node_map[c] for c in chain]
            if not any(x.kind in COMM_KINDS for x in nodes):
                continue
            if chunk_layout(p, nodes, cfg) is not None:
                moves.append([Directive("overlap", {"ids": chain})])
    # store sliced every tensor whose uses are all slice views, then drop the dead gathers
    sliceable = []
    for d in p.decls:
        readers = p.consumers(d.name)
        if d.layout.kind == "replicated" and d.shape and readers and \
                all(p.node_map[r].kind == "Slice" for r in readers):
            sliceable.append(d.name)
    if sliceable:
        moves.append([Directive("as_slice", {"tensor": t}) for t in sliceable])
    return moves


def _apply_macro(p: Program, directives: list):
    applied = []
    for d in directives:
        p, _ = apply_directive(p, d)
        applied.append(d)
    if directives and directives[0].kind == "as_slice":
        while True:
            dead_ids = [n.id for n in p.nodes if n.kind == "AllGather" and not p.consumers(n.id)
                        and n.id not in p.outputs and not n.writes()
                        and p.group_of_member(n.id) is None]
            if not dead_ids:
                break
            d = Directive("dead", {"id": dead_ids[0]})
            p, _ = apply_directive(p, d)
            applied.append(d)
    return p, applied


def depth_bound(p: Program) -> int:
    return sum(1 for n in p.nodes if n.kind in COMM_KINDS) + EXTRA_DEPTH


def enumerate_schedules(p: Program, cfg: Optional[TuneConfig] = None) -> list:
    """Deterministic, duplicate-free schedules in breadth-first order."""
    cfg = cfg or TuneConfig()
    pre = fusion_prepass(p, cfg.fusion_threshold)
    start = apply_schedule(p, Schedule(tuple(pre)))
    bound = depth_bound(p)
    seen = {canonical_form(start)}
    out = [Schedule(tuple(pre))]
    queue = deque([(start, list(pre), 0)])
    while queue:
        prog, dirs, depth = queue.popleft()
        if depth >= bound:
            continue
        for move in candidate_moves(prog, cfg.comm):
            try:
                nxt, applied = _apply_macro(prog, move)
            except (TransformError, ProgramError):
                continue
            key = canonical_form(nxt)
            if key in seen:
                continue
            seen.add(key)
            sched = dirs + applied
            out.append(Schedule(tuple(sched)))
            queue.append((nxt, sched, depth + 1))
    return out


# Families and evaluation ------------------------------------------------------------------

_ABBREV = {"AllReduce": "AR", "ReduceScatter": "RS", "AllGather": "AG", "Pointwise": "C",
           "MatMul": "MM", "FusedAllReduce": "fuse(RS-C-AG)", "Send": "Send",
           "FusedSend": "fuse(C-Send)", "Reduce": "Reduce", "Broadcast": "BC"}


def family(p: Program) -> str:
    """Short description of the executed steps, e.g. ``MM-RS-C-AG``."""
    parts = []
    for step in plan(p).steps:
        if step.kind == "view":
            continue
        names = [_ABBREV.get(p.node_map[m].kind, p.node_map[m].kind) for m in step.nodes]
        parts.append(f"ol({','.join(names)})" if step.kind == "overlap" else names[0])
    return "-".join(parts)


def instances(source: Union[dict, Program], cfg: TuneConfig) -> list:
    """Sized programs for every configured (world size, tensor sizes) pair."""
    if isinstance(source, Program):
        return [source]
    out = []
    for w in cfg.world_sizes:
        for sizes in cfg.tensor_sizes:
            out.append(program_from_json(source, dict(sizes, W=w)))
    return out


def evaluate_candidate(bases: list, schedule: Schedule, cfg: TuneConfig) -> Candidate:
    """Run a schedule on every instance and check it against the oracle."""
    cand = Candidate(schedule, "")
    for i, base in enumerate(bases):
        prog = apply_schedule(base, schedule)
        if i == 0:
            cand.family = family(prog)
        inputs = make_inputs(base, cfg.seed)
        want = oracle_execute(base, inputs, cfg.seed).values()
        want = {(f"out#{base.outputs.index(k[4:])}" if k.startswith("out:") else k): v
                for k, v in want.items()}
        report = execute(plan(prog), cfg.comm, rebase_inputs(base, prog, inputs), cfg.seed,
                         cfg.mode)
        dev, ok = compare(want, report.global_values(prog), cfg.tol)
        if not ok:
            raise CandidateFailed(schedule.to_json(), f"deviation {dev:.3e} exceeds {cfg.tol}")
        cand.simulated_time += report.simulated_time
        cand.wall_time += report.wall_time
        cand.kernel_steps = max(cand.kernel_steps, report.kernel_steps)
        cand.deviation = max(cand.deviation, dev)
        if i == 0:
            cand.comm_bytes = report.comm_bytes
    return cand


def rank_key(c: Candidate, metric: str) -> tuple:
    return (c.metric(metric), c.kernel_steps, c.schedule.key())


def tune(source: Union[dict, Program], cfg: Optional[TuneConfig] = None) -> TuneReport:
    """Evaluate every enumerated schedule and pick the cheapest."""
    cfg = cfg or TuneConfig()
    bases = instances(source, cfg)
    candidates = []
    for schedule in enumerate_schedules(bases[0], cfg):
        try:
            candidates.append(evaluate_candidate(bases, schedule, cfg))
        except CandidateFailed:
            raise
        except ScheduleError:
            # not applicable at some configured size (e.g. divisibility); not a candidate
            continue
        except CcschedError as exc:
            raise CandidateFailed(schedule.to_json(), f"{exc.code}: {exc}") from exc
    winner = min(range(len(candidates)), key=lambda i: rank_key(candidates[i], cfg.metric))
    return TuneReport(candidates, winner, cfg.metric)
