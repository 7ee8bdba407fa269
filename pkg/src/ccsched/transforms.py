"""Semantics-preserving rewrites of distributed programs.

Every rewrite takes a valid program and returns a new valid program or raises
a ``TransformError``. New nodes get fresh ids, optionally chosen by the
caller through ``names``, and the program's provenance records which old
nodes each new node came from.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from . import expr as ex
from .errors import (ChainBroken, ConsumerNotSliced, DependencyViolation, NotAConsumer,
                     NotAllReduce, NotComputation, NotConsumer, NotProducerConsumerChain,
                     NotSliceable, ProgramError, ResultInvalid, ScheduleError, StillLive,
                     TransformError, UnknownNode)
from .program import (COMPUTE, Layout, OpNode, Program, Stmt, ancestors, check_chain,
                      errors_only, ref_node, topo_order, validate_program)


# Editing support -----------------------------------------------------------------

class _Edit:
    """Mutable working copy of a program used while a rewrite is assembled."""

    def __init__(self, p: Program, names: Optional[Sequence[str]] = None):
        self.p = p
        self.nodes: list[OpNode] = list(p.nodes)
        self.outputs = list(p.outputs)
        self.decls = list(p.decls)
        self.provenance = dict(p.provenance)
        self.requested = list(names or [])
        self.taken = set(p.decl_map) | {n.id for n in p.nodes}
        for n in p.nodes:
            self.taken.update(s.name for s in n.body)
            if "rs_name" in n.attrs:
                self.taken.add(n.attrs["rs_name"])

    def fresh(self, base: str, named: bool = True) -> str:
        """A new unique id; caller-requested names are used in creation order."""
        if named and self.requested:
            name = self.requested.pop(0)
            if name in self.taken:
                raise TransformError(f"requested name {name!r} is already in use")
            self.taken.add(name)
            return name
        name, k = base, 2
        while name in self.taken:
            name = f"{base}_{k}"
            k += 1
        self.taken.add(name)
        return name

    def index(self, nid: str) -> int:
        for i, n in enumerate(self.nodes):
            if n.id == nid:
                return i
        raise UnknownNode(nid)

    def remove(self, *ids: str):
        drop = set(ids)
        self.nodes = [n for n in self.nodes if n.id not in drop]

    def insert_at(self, position: int, *new: OpNode):
        self.nodes[position:position] = list(new)

    def rewire(self, mapping: dict, skip: Sequence[str] = ()):
        """Point every reader of a key in ``mapping`` at its new reference."""
        if not mapping:
            return
        skip = set(skip)
        out = []
        for n in self.nodes:
            if n.id in skip or not any(r in mapping for r in n.inputs):
                out.append(n)
                continue
            local = {r: mapping[r] for r in n.inputs if r in mapping}
            inputs = []
            for r in n.inputs:
                r2 = local.get(r, r)
                if r2 not in inputs:
                    inputs.append(r2)
            attrs = dict(n.attrs)
            if n.body:
                attrs["body"] = tuple(replace(s, expr=ex.substitute(s.expr, local)) for s in n.body)
            out.append(replace(n, inputs=tuple(inputs), attrs=attrs))
        self.nodes = out
        self.outputs = [mapping.get(o, o) for o in self.outputs]

    def note(self, new_id: str, *old: str):
        origin = []
        for o in old:
            origin.extend(self.provenance.get(o, (o,)))
        self.provenance[new_id] = tuple(dict.fromkeys(origin))

    def build(self) -> Program:
        p = self.p.with_nodes(self.nodes, outputs=self.outputs, decls=self.decls)
        rank = {nid: i for i, nid in enumerate(topo_order(p))}
        ordered = sorted(self.nodes, key=lambda n: rank.get(n.id, len(rank)))
        p = self.p.with_nodes(ordered, outputs=self.outputs, decls=self.decls,
                              provenance=tuple(sorted(self.provenance.items())))
        bad = errors_only(validate_program(p))
        if bad:
            raise ResultInvalid("; ".join(str(d) for d in bad))
        return p


def _node(p: Program, nid: str) -> OpNode:
    n = p.node_map.get(nid)
    if n is None:
        raise UnknownNode(f"no node {nid!r}")
    return n


def _not_grouped(p: Program, *ids: str):
    for nid in ids:
        g = p.group_of_member(nid)
        if g is not None:
            raise DependencyViolation(f"{nid!r} is already part of overlap group {g!r}")


def _refs_to(p: Program, nid: str) -> list:
    """All (consumer id, ref) pairs reading any output of ``nid``."""
    out = []
    for n in p.nodes:
        for r in n.inputs:
            if ref_node(r) == nid:
                out.append((n.id, r))
    return out


def _primary_stmt(n: OpNode) -> str:
    if n.kind == "FusedAllReduce":
        return n.attrs.get("gather", n.body[-1].name)
    return n.body[-1].name


# Split ----------------------------------------------------------------------------

def split_allreduce(p: Program, ar: str, names=None, dim: Optional[int] = None):
    """Replace an AllReduce by a ReduceScatter followed by an AllGather."""
    node = _node(p, ar)
    if node.kind != "AllReduce":
        raise NotAllReduce(f"{ar!r} is a {node.kind}, not an AllReduce")
    _not_grouped(p, ar)
    e = _Edit(p, names)
    rs_id, ag_id = e.fresh(f"rs_{ar}"), e.fresh(f"ag_{ar}")
    rs_attrs = {"reducer": node.attrs.get("reducer", "+")}
    if dim is not None:
        rs_attrs["dim"] = int(dim)
    ag_attrs = {"target": node.attrs["target"]} if node.attrs.get("target") else {}
    pos = e.index(ar)
    e.remove(ar)
    e.insert_at(pos, OpNode(rs_id, "ReduceScatter", node.inputs, rs_attrs),
                OpNode(ag_id, "AllGather", (rs_id,), ag_attrs))
    e.rewire({ar: ag_id})
    e.note(rs_id, ar)
    e.note(ag_id, ar)
    return e.build(), rs_id, ag_id


# Reorder ------------------------------------------------------------------------------

_REORDERABLE = {"allgather": (COMPUTE, "MatMul", "Send", "FusedSend"),
                "broadcast": (COMPUTE, "MatMul")}


def reorder_allgather(p: Program, ag: str, comps: Sequence[str], names=None):
    """Move computations that consume an AllGather before it.

    Returns (program, new computation ids, new AllGather ids); the first
    AllGather gathers the final computation's result.
    """
    return _reorder(p, ag, list(comps), names, "allgather")


def reorder_broadcast(p: Program, bc: str, comps: Sequence[str], names=None):
    """Move computations that consume a Broadcast onto the root's data."""
    return _reorder(p, bc, list(comps), names, "broadcast")


def _reorder(p: Program, coll: str, comps: list, names, mode: str):
    node = _node(p, coll)
    want = "AllGather" if mode == "allgather" else "Broadcast"
    if node.kind != want:
        raise NotAConsumer(f"{coll!r} is a {node.kind}, not an {want}")
    _not_grouped(p, coll, *comps)
    if len(set(comps)) != len(comps):
        raise NotAConsumer("computation list repeats a node")
    src = node.inputs[0]
    src_info = p.info(src)
    e = _Edit(p, names)

    if not comps:
        new_id = e.fresh(f"{coll}_moved")
        pos = e.index(coll)
        e.remove(coll)
        e.insert_at(pos, replace(node, id=new_id))
        e.rewire({coll: new_id})
        e.note(new_id, coll)
        return e.build(), [], [new_id]

    comp_nodes = []
    for c in comps:
        cn = p.node_map.get(c)
        if cn is None:
            raise UnknownNode(f"no node {c!r}")
        if cn.kind not in _REORDERABLE[mode]:
            raise NotSliceable(f"{c!r} ({cn.kind}) cannot move across the {want}")
        comp_nodes.append(cn)

    # chain values: old ref -> new ref
    chain: dict[str, str] = {coll: src}
    slice_views: dict[tuple, str] = {}
    new_nodes: list[OpNode] = []
    moved_targets: list[tuple] = []  # (new ref, target decl)
    comp_map: dict[str, str] = {}
    axis = src_info.layout.dim if mode == "allgather" else None

    for cn in comp_nodes:
        chain_inputs = [r for r in cn.inputs if r in chain]
        if not chain_inputs:
            raise NotAConsumer(f"{cn.id!r} does not consume {coll!r} or an earlier computation")
        if cn.kind == COMPUTE and any(ex.has_reduction(s.expr) for s in cn.body):
            if mode == "allgather":
                raise NotSliceable(f"{cn.id!r} reduces over the gathered axis")
        if cn.kind == "MatMul":
            if cn.inputs[0] not in chain or cn.inputs[1] in chain:
                raise NotSliceable(f"{cn.id!r} must take the moved value as its left operand")
            if mode == "allgather":
                lhs = p.info(cn.inputs[0])
                if axis >= len(lhs.shape) - 1:
                    raise NotSliceable(f"{cn.id!r} contracts the gathered axis")
        mapping = {}
        for r in cn.inputs:
            if r in chain:
                mapping[r] = chain[r]
                continue
            info = p.info(r)
            if info.layout.kind != "replicated":
                raise NotSliceable(f"operand {r!r} of {cn.id!r} is {info.layout}, not replicated")
            if mode == "allgather" and cn.kind != "MatMul" and info.shape \
                    and len(info.shape) == len(src_info.shape) \
                    and info.shape[axis] == src_info.shape[axis] and info.shape[axis] > 1:
                key = (r, axis)
                if key not in slice_views:
                    vid = e.fresh(f"slice_{r.replace(':', '_')}", named=False)
                    slice_views[key] = vid
                    new_nodes.append(OpNode(vid, "Slice", (r,), {"dim": axis}))
                    e.note(vid, r)
                mapping[r] = slice_views[key]
        new_id = e.fresh(f"sc_{cn.id}")
        comp_map[cn.id] = new_id
        attrs = dict(cn.attrs)
        if cn.body:
            body = []
            for s in cn.body:
                stmt = replace(s, expr=ex.substitute(s.expr, mapping), target=None)
                if s.target:
                    moved_targets.append(((new_id, s.name), s.target))
                body.append(stmt)
            attrs["body"] = tuple(body)
        if attrs.get("target"):
            moved_targets.append(((new_id, None), attrs.pop("target")))
        inputs = []
        for r in cn.inputs:
            r2 = mapping.get(r, r)
            if r2 not in inputs:
                inputs.append(r2)
        new_nodes.append(replace(cn, id=new_id, inputs=tuple(inputs), attrs=attrs))
        e.note(new_id, cn.id)
        chain[cn.id] = new_id
        for s in cn.body:
            chain[f"{cn.id}:{s.name}"] = f"{new_id}:{s.name}"

    # Values visible outside the moved computations need a collective again.
    comp_set = set(comps)
    external: list[str] = []  # old refs in first-visible order
    last = comp_nodes[-1]
    external.append(last.id)
    for cn in comp_nodes:
        refs = [cn.id] + [f"{cn.id}:{s.name}" for s in cn.body]
        for r in refs:
            if r in external:
                continue
            used_outside = r in p.outputs or any(
                r in n.inputs for n in p.nodes if n.id not in comp_set)
            if used_outside:
                external.append(r)

    pos = min(e.index(c) for c in comps)
    e.remove(*comps)
    e.insert_at(pos, *new_nodes)
    # infer the moved nodes to learn which outputs are still sliced
    probe = p.with_nodes([n for n in e.nodes], outputs=[o for o in p.outputs
                                                        if ref_node(o) not in comp_set])
    target_of = {}
    for (nid, stmt), decl in moved_targets:
        key = f"{nid}:{stmt}" if stmt is not None else nid
        new_node = probe.node_map[nid]
        if stmt is not None and new_node.kind == COMPUTE and stmt == new_node.body[-1].name:
            key = nid
        target_of[key] = decl

    collectives = []
    mapping = {}
    new_targets_by_ref = {}
    for old in external:
        collectives.append((old, _normalise_ref(probe, chain[old])))
    for key in target_of:
        key = _normalise_ref(probe, key)
        if not any(nr == key for _, nr in collectives):
            collectives.append((None, key))
    ag_ids = []
    final_nodes = []
    for old, new_ref in collectives:
        info = probe.info(new_ref)
        decl = target_of.get(new_ref)
        if info is None:
            raise NotSliceable(f"cannot infer the moved value {new_ref!r}")
        needs = info.layout.is_sliced if mode == "allgather" else info.layout.kind == "local"
        if not needs:
            # already replicated (e.g. a scalar statement): consumers read it directly
            if old is not None:
                mapping[old] = new_ref
            if decl:
                new_targets_by_ref[new_ref] = decl
            continue
        base = new_ref.split(":")[-1]
        cid = e.fresh(f"{'ag' if mode == 'allgather' else 'bc'}_{base}")
        attrs = {"target": decl} if decl else {}
        if mode == "broadcast":
            attrs["root"] = node.attrs.get("root", 0)
        final_nodes.append(OpNode(cid, want, (new_ref,), attrs))
        e.note(cid, coll, *([ref_node(old)] if old else []))
        ag_ids.append(cid)
        if old is not None:
            mapping[old] = cid
    # targets that stay on replicated statements
    if new_targets_by_ref:
        e.nodes = [_set_target(n, new_targets_by_ref) for n in e.nodes]
    e.insert_at(pos + len(new_nodes), *final_nodes)
    e.rewire(mapping)
    # drop the old collective when nothing reads it any more
    still_used = coll in e.outputs or any(
        ref_node(r) == coll for n in e.nodes for r in n.inputs)
    if not still_used and not node.attrs.get("target"):
        e.remove(coll)
    return e.build(), [comp_map[c] for c in comps], ag_ids


def _normalise_ref(p: Program, ref: str) -> str:
    """Prefer ``node`` over ``node:last`` for a computation's primary output."""
    nid, _, stmt = ref.partition(":")
    n = p.node_map.get(nid)
    if stmt and n is not None and n.kind == COMPUTE and n.body and n.body[-1].name == stmt:
        return nid
    return ref


def _set_target(n: OpNode, targets: dict) -> OpNode:
    """Attach update targets given as refs to the producing statements of ``n``."""
    hits = {r: d for r, d in targets.items() if ref_node(r) == n.id}
    if not hits:
        return n
    attrs = dict(n.attrs)
    for ref, decl in hits.items():
        _, _, stmt = ref.partition(":")
        if n.body and (stmt or n.kind == COMPUTE):
            name = stmt or n.body[-1].name
            attrs["body"] = tuple(replace(s, target=decl) if s.name == name else s
                                  for s in attrs["body"])
        else:
            attrs["target"] = decl
    return replace(n, attrs=attrs)


# Fusion ----------------------------------------------------------------------------------

def _merge_bodies(p: Program, members: list[OpNode]):
    """Concatenate member bodies; returns (stmts, inputs, ref map old->stmt name)."""
    member_ids = {m.id for m in members}
    ref_to_stmt: dict[str, str] = {}
    names: set[str] = set()
    stmts: list[Stmt] = []
    inputs: list[str] = []
    for m in members:
        local = {}
        for r in m.inputs:
            if ref_node(r) in member_ids:
                local[r] = ref_to_stmt[r]
            elif r not in inputs:
                inputs.append(r)
        for s in m.body:
            if s.name in names:
                raise DependencyViolation(f"statement name {s.name!r} occurs twice")
            names.add(s.name)
            stmts.append(replace(s, expr=ex.substitute(s.expr, local)))
            ref_to_stmt[f"{m.id}:{s.name}"] = s.name
        ref_to_stmt[m.id] = m.body[-1].name
    return stmts, inputs, ref_to_stmt


def check_fusable(p: Program, ids: list[str]):
    members = set(ids)
    # connectivity through direct edges
    adj: dict[str, set] = {i: set() for i in ids}
    for i in ids:
        for r in p.node_map[i].inputs:
            j = ref_node(r)
            if j in members:
                adj[i].add(j)
                adj[j].add(i)
    seen, stack = set(), [ids[0]]
    while stack:
        x = stack.pop()
        if x not in seen:
            seen.add(x)
            stack.extend(adj[x] - seen)
    if seen != members:
        raise DependencyViolation(f"nodes {sorted(members - seen)} are not connected to the rest")
    # an excluded node between two members would form a cycle after fusion
    outside_inputs = [r for i in ids for r in p.node_map[i].inputs if ref_node(r) not in members]
    between = ancestors(p, outside_inputs) - members
    for b in between:
        bn = p.node_map[b]
        if any(ref_node(r) in members for r in bn.inputs) or \
                ancestors(p, bn.inputs) & members:
            raise DependencyViolation(
                f"{b!r} reads a fused intermediate and feeds the fused group")


def fuse_computation(p: Program, ids: Sequence[str], names=None):
    """Fuse a connected set of computations into one node."""
    ids = list(ids)
    if not ids:
        raise NotComputation("nothing to fuse")
    for i in ids:
        n = p.node_map.get(i)
        if n is None:
            raise UnknownNode(f"no node {i!r}")
        if n.kind != COMPUTE:
            raise NotComputation(f"{i!r} is a {n.kind}, not a computation")
    if len(set(ids)) != len(ids):
        raise DependencyViolation("fusion list repeats a node")
    _not_grouped(p, *ids)
    if len(ids) == 1:
        return p, ids[0]
    check_fusable(p, ids)
    order = [nid for nid in topo_order(p) if nid in set(ids)]
    members = [p.node_map[i] for i in order]
    stmts, inputs, ref_to_stmt = _merge_bodies(p, members)
    e = _Edit(p, names)
    fid = e.fresh("fused")
    last_stmt = stmts[-1].name
    attrs = {"op": COMPUTE, "body": tuple(stmts)}
    pos = min(e.index(i) for i in ids)
    e.remove(*ids)
    e.insert_at(pos, OpNode(fid, COMPUTE, tuple(inputs), attrs))
    mapping = {old: (fid if s == last_stmt else f"{fid}:{s}") for old, s in ref_to_stmt.items()}
    e.rewire(mapping, skip=[fid])
    e.note(fid, *order)
    return e.build(), fid


def fuse_allreduce(p: Program, rs: str, comps: Sequence[str], ag: str, names=None):
    """Fuse ReduceScatter -> sliced computations -> AllGather into one collective."""
    comps = list(comps)
    rs_node, ag_node = p.node_map.get(rs), p.node_map.get(ag)
    if rs_node is None or rs_node.kind != "ReduceScatter":
        raise ChainBroken(f"{rs!r} is not a ReduceScatter")
    if ag_node is None or ag_node.kind != "AllGather":
        raise ChainBroken(f"{ag!r} is not an AllGather")
    _not_grouped(p, rs, ag, *comps)
    rs_users = {c for c, _ in _refs_to(p, rs)}
    if rs in p.outputs:
        raise ChainBroken(f"{rs!r} is a program output")

    if not comps:
        if ag_node.inputs[0] != rs or rs_users != {ag}:
            raise ChainBroken(f"{ag!r} does not directly gather {rs!r}")
        e = _Edit(p, names)
        nid = e.fresh("allreduce")
        attrs = {"reducer": rs_node.attrs.get("reducer", "+")}
        if ag_node.attrs.get("target"):
            attrs["target"] = ag_node.attrs["target"]
        pos = e.index(rs)
        e.remove(rs, ag)
        e.insert_at(pos, OpNode(nid, "AllReduce", rs_node.inputs, attrs))
        e.rewire({ag: nid})
        e.note(nid, rs, ag)
        return e.build(), nid

    for c in comps:
        cn = p.node_map.get(c)
        if cn is None or cn.kind != COMPUTE:
            raise ChainBroken(f"{c!r} is not a computation")
    if len(comps) > 1:
        try:
            p, fid = fuse_computation(p, comps)
        except TransformError as exc:
            raise ChainBroken(f"computations do not fuse: {exc}") from None
    else:
        fid = comps[0]
    fnode, ag_node = p.node_map[fid], p.node_map[ag]
    rs_users = {c for c, _ in _refs_to(p, rs)}
    if rs not in fnode.inputs or rs_users != {fid}:
        raise ChainBroken(f"{rs!r} must feed only the fused computations")
    src_ref = ag_node.inputs[0]
    if ref_node(src_ref) != fid:
        raise ChainBroken(f"{ag!r} does not gather the computations' result")
    _, _, gather = src_ref.partition(":")
    gather = gather or fnode.body[-1].name

    e = _Edit(p, names)
    nid = e.fresh("fused_ar")
    inputs = [rs_node.inputs[0]] + [r for r in fnode.inputs if r != rs]
    attrs = {"reducer": rs_node.attrs.get("reducer", "+"), "rs_name": rs,
             "body": fnode.body, "gather": gather}
    if "dim" in rs_node.attrs:
        attrs["dim"] = rs_node.attrs["dim"]
    if ag_node.attrs.get("target"):
        attrs["target"] = ag_node.attrs["target"]
    pos = e.index(rs)
    e.remove(rs, fid, ag)
    e.insert_at(pos, OpNode(nid, "FusedAllReduce", tuple(inputs), attrs))
    mapping = {ag: nid, fid: f"{nid}:{fnode.body[-1].name}"}
    for s in fnode.body:
        mapping[f"{fid}:{s.name}"] = f"{nid}:{s.name}"
    e.rewire(mapping, skip=[nid])
    e.note(nid, rs, fid, ag)
    return e.build(), nid


def fuse_send(p: Program, comp: str, send: str, names=None):
    """Apply a computation element-wise while its result is sent."""
    cn, sn = p.node_map.get(comp), p.node_map.get(send)
    if cn is None or sn is None:
        raise UnknownNode(f"no node {comp if cn is None else send!r}")
    if cn.kind != COMPUTE:
        raise NotComputation(f"{comp!r} is a {cn.kind}, not a computation")
    if sn.kind != "Send":
        raise NotConsumer(f"{send!r} is a {sn.kind}, not a Send")
    if sn.inputs[0] != comp:
        raise NotConsumer(f"{send!r} does not send the result of {comp!r}")
    _not_grouped(p, comp, send)
    users = {c for c, _ in _refs_to(p, comp)}
    if users != {send} or any(ref_node(o) == comp for o in p.outputs):
        raise DependencyViolation(f"{comp!r} has readers other than {send!r}")
    if any(s.target for s in cn.body):
        raise DependencyViolation(f"{comp!r} updates a tensor and cannot move into a send")
    e = _Edit(p, names)
    nid = e.fresh("fused_send")
    attrs = {"group_offset": sn.attrs.get("group_offset", 1), "body": cn.body}
    if sn.attrs.get("target"):
        attrs["target"] = sn.attrs["target"]
    pos = e.index(comp)
    e.remove(comp, send)
    e.insert_at(pos, OpNode(nid, "FusedSend", cn.inputs, attrs))
    e.rewire({send: nid}, skip=[nid])
    e.note(nid, comp, send)
    return e.build(), nid


# Overlap, asSlice, dead ---------------------------------------------------------------------

def overlap(p: Program, ids: Sequence[str], names=None):
    """Group a producer-consumer chain so it may run interleaved by chunks."""
    ids = list(ids)
    for i in ids:
        n = p.node_map.get(i)
        if n is None:
            raise UnknownNode(f"no node {i!r}")
        if n.kind == "OverlapGroup":
            raise NotProducerConsumerChain(f"{i!r} is already an overlap group")
    _not_grouped(p, *ids)
    try:
        check_chain(p, ids)
    except ProgramError as exc:
        raise NotProducerConsumerChain(str(exc)) from None
    e = _Edit(p, names)
    gid = e.fresh("overlap")
    e.nodes.append(OpNode(gid, "OverlapGroup", (), {"members": tuple(ids)}))
    e.note(gid, *ids)
    return e.build(), gid


def as_slice(p: Program, tensor: str) -> Program:
    """Store a replicated tensor sliced when every use is through a slice view."""
    d = p.decl_map.get(tensor)
    if d is None:
        raise UnknownNode(f"no tensor {tensor!r}")
    if d.layout.kind != "replicated" or not d.shape:
        raise ConsumerNotSliced(f"{tensor!r} is not a replicated tensor")
    readers = [p.node_map[c] for c in p.consumers(tensor)]
    dims = set()
    for r in readers:
        if r.kind != "Slice":
            raise ConsumerNotSliced(f"{r.id!r} reads {tensor!r} without slicing it")
        dims.add(r.attrs.get("dim", 0))
    writers = p.writer_map.get(tensor, [])
    producer_ref = None
    for w in writers:
        wn = p.node_map[ref_node(w)]
        if wn.kind != "AllGather" or wn.attrs.get("target") != tensor:
            raise ConsumerNotSliced(f"{wn.id!r} writes {tensor!r} as a replicated value")
        src = p.info(wn.inputs[0])
        dims.add(src.layout.dim)
        producer_ref = (wn.id, wn.inputs[0])
    if len(dims) > 1:
        raise ConsumerNotSliced(f"uses of {tensor!r} slice along different axes {sorted(dims)}")
    if not dims:
        dims.add(0)
    dim = dims.pop()
    if d.shape[dim] % p.group_map[d.group].world_size:
        raise ConsumerNotSliced(f"{tensor!r} cannot be sliced evenly along axis {dim}")
    e = _Edit(p)
    e.decls = [replace(x, layout=Layout.sliced(dim)) if x.name == tensor else x for x in e.decls]
    view_ids = [r.id for r in readers]
    e.remove(*view_ids)
    e.rewire({v: tensor for v in view_ids})
    if producer_ref is not None:
        ag_id, ref = producer_ref
        e.nodes = [replace(n, attrs={k: v for k, v in n.attrs.items() if k != "target"})
                   if n.id == ag_id else n for n in e.nodes]
        e.nodes = [_set_target(n, {ref: tensor}) for n in e.nodes]
    return e.build()


def dead(p: Program, nid: str) -> Program:
    """Remove a node whose result is never used."""
    n = p.node_map.get(nid)
    if n is None:
        raise UnknownNode(f"no node {nid!r}")
    if any(ref_node(o) == nid for o in p.outputs):
        raise StillLive(f"{nid!r} is a program output")
    users = [c for c, _ in _refs_to(p, nid)]
    if users:
        raise StillLive(f"{nid!r} is read by {users}")
    if n.writes():
        raise StillLive(f"{nid!r} updates {[d for d, _ in n.writes()]}")
    if p.group_of_member(nid) is not None:
        raise StillLive(f"{nid!r} belongs to an overlap group")
    e = _Edit(p)
    e.remove(nid)
    return e.build()


# Schedules ------------------------------------------------------------------------------------

DIRECTIVE_KINDS = ("split_ar_rs_ag", "reorder_allgather", "reorder_broadcast", "fuse_computation",
                   "fuse_allreduce", "fuse_send", "overlap", "as_slice", "dead")


@dataclass(frozen=True)
class Directive:
    kind: str
    args: dict = field(default_factory=dict, hash=False)

    def to_json(self) -> dict:
        return {"kind": self.kind, "args": _jsonable(self.args)}

    def key(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


@dataclass(frozen=True)
class Schedule:
    directives: tuple = ()

    def to_json(self) -> dict:
        return {"directives": [d.to_json() for d in self.directives]}

    def key(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    def __len__(self) -> int:
        return len(self.directives)


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def schedule_from_json(obj: dict) -> Schedule:
    from .errors import ParseError
    try:
        items = obj["directives"]
        out = []
        for d in items:
            kind = d["kind"]
            if kind not in DIRECTIVE_KINDS:
                raise ParseError(f"unknown directive kind {kind!r}")
            out.append(Directive(kind, dict(d.get("args", {}) or {})))
    except ParseError:
        raise
    except (KeyError, TypeError, AttributeError) as exc:
        raise ParseError(f"malformed schedule: {exc!r}") from None
    return Schedule(tuple(out))


def apply_directive(p: Program, d: Directive):
    """Apply one directive; returns (program, ids of the nodes it created)."""
    a = d.args
    names = a.get("names")
    if d.kind == "split_ar_rs_ag":
        p, rs, ag = split_allreduce(p, a["target"], names, a.get("dim"))
        return p, [rs, ag]
    if d.kind == "reorder_allgather":
        p, comps, ags = reorder_allgather(p, a["ag"], a.get("comps", []), names)
        return p, comps + ags
    if d.kind == "reorder_broadcast":
        p, comps, bcs = reorder_broadcast(p, a["bc"], a.get("comps", []), names)
        return p, comps + bcs
    if d.kind == "fuse_computation":
        p, fid = fuse_computation(p, a["ids"], names)
        return p, [fid]
    if d.kind == "fuse_allreduce":
        p, fid = fuse_allreduce(p, a["rs"], a.get("comps", []), a["ag"], names)
        return p, [fid]
    if d.kind == "fuse_send":
        p, fid = fuse_send(p, a["comp"], a["send"], names)
        return p, [fid]
    if d.kind == "overlap":
        p, gid = overlap(p, a["ids"], names)
        return p, [gid]
    if d.kind == "as_slice":
        return as_slice(p, a["tensor"]), []
    if d.kind == "dead":
        return dead(p, a["id"]), []
    raise TransformError(f"unknown directive kind {d.kind!r}")


def apply_schedule(p: Program, s: Schedule) -> Program:
    for i, d in enumerate(s.directives):
        try:
            p, _ = apply_directive(p, d)
        except KeyError as exc:
            raise ScheduleError(i, d.kind, TransformError(f"missing argument {exc}")) from None
        except (TransformError, ProgramError) as exc:
            raise ScheduleError(i, d.kind, exc) from None
    return p


# Structural identity ----------------------------------------------------------------------------

def _canonical_attrs(n: OpNode) -> tuple:
    items = []
    local_names = {}
    if n.kind == "FusedAllReduce":
        local_names[n.attrs["rs_name"]] = "$rs"
    for i, r in enumerate(n.inputs):
        local_names.setdefault(r, f"$in{i}")
    for i, s in enumerate(n.body):
        local_names[s.name] = f"$s{i}"
    for k in sorted(n.attrs):
        if k in ("op", "rs_name"):
            continue
        v = n.attrs[k]
        if k == "body":
            v = tuple((ex.render(ex.substitute(s.expr, local_names)), s.target) for s in v)
        elif k == "gather":
            v = local_names.get(v, v)
        elif k == "members":
            continue
        items.append((k, v if not isinstance(v, list) else tuple(v)))
    return tuple(items)


def canonical_form(p: Program) -> str:
    """A string equal for programs whose dataflow graphs are isomorphic."""
    memo: dict[str, str] = {}

    def node_sig(nid: str) -> str:
        if nid in memo:
            return memo[nid]
        n = p.node_map[nid]
        memo[nid] = "<cycle>"
        ins = tuple(ref_sig(r) for r in n.inputs)
        sig = repr((n.kind, _canonical_attrs(n), ins))
        memo[nid] = hashlib.sha1(sig.encode()).hexdigest()
        return memo[nid]

    def ref_sig(ref: str) -> str:
        if ref in p.decl_map:
            return f"decl:{ref}"
        nid, _, stmt = ref.partition(":")
        if not stmt:
            return node_sig(nid)
        idx = [s.name for s in p.node_map[nid].body].index(stmt)
        return f"{node_sig(nid)}#{idx}"

    dataflow = [n.id for n in p.nodes if n.kind != "OverlapGroup"]
    parts = {
        "outputs": [ref_sig(o) for o in p.outputs],
        "writes": sorted((d, ref_sig(r)) for d, rs in p.writer_map.items() for r in rs),
        "decls": sorted((d.name, str(d.layout)) for d in p.decls),
        "nodes": sorted(node_sig(i) for i in dataflow),
        "overlap": sorted(repr(tuple(node_sig(m) for m in g.attrs["members"]))
                          for g in p.overlap_groups),
    }
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()


def isomorphic(a: Program, b: Program) -> bool:
    return canonical_form(a) == canonical_form(b)
