"""Distributed tensor programs: declarations, operation nodes and layout inference.

A program is an immutable dataflow graph. Tensor shapes are global shapes;
a ``Sliced(d)`` tensor stores ``shape[d] / world_size`` entries of axis ``d``
on each rank of its process group.

References between nodes are strings. ``"x"`` names a declared tensor or the
primary output of node ``x``; ``"x:s"`` names statement ``s`` inside the body
of computation node ``x``.
"""
from __future__ import annotations

import ast
import heapq
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Iterable, Optional

import numpy as np

from . import expr as ex
from .errors import (DivisibilityError, GroupMismatch, InvalidInput, LayoutMismatch,
                     ParseError, ProgramError, ShapeMismatch)


class ElemType(Enum):
    F16 = "F16"
    F32 = "F32"

    @property
    def byte_width(self) -> int:
        return 2 if self is ElemType.F16 else 4


@dataclass(frozen=True)
class Layout:
    kind: str  # "sliced", "replicated" or "local"
    dim: Optional[int] = None

    @staticmethod
    def sliced(dim: int) -> "Layout":
        return Layout("sliced", dim)

    @property
    def is_sliced(self) -> bool:
        return self.kind == "sliced"

    def __str__(self) -> str:
        if self.kind == "sliced":
            return f"Sliced({self.dim})"
        return self.kind.capitalize()

    def to_json(self) -> dict:
        out = {"kind": self.kind.capitalize()}
        if self.kind == "sliced":
            out["dim"] = self.dim
        return out

    @staticmethod
    def from_json(obj) -> "Layout":
        if isinstance(obj, str):
            obj = {"kind": obj}
        kind = str(obj.get("kind", "")).lower()
        if kind == "sliced":
            if "dim" not in obj:
                raise ParseError("Sliced layout needs a dim")
            return Layout.sliced(int(obj["dim"]))
        if kind in ("replicated", "local"):
            return Layout(kind)
        raise ParseError(f"unknown layout kind {obj.get('kind')!r}")


REPLICATED = Layout("replicated")
LOCAL = Layout("local")


@dataclass(frozen=True)
class ProcessGroup:
    group_id: int
    world_size: int
    first_rank: int

    @property
    def rank_range(self) -> range:
        return range(self.first_rank, self.first_rank + self.world_size)


@dataclass(frozen=True)
class TensorDecl:
    name: str
    elem: ElemType
    shape: tuple
    layout: Layout
    group: int = 0
    init: tuple = ()  # sorted (key, value) pairs describing input generation

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass(frozen=True)
class Stmt:
    name: str
    expr: ex.Expr
    target: Optional[str] = None


@dataclass(frozen=True)
class RefInfo:
    shape: tuple
    layout: Layout
    group: int
    elem: ElemType

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


COMPUTE = "Pointwise"
COMPUTE_ALIASES = ("Pointwise", "Dropout", "Sqrt", "Pow", "Norm", "ReduceTensor", "Update")
COLLECTIVES = ("AllReduce", "ReduceScatter", "AllGather", "Reduce", "Broadcast")
P2P = ("Send", "Recv", "FusedSend")
FUSED_COLLECTIVES = ("FusedAllReduce",)
NODE_KINDS = (COMPUTE, "MatMul", "Slice", "OverlapGroup") + COLLECTIVES + P2P + FUSED_COLLECTIVES
COMM_KINDS = COLLECTIVES + P2P + FUSED_COLLECTIVES
REDUCERS = ("+", "max")


@dataclass(frozen=True)
class OpNode:
    id: str
    kind: str
    inputs: tuple
    attrs: dict = field(default_factory=dict, hash=False)
    info: Optional[RefInfo] = field(default=None, compare=False)
    stmt_info: tuple = field(default=(), compare=False)  # ((name, RefInfo), ...)

    @property
    def body(self) -> tuple:
        return self.attrs.get("body", ())

    @property
    def is_compute(self) -> bool:
        return self.kind == COMPUTE

    @property
    def is_comm(self) -> bool:
        return self.kind in COMM_KINDS

    def writes(self) -> list[tuple[str, str]]:
        """(decl, ref) pairs for every tensor this node updates."""
        out = []
        for s in self.body:
            if s.target:
                if self.kind == COMPUTE and s.name == self.body[-1].name:
                    out.append((s.target, self.id))
                else:
                    out.append((s.target, f"{self.id}:{s.name}"))
        if self.attrs.get("target"):
            out.append((self.attrs["target"], self.id))
        return out


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" or "warning"
    code: str
    message: str
    node: Optional[str] = None

    def __str__(self) -> str:
        where = f" [{self.node}]" if self.node else ""
        return f"{self.severity}: {self.code}{where}: {self.message}"


def ref_node(ref: str) -> str:
    return ref.split(":", 1)[0]


@dataclass(frozen=True)
class Program:
    name: str
    groups: tuple
    decls: tuple
    nodes: tuple
    outputs: tuple
    provenance: tuple = field(default=(), compare=False)  # ((new id, (old ids...)), ...)

    @cached_property
    def decl_map(self) -> dict:
        return {d.name: d for d in self.decls}

    @cached_property
    def node_map(self) -> dict:
        return {n.id: n for n in self.nodes}

    @cached_property
    def group_map(self) -> dict:
        return {g.group_id: g for g in self.groups}

    @property
    def world_size(self) -> int:
        return sum(g.world_size for g in self.groups)

    def info(self, ref: str) -> Optional[RefInfo]:
        if ref in self.decl_map:
            d = self.decl_map[ref]
            return RefInfo(d.shape, d.layout, d.group, d.elem)
        nid, _, stmt = ref.partition(":")
        node = self.node_map.get(nid)
        if node is None:
            return None
        if not stmt:
            return node.info
        return dict(node.stmt_info).get(stmt)

    def has_ref(self, ref: str) -> bool:
        if ref in self.decl_map:
            return True
        nid, _, stmt = ref.partition(":")
        node = self.node_map.get(nid)
        if node is None:
            return False
        return not stmt or any(s.name == stmt for s in node.body)

    @cached_property
    def consumer_map(self) -> dict:
        """node id or decl name -> ids of nodes reading it, in node order."""
        out: dict[str, list[str]] = {}
        for n in self.nodes:
            for ref in n.inputs:
                users = out.setdefault(ref_node(ref), [])
                if n.id not in users:
                    users.append(n.id)
        return out

    def consumers(self, name: str) -> list[str]:
        return list(self.consumer_map.get(name, ()))

    @cached_property
    def writer_map(self) -> dict:
        out: dict[str, list[str]] = {}
        for n in self.nodes:
            for decl, ref in n.writes():
                out.setdefault(decl, []).append(ref)
        return out

    @property
    def overlap_groups(self) -> list[OpNode]:
        return [n for n in self.nodes if n.kind == "OverlapGroup"]

    def group_of_member(self, nid: str) -> Optional[str]:
        for g in self.overlap_groups:
            if nid in g.attrs["members"]:
                return g.id
        return None

    @cached_property
    def inference_errors(self) -> dict:
        _, errors = _infer_all(self.groups, self.decls, self.nodes)
        return errors

    def with_nodes(self, nodes: Iterable[OpNode], outputs=None, decls=None,
                   provenance=None) -> "Program":
        return build_program(self.name, self.groups, self.decls if decls is None else decls,
                             nodes, self.outputs if outputs is None else outputs,
                             self.provenance if provenance is None else provenance)


# Shapes and layouts ------------------------------------------------------------

def broadcast_shapes(*shapes) -> tuple:
    try:
        return tuple(int(x) for x in np.broadcast_shapes(*[tuple(s) for s in shapes]))
    except ValueError:
        raise ShapeMismatch(f"shapes {list(map(list, shapes))} do not broadcast") from None


def aligned_axis(out_rank: int, operand_rank: int, axis: int) -> int:
    """Map an operand axis to the broadcast output axis (trailing alignment)."""
    return axis + (out_rank - operand_rank)


def check_layouts(items):
    """Reject layout combinations before shapes are considered.

    Two sliced operands must have the same rank and slicing axis; a sliced
    operand never mixes with a local one.
    """
    sliced = {(len(shape), layout.dim) for shape, layout in items if layout.is_sliced}
    if len(sliced) > 1:
        raise LayoutMismatch(f"operands sliced differently: {sorted(sliced)}")
    if sliced and any(layout.kind == "local" for _, layout in items):
        raise LayoutMismatch("cannot combine a sliced operand with a local operand")


def combine_layouts(items, out_shape: tuple) -> Layout:
    """Layout of an element-wise combination of (shape, layout) operands."""
    check_layouts(items)
    for shape, layout in items:
        if layout.is_sliced:
            return Layout.sliced(aligned_axis(len(out_shape), len(shape), layout.dim))
    if any(layout.kind == "local" for _, layout in items):
        return LOCAL
    return REPLICATED


def infer_layout(kind: str, input_layouts: list, input_shapes: list,
                 attrs: Optional[dict] = None, world_size: int = 1) -> tuple:
    """(output layout, output shape) of an operation on the given operands.

    Element-wise operations are requested with kind ``"Pointwise"``; the
    operands are combined with the broadcast rules.
    """
    infos = [RefInfo(tuple(s), l, 0, ElemType.F32) for l, s in zip(input_layouts, input_shapes)]
    groups = {0: ProcessGroup(0, world_size, 0)}
    attrs = dict(attrs or {})
    if kind == COMPUTE and "body" not in attrs:
        names = [f"x{i}" for i in range(len(infos))]
        e: ex.Expr = ex.Ref(names[0])
        for n in names[1:]:
            e = ex.Bin("+", e, ex.Ref(n))
        attrs["body"] = (Stmt("out", e),)
        info, _, _ = infer_node(kind, attrs, dict(zip(names, infos)), names, groups)
    else:
        refs = [f"x{i}" for i in range(len(infos))]
        info, _, _ = infer_node(kind, attrs, dict(zip(refs, infos)), refs, groups)
    return info.layout, info.shape


def infer_expr(e: ex.Expr, env: dict) -> tuple:
    """(shape, layout) of an expression given (shape, layout) for each name."""
    if isinstance(e, ex.Num):
        return (), REPLICATED
    if isinstance(e, ex.Ref):
        if e.name not in env:
            raise InvalidInput(f"unbound name {e.name!r} in expression")
        return env[e.name]
    if isinstance(e, ex.Neg):
        return infer_expr(e.arg, env)
    if isinstance(e, ex.Call) and e.fn in ex.REDUCTION_FUNCS:
        _, layout = infer_expr(e.args[0], env)
        return (), (LOCAL if layout.kind == "local" else REPLICATED)
    parts = [infer_expr(a, env) for a in ((e.lhs, e.rhs) if isinstance(e, ex.Bin) else e.args)]
    check_layouts(parts)
    shape = broadcast_shapes(*[p[0] for p in parts])
    return shape, combine_layouts(parts, shape)


def _check_divisible(shape: tuple, dim: int, size: int, what: str):
    if dim < 0 or dim >= len(shape):
        raise InvalidInput(f"{what}: axis {dim} out of range for shape {list(shape)}")
    if shape[dim] % size:
        raise DivisibilityError(f"{what}: extent {shape[dim]} of axis {dim} "
                                f"is not divisible by {size} ranks")


def _elem_of(infos: list) -> ElemType:
    for i in infos:
        if i.shape:
            return i.elem
    return infos[0].elem if infos else ElemType.F32


def infer_node(kind: str, attrs: dict, env: dict, inputs: list, groups: dict):
    """Infer (RefInfo, stmt infos, warnings) for one node.

    ``env`` maps every input reference to its RefInfo.
    """
    warnings: list[str] = []
    ins = [env[r] for r in inputs]
    if kind in ("OverlapGroup",):
        return None, (), warnings
    if kind in (COMPUTE, "FusedSend", "FusedAllReduce"):
        return _infer_body(kind, attrs, env, inputs, ins, groups, warnings)

    group_ids = {i.group for i in ins}
    if len(group_ids) > 1:
        raise GroupMismatch(f"inputs live in different process groups {sorted(group_ids)}")
    gid = ins[0].group if ins else 0
    size = groups[gid].world_size if gid in groups else 1
    arity = {"MatMul": 2, "Send": 1, "Recv": 1, "Slice": 1}.get(kind, 1)
    if len(ins) != arity:
        raise InvalidInput(f"{kind} takes {arity} input(s), got {len(ins)}")
    x = ins[0]
    elem = _elem_of(ins)

    if kind == "MatMul":
        a, b = ins
        if len(b.shape) != 2 or len(a.shape) < 1:
            raise ShapeMismatch("MatMul expects a [..., K] @ [K, M] contraction")
        if a.shape[-1] != b.shape[0]:
            raise ShapeMismatch(f"contraction extents differ: {a.shape[-1]} vs {b.shape[0]}")
        shape = tuple(a.shape[:-1]) + (b.shape[1],)
        la, lb = a.layout, b.layout
        last = len(a.shape) - 1
        if la.is_sliced and la.dim == last and lb.is_sliced and lb.dim == 0:
            layout = LOCAL
        elif la.kind == "replicated" and lb.kind == "replicated":
            layout = REPLICATED
        elif la.kind == "local" and lb.kind == "replicated":
            layout = LOCAL
        elif la.is_sliced and la.dim < last and lb.kind == "replicated":
            layout = la
        elif la.kind == "replicated" and lb.is_sliced and lb.dim == 1:
            layout = Layout.sliced(len(shape) - 1)
        else:
            raise LayoutMismatch(f"MatMul of {la} and {lb} operands")
        return RefInfo(shape, layout, gid, elem), (), warnings

    if kind == "AllReduce":
        _check_reducer(attrs)
        if x.layout.is_sliced:
            raise InvalidInput("AllReduce of a sliced tensor")
        if x.layout.kind == "replicated":
            warnings.append("AllReduce of a replicated tensor is redundant")
        return RefInfo(x.shape, REPLICATED, gid, elem), (), warnings
    if kind == "ReduceScatter":
        _check_reducer(attrs)
        if x.layout.kind != "local":
            raise InvalidInput(f"ReduceScatter expects a local tensor, got {x.layout}")
        if not x.shape:
            raise InvalidInput("ReduceScatter of a scalar")
        dim = attrs.get("dim", len(x.shape) - 1)
        _check_divisible(x.shape, dim, size, "ReduceScatter")
        return RefInfo(x.shape, Layout.sliced(dim), gid, elem), (), warnings
    if kind == "AllGather":
        if not x.layout.is_sliced:
            raise InvalidInput(f"AllGather expects a sliced tensor, got {x.layout}")
        return RefInfo(x.shape, REPLICATED, gid, elem), (), warnings
    if kind == "Reduce":
        _check_reducer(attrs)
        _check_root(attrs, size)
        if x.layout.kind != "local":
            raise InvalidInput(f"Reduce expects a local tensor, got {x.layout}")
        return RefInfo(x.shape, LOCAL, gid, elem), (), warnings
    if kind == "Broadcast":
        _check_root(attrs, size)
        if x.layout.is_sliced:
            raise InvalidInput("Broadcast of a sliced tensor")
        if x.layout.kind == "replicated":
            warnings.append("Broadcast of a replicated tensor is redundant")
        return RefInfo(x.shape, REPLICATED, gid, elem), (), warnings
    if kind == "Slice":
        if x.layout.kind != "replicated":
            raise InvalidInput(f"Slice expects a replicated tensor, got {x.layout}")
        dim = attrs.get("dim", 0)
        _check_divisible(x.shape, dim, size, "Slice")
        return RefInfo(x.shape, Layout.sliced(dim), gid, elem), (), warnings
    if kind == "Send":
        dest = _dest_group(gid, attrs, groups)
        return RefInfo(x.shape, x.layout, dest, elem), (), warnings
    if kind == "Recv":
        return x, (), warnings
    raise InvalidInput(f"unknown operation kind {kind!r}")


def _check_reducer(attrs: dict):
    if attrs.get("reducer", "+") not in REDUCERS:
        raise InvalidInput(f"unsupported reducer {attrs.get('reducer')!r}")


def _check_root(attrs: dict, size: int):
    root = attrs.get("root", 0)
    if not 0 <= root < size:
        raise InvalidInput(f"root {root} outside a group of {size} ranks")


def _dest_group(gid: int, attrs: dict, groups: dict) -> int:
    dest = gid + int(attrs.get("group_offset", 1))
    if dest not in groups:
        raise InvalidInput(f"send target group {dest} does not exist")
    if groups[dest].world_size != groups[gid].world_size:
        raise InvalidInput(f"groups {gid} and {dest} differ in size")
    return dest


def _infer_body(kind, attrs, env, inputs, ins, groups, warnings):
    group_ids = {i.group for i in ins}
    if len(group_ids) > 1:
        raise GroupMismatch(f"inputs live in different process groups {sorted(group_ids)}")
    body = attrs.get("body", ())
    if not body:
        raise InvalidInput(f"{kind} node has an empty body")
    gid = ins[0].group if ins else 0
    size = groups[gid].world_size if gid in groups else 1
    local_env = {r: (i.shape, i.layout) for r, i in env.items()}
    elem = _elem_of(ins)
    if kind == "FusedAllReduce":
        _check_reducer(attrs)
        src = ins[0]
        if src.layout.kind != "local":
            raise InvalidInput(f"FusedAllReduce expects a local input, got {src.layout}")
        dim = attrs.get("dim", len(src.shape) - 1)
        _check_divisible(src.shape, dim, size, "FusedAllReduce")
        local_env[attrs["rs_name"]] = (src.shape, Layout.sliced(dim))
        elem = src.elem
    stmt_infos = []
    for s in body:
        if s.name in local_env:
            raise InvalidInput(f"statement {s.name!r} shadows another name")
        shape, layout = infer_expr(s.expr, local_env)
        for call in ex.walk(s.expr):
            if isinstance(call, ex.Call) and call.fn == "dropout":
                if infer_expr(call.args[0], local_env) != (shape, layout):
                    raise InvalidInput("dropout operand must span its statement's full shape")
        local_env[s.name] = (shape, layout)
        stmt_infos.append((s.name, RefInfo(shape, layout, gid, elem)))
    last = stmt_infos[-1][1]
    if kind == COMPUTE:
        return last, tuple(stmt_infos), warnings
    if kind == "FusedSend":
        dest = _dest_group(gid, attrs, groups)
        return RefInfo(last.shape, last.layout, dest, last.elem), tuple(stmt_infos), warnings
    gathered = dict(stmt_infos).get(attrs.get("gather", body[-1].name))
    if gathered is None or not gathered.layout.is_sliced:
        raise InvalidInput("FusedAllReduce must gather a sliced statement")
    return (RefInfo(gathered.shape, REPLICATED, gid, gathered.elem),
            tuple(stmt_infos), warnings)


def _infer_all(groups, decls, nodes):
    """Infer every node in dependency order; returns (infos, errors)."""
    gmap = {g.group_id: g for g in groups}
    known: dict[str, RefInfo] = {d.name: RefInfo(d.shape, d.layout, d.group, d.elem) for d in decls}
    node_by_id = {n.id: n for n in nodes}
    results: dict[str, tuple] = {}
    errors: dict[str, Exception] = {}
    for nid in _topo_ids(nodes, set(known)):
        n = node_by_id[nid]
        env = {}
        missing = None
        for ref in n.inputs:
            if ref in known:
                env[ref] = known[ref]
                continue
            base, _, stmt = ref.partition(":")
            if base in results and results[base][0] is not None:
                info, stmts = results[base][0], dict(results[base][1])
                value = stmts.get(stmt) if stmt else info
                if value is not None:
                    env[ref] = value
                    continue
            missing = ref
            break
        if missing is not None:
            errors[nid] = InvalidInput(f"input {missing!r} is unresolved")
            results[nid] = (None, ())
            continue
        try:
            info, stmts, warns = infer_node(n.kind, n.attrs, env, list(n.inputs), gmap)
        except ProgramError as exc:
            errors[nid] = exc
            results[nid] = (None, ())
            continue
        results[nid] = (info, stmts, warns)
    return results, errors


def _topo_ids(nodes, decl_names: set) -> list[str]:
    """Kahn's algorithm with ties broken by node id; cyclic leftovers appended."""
    ids = {n.id for n in nodes}
    deps = {n.id: {ref_node(r) for r in n.inputs if ref_node(r) in ids and r not in decl_names}
            for n in nodes}
    users: dict[str, list[str]] = {}
    for nid, ds in deps.items():
        for d in ds:
            users.setdefault(d, []).append(nid)
    indeg = {nid: len(ds) for nid, ds in deps.items()}
    heap = [nid for nid, k in indeg.items() if k == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        nid = heapq.heappop(heap)
        order.append(nid)
        for u in users.get(nid, ()):
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(heap, u)
    order.extend(sorted(ids - set(order)))
    return order


def build_program(name, groups, decls, nodes, outputs, provenance=()) -> Program:
    """Assemble a program, attaching inferred shapes and layouts to nodes."""
    nodes = [replace(n, info=None, stmt_info=()) for n in nodes]
    results, _ = _infer_all(groups, decls, nodes)
    filled = []
    for n in nodes:
        info, stmts = results.get(n.id, (None, ()))[:2]
        filled.append(replace(n, info=info, stmt_info=tuple(stmts)))
    return Program(name, tuple(groups), tuple(decls), tuple(filled), tuple(outputs),
                   tuple(provenance))


def topo_order(p: Program) -> list[str]:
    """Deterministic topological order of the dataflow nodes (ties by id)."""
    dataflow = [n for n in p.nodes if n.kind != "OverlapGroup"]
    return _topo_ids(dataflow, set(p.decl_map))


# Validation -------------------------------------------------------------------

def validate_program(p: Program) -> list[Diagnostic]:
    diags: list[Diagnostic] = []

    def err(code, msg, node=None):
        diags.append(Diagnostic("error", code, msg, node))

    seen_ranks = 0
    gids = set()
    for g in sorted(p.groups, key=lambda g: g.first_rank):
        if g.world_size < 1:
            err("InvalidGroup", f"group {g.group_id} has no ranks")
        if g.first_rank != seen_ranks:
            err("InvalidGroup", f"group {g.group_id} does not continue the rank partition")
        if g.group_id in gids:
            err("InvalidGroup", f"duplicate group id {g.group_id}")
        gids.add(g.group_id)
        seen_ranks = g.first_rank + g.world_size

    names = set()
    for d in p.decls:
        if d.name in names:
            err("DuplicateName", f"tensor {d.name!r} declared twice")
        names.add(d.name)
        if d.group not in gids:
            err("DanglingReference", f"tensor {d.name!r} names unknown group {d.group}")
            continue
        if any(int(e) < 1 for e in d.shape):
            err("ShapeMismatch", f"tensor {d.name!r} has a non-positive extent")
        if not d.shape and d.layout.kind != "replicated":
            err("LayoutMismatch", f"scalar {d.name!r} must be replicated")
        if d.layout.is_sliced:
            if not 0 <= d.layout.dim < len(d.shape):
                err("LayoutMismatch", f"tensor {d.name!r} sliced along missing axis {d.layout.dim}")
            elif d.shape[d.layout.dim] % p.group_map[d.group].world_size:
                err("DivisibilityError",
                    f"tensor {d.name!r}: extent {d.shape[d.layout.dim]} of axis {d.layout.dim} "
                    f"is not divisible by {p.group_map[d.group].world_size} ranks")

    node_ids = set()
    for n in p.nodes:
        if n.id in node_ids or n.id in names:
            err("DuplicateName", f"node id {n.id!r} is not unique", n.id)
        node_ids.add(n.id)
        if n.kind not in NODE_KINDS:
            err("InvalidInput", f"unknown operation kind {n.kind!r}", n.id)
        for ref in n.inputs:
            if not p.has_ref(ref):
                err("DanglingReference", f"input {ref!r} does not exist", n.id)

    order = topo_order(p)
    position = {nid: i for i, nid in enumerate(order)}
    for n in p.nodes:
        if n.kind == "OverlapGroup":
            continue
        for ref in n.inputs:
            base = ref_node(ref)
            if base in position and position[base] >= position[n.id]:
                err("Cycle", f"dependency cycle through {base!r}", n.id)
                break

    results, errors = _infer_all(p.groups, p.decls, p.nodes)
    for n in p.nodes:
        if n.id in errors:
            exc = errors[n.id]
            if "unresolved" not in str(exc):
                err(exc.code, str(exc), n.id)
            continue
        res = results.get(n.id)
        if res is None or res[0] is None:
            continue
        info, stmts, warns = res
        for w in warns:
            diags.append(Diagnostic("warning", "Redundant", w, n.id))
        if n.info != info or tuple(n.stmt_info) != tuple(stmts):
            err("InferenceMismatch", "stored layout/shape differs from inference", n.id)
        for s in n.body:
            for name in ex.refs(s.expr):
                if ":" in name and not p.has_ref(name):
                    err("DanglingReference", f"expression names missing {name!r}", n.id)

    for n in p.nodes:
        if n.kind == "Recv":
            src = p.node_map.get(ref_node(n.inputs[0])) if n.inputs else None
            if src is None or src.kind not in ("Send", "FusedSend"):
                err("UnpairedRecv", "Recv must consume a Send", n.id)
    recv_of: dict[str, str] = {}
    for n in p.nodes:
        if n.kind == "Recv" and n.inputs:
            s = ref_node(n.inputs[0])
            if s in recv_of:
                err("UnpairedRecv", f"send {s!r} is received twice", n.id)
            recv_of[s] = n.id

    for decl, refs in p.writer_map.items():
        d = p.decl_map.get(decl)
        if d is None:
            err("DanglingReference", f"update of undeclared tensor {decl!r}")
            continue
        if len(refs) > 1:
            err("MultipleWriters", f"tensor {decl!r} updated by {refs}")
        for ref in refs:
            info = p.info(ref)
            if info is not None and (info.shape != d.shape or info.layout != d.layout
                                     or info.group != d.group):
                err("UpdateMismatch",
                    f"update of {decl!r} produces {list(info.shape)} {info.layout} "
                    f"but the tensor is {list(d.shape)} {d.layout}", ref_node(ref))

    for out in p.outputs:
        if not p.has_ref(out) or out in p.decl_map:
            err("DanglingReference", f"program output {out!r} is not a node")

    members_seen: dict[str, str] = {}
    for g in p.overlap_groups:
        members = g.attrs.get("members", ())
        for m in members:
            if m not in p.node_map:
                err("DanglingReference", f"overlap member {m!r} does not exist", g.id)
            elif m in members_seen:
                err("InvalidOverlap", f"{m!r} belongs to two overlap groups", g.id)
            members_seen[m] = g.id
        try:
            check_chain(p, list(members))
        except ProgramError as exc:
            err("InvalidOverlap", str(exc), g.id)

    live = live_nodes(p)
    for n in p.nodes:
        if n.kind != "OverlapGroup" and n.id not in live:
            diags.append(Diagnostic("warning", "DeadNode", "node does not reach any output", n.id))
    return diags


def check_chain(p: Program, members: list[str]):
    """Members must form a producer-consumer chain that can run as one unit."""
    if len(members) < 2:
        raise ProgramError("an overlap group needs at least two operations")
    if len(set(members)) != len(members):
        raise ProgramError("overlap members repeat")
    for a, b in zip(members, members[1:]):
        nb = p.node_map.get(b)
        if nb is None or p.node_map.get(a) is None:
            raise ProgramError(f"unknown overlap member in ({a}, {b})")
        if not nb.inputs or ref_node(nb.inputs[0]) != a:
            raise ProgramError(f"{b!r} does not consume {a!r} as its primary input")
    # no path may leave the group and come back
    inside = set(members)
    upstream = ancestors(p, [r for m in members for r in p.node_map[m].inputs
                             if ref_node(r) not in inside])
    if upstream & inside:
        raise ProgramError("a non-member both depends on and feeds the group")


def ancestors(p: Program, refs: Iterable[str]) -> set:
    out: set[str] = set()
    stack = [ref_node(r) for r in refs]
    while stack:
        nid = stack.pop()
        if nid in out or nid not in p.node_map:
            continue
        out.add(nid)
        stack.extend(ref_node(r) for r in p.node_map[nid].inputs)
    return out


def live_nodes(p: Program) -> set:
    roots = list(p.outputs) + [ref for refs in p.writer_map.values() for ref in refs]
    return ancestors(p, roots)


def errors_only(diags: list[Diagnostic]) -> list[Diagnostic]:
    return [d for d in diags if d.severity == "error"]


def require_valid(p: Program) -> Program:
    bad = errors_only(validate_program(p))
    if bad:
        raise ProgramError("; ".join(str(d) for d in bad))
    return p


# JSON ----------------------------------------------------------------------------

def eval_extent(value, sizes: dict) -> int:
    """Evaluate an integer extent that may name size symbols (``"H"``, ``"W/2"``)."""
    if isinstance(value, bool):
        raise ParseError(f"invalid extent {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if not isinstance(value, str):
        raise ParseError(f"invalid extent {value!r}")
    try:
        tree = ast.parse(value, mode="eval")
    except SyntaxError:
        raise ParseError(f"invalid extent {value!r}") from None

    def ev(node):
        if isinstance(node, ast.Constant) and isinstance(node.value, int):
            return node.value
        if isinstance(node, ast.Name):
            if node.id not in sizes:
                raise ParseError(f"size symbol {node.id!r} is not bound")
            return int(sizes[node.id])
        if isinstance(node, ast.BinOp):
            a, b = ev(node.left), ev(node.right)
            if isinstance(node.op, ast.Add):
                return a + b
            if isinstance(node.op, ast.Sub):
                return a - b
            if isinstance(node.op, ast.Mult):
                return a * b
            if isinstance(node.op, (ast.Div, ast.FloorDiv)):
                if b == 0 or a % b:
                    raise ParseError(f"extent {value!r} is not an integer for {sizes}")
                return a // b
            if isinstance(node.op, ast.Pow):
                return a ** b
        raise ParseError(f"invalid extent {value!r}")

    return ev(tree.body)


_ALIASES_WITH_EXPR = {"Pointwise", "Update", "Dropout"}


def _parse_expr(text, where):
    try:
        return ex.parse(str(text))
    except ex.ExprError as exc:
        raise ParseError(f"node {where!r}: {exc}") from None


def _normalise_compute(nid: str, kind: str, attrs: dict, inputs: list) -> tuple:
    """Turn any computation kind into a Pointwise body."""
    attrs = dict(attrs)
    if kind == COMPUTE and "body" in attrs:
        body = []
        for s in attrs["body"]:
            e = ex.assign_dropout_keys(_parse_expr(s["expr"], nid), s["name"], [0])
            body.append(Stmt(s["name"], e, s.get("target")))
        out = {k: v for k, v in attrs.items() if k != "body"}
        out["body"] = tuple(body)
        out.setdefault("op", COMPUTE)
        return out, inputs
    target = attrs.pop("target", None)
    if kind in ("Pointwise", "Update"):
        if "expr" in attrs:
            e = _parse_expr(attrs.pop("expr"), nid)
        elif kind == "Update" and len(inputs) == 2:
            e = ex.Ref(inputs[1])
        else:
            raise ParseError(f"node {nid!r}: {kind} needs an expr attribute")
        if kind == "Update" and not target:
            raise ParseError(f"node {nid!r}: Update needs a target")
    elif kind == "Dropout":
        inner = _parse_expr(attrs.pop("expr"), nid) if "expr" in attrs else ex.Ref(inputs[0])
        rate = float(attrs.pop("rate", 0.0))
        if not 0.0 <= rate < 1.0:
            raise ParseError(f"node {nid!r}: dropout rate {rate} outside [0, 1)")
        e = ex.Call("dropout", (inner,), rate=rate)
    elif kind == "Sqrt":
        e = ex.Call("sqrt", (ex.Ref(inputs[0]),))
    elif kind == "Pow":
        e = ex.Call("pow", (ex.Ref(inputs[0]), ex.Ref(inputs[1])))
    elif kind == "Norm":
        e = ex.Call("norm", (ex.Ref(inputs[0]),))
    else:  # ReduceTensor
        reducer = attrs.pop("reducer", "+")
        if reducer not in REDUCERS:
            raise ParseError(f"node {nid!r}: unsupported reducer {reducer!r}")
        e = ex.Call("sum" if reducer == "+" else "amax", (ex.Ref(inputs[0]),))
    e = ex.assign_dropout_keys(e, nid, [0])
    if not inputs:
        inputs = ex.refs(e)
    attrs["body"] = (Stmt(nid, e, target),)
    attrs["op"] = kind
    return attrs, inputs


def _decode_body(nid: str, raw: list) -> tuple:
    return tuple(Stmt(s["name"], ex.assign_dropout_keys(_parse_expr(s["expr"], nid), s["name"], [0]),
                      s.get("target")) for s in raw)


def node_from_json(obj: dict) -> OpNode:
    try:
        nid = str(obj["id"])
        kind = str(obj["kind"])
    except (KeyError, TypeError):
        raise ParseError(f"node entry {obj!r} needs id and kind") from None
    attrs = dict(obj.get("attrs", {}) or {})
    inputs = [str(r) for r in obj.get("inputs", [])]
    if kind in COMPUTE_ALIASES:
        attrs, inputs = _normalise_compute(nid, kind, attrs, inputs)
        kind = COMPUTE
    elif kind in ("FusedAllReduce", "FusedSend"):
        attrs["body"] = _decode_body(nid, attrs.get("body", []))
    elif kind == "OverlapGroup":
        attrs["members"] = tuple(attrs.get("members", ()))
    if kind not in NODE_KINDS:
        raise ParseError(f"node {nid!r}: unknown kind {kind!r}")
    # explicit defaults keep structurally equal programs equal
    if kind in ("AllReduce", "ReduceScatter", "Reduce", "FusedAllReduce"):
        attrs.setdefault("reducer", "+")
    if kind in ("Reduce", "Broadcast"):
        attrs.setdefault("root", 0)
    if kind in ("Send", "FusedSend"):
        attrs.setdefault("group_offset", 1)
    return OpNode(nid, kind, tuple(inputs), attrs)


def program_from_json(obj: dict, sizes: Optional[dict] = None) -> Program:
    """Build a program from its JSON form, binding symbolic extents to ``sizes``."""
    sizes = dict(sizes or {})
    try:
        name = str(obj.get("name", "program"))
        groups = []
        first = 0
        for g in obj["groups"]:
            size = eval_extent(g["size"], sizes)
            groups.append(ProcessGroup(int(g["id"]), size, first))
            first += size
        decls = []
        for t in obj["tensors"]:
            elem = ElemType(str(t["elem"]).upper())
            shape = tuple(eval_extent(e, sizes) for e in t["shape"])
            init = tuple(sorted((t.get("init") or {}).items()))
            decls.append(TensorDecl(str(t["name"]), elem, shape, Layout.from_json(t["layout"]),
                                    int(t["group"]), init))
        nodes = [node_from_json(n) for n in obj["nodes"]]
        outputs = [str(o) for o in obj["outputs"]]
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ParseError(f"malformed program: {exc!r}") from None
    return build_program(name, groups, decls, nodes, outputs)


def _attrs_to_json(n: OpNode) -> dict:
    out = {}
    for k, v in n.attrs.items():
        if k == "body":
            out[k] = [{"name": s.name, "expr": ex.render(s.expr),
                       **({"target": s.target} if s.target else {})} for s in v]
        elif isinstance(v, tuple):
            out[k] = list(v)
        else:
            out[k] = v
    return out


def program_to_json(p: Program) -> dict:
    return {
        "name": p.name,
        "groups": [{"id": g.group_id, "size": g.world_size} for g in p.groups],
        "tensors": [{"name": d.name, "elem": d.elem.value, "shape": list(d.shape),
                     "layout": d.layout.to_json(), "group": d.group,
                     **({"init": dict(d.init)} if d.init else {})} for d in p.decls],
        "nodes": [{"id": n.id, "kind": n.kind, "attrs": _attrs_to_json(n),
                   "inputs": list(n.inputs)} for n in p.nodes],
        "outputs": list(p.outputs),
    }


def layout_listing(p: Program) -> list[tuple]:
    """(node id, kind, shape, layout, group) rows in topological order."""
    rows = []
    for nid in topo_order(p):
        n = p.node_map[nid]
        label = n.attrs.get("op", n.kind) if n.is_compute else n.kind
        if n.info is None:
            rows.append((nid, label, None, None, None))
        else:
            rows.append((nid, label, n.info.shape, n.info.layout, n.info.group))
    return rows
