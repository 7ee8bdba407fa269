"""Fused all-reduce and point-to-point transfers outside a full program."""
from __future__ import annotations

import numpy as np

from .. import expr as ex
from ..errors import NoSuchRank, OperandLayoutMismatch, ShapeMismatch
from ..program import (ElemType, Layout, OpNode, ProcessGroup, Stmt, TensorDecl,
                       build_program, errors_only, validate_program)
from .collectives import CollectiveResult
from .comm import Counters, RecvOp, SendOp, run
from .config import CommConfig
from .executor import execute, plan


def fused_all_reduce(cfg: CommConfig, inputs: list, expr: str = "x", extras: dict | None = None,
                     reducer: str = "+", seed: int = 0, mode: str = "roundrobin",
                     elem: ElemType = ElemType.F32) -> CollectiveResult:
    """All-reduce ``inputs`` and apply ``expr`` to the reduced value ``x`` in flight.

    ``extras`` maps operand names to (global value, layout); replicated
    operands are indexed by global position and sliced ones through the
    slice held by each rank.
    """
    world = len(inputs)
    shapes = {np.shape(x) for x in inputs}
    if len(shapes) != 1:
        raise ShapeMismatch(f"ranks hold different shapes {sorted(shapes)}")
    shape = shapes.pop()
    dim = len(shape) - 1
    extras = dict(extras or {})
    decls = [TensorDecl("src", elem, shape, Layout("local"))]
    values = {"src": [np.asarray(x, dtype=np.float32) for x in inputs]}
    for name, (value, layout) in sorted(extras.items()):
        value = np.asarray(value, dtype=np.float32)
        if layout.kind == "local" or (layout.is_sliced and layout.dim != dim):
            raise OperandLayoutMismatch(f"operand {name!r} has layout {layout}")
        decls.append(TensorDecl(name, elem, value.shape, layout))
        if layout.is_sliced:
            n = value.shape[layout.dim] // world
            values[name] = [np.take(value, range(r * n, (r + 1) * n), axis=layout.dim)
                            for r in range(world)]
        else:
            values[name] = [value.copy() for _ in range(world)]
    body = ex.assign_dropout_keys(ex.parse(expr), "fused", [0])
    node = OpNode("fused", "FusedAllReduce", ("src",) + tuple(sorted(extras)),
                  {"reducer": reducer, "rs_name": "x", "body": (Stmt("y", body),), "gather": "y"})
    p = build_program("fused_all_reduce", (ProcessGroup(0, world, 0),), decls, [node], ("fused",))
    errs = errors_only(validate_program(p))
    if errs:
        raise OperandLayoutMismatch("; ".join(d.message for d in errs))
    report = execute(plan(p), cfg, values, seed, mode)
    return CollectiveResult(report.outputs["fused"], report.comm_bytes, report.kernel_steps)


def p2p_send_recv(payloads: dict, destinations: dict, world: int,
                  byte_width: int = 4, rank_group=None, mode: str = "roundrobin"):
    """Send ``payloads[src]`` to rank ``destinations[src]``.

    Returns (received value per destination rank, counters).
    """
    rank_group = tuple(rank_group) if rank_group is not None else (0,) * world
    counters = Counters(world, rank_group)
    senders = {dst: src for src, dst in destinations.items()}

    def rank_gen(r):
        if r in destinations:
            data = np.asarray(payloads[r], dtype=np.float32)
            dst = destinations[r]
            if not 0 <= dst < world:
                raise NoSuchRank(f"send to rank {dst} outside the {world}-rank world")
            yield SendOp(dst, ("p2p",), data, data.size * byte_width)
        if r in senders:
            return (yield RecvOp(senders[r], ("p2p",)))
        return None

    out = run({r: rank_gen(r) for r in range(world)}, counters, mode)
    return {r: v for r, v in out.items() if v is not None}, counters
