"""Per-rank evaluation of computation bodies on local data.

Replicated operands that meet a sliced value inside an element-wise
expression are narrowed to this rank's slice (index remapping, no copy of
remote data). Reductions over sliced values reduce locally and then finish
with a scalar all-reduce across the group.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import expr as ex
from .. import prng
from ..program import Layout, infer_expr
from ..tensors import take_part

DTYPE = np.float32


@dataclass(frozen=True)
class StmtPlan:
    expr: ex.Expr
    narrowed: tuple    # (new name, source name, axis)
    comm_calls: frozenset


def plan_stmt(e: ex.Expr, env_info: dict, shape: tuple, layout: Layout) -> StmtPlan:
    """Rewrite leaves that must be narrowed to this rank's slice.

    ``env_info`` maps names to (shape, layout).
    """
    narrowed: dict[str, tuple] = {}
    comm: set = set()

    def visit(node, ctx_shape, ctx_layout):
        if isinstance(node, ex.Ref):
            s, lay = env_info[node.name]
            if ctx_layout.is_sliced and lay.kind == "replicated" and s:
                axis = ctx_layout.dim - (len(ctx_shape) - len(s))
                if 0 <= axis < len(s) and s[axis] == ctx_shape[ctx_layout.dim]:
                    name = f"{node.name}@{axis}"
                    narrowed[name] = (node.name, axis)
                    return ex.Ref(name)
            return node
        if isinstance(node, ex.Num):
            return node
        if isinstance(node, ex.Neg):
            return ex.Neg(visit(node.arg, ctx_shape, ctx_layout))
        if isinstance(node, ex.Bin):
            return ex.Bin(node.op, visit(node.lhs, ctx_shape, ctx_layout),
                          visit(node.rhs, ctx_shape, ctx_layout))
        if node.fn in ex.REDUCTION_FUNCS:
            inner_shape, inner_layout = infer_expr(node.args[0], env_info)
            arg = visit(node.args[0], inner_shape, inner_layout)
            call = ex.Call(node.fn, (arg,), node.rate, node.key)
            if inner_layout.is_sliced:
                comm.add(call)
            return call
        return ex.Call(node.fn, tuple(visit(a, ctx_shape, ctx_layout) for a in node.args),
                       node.rate, node.key)

    new = visit(e, shape, layout)
    return StmtPlan(new, tuple((k, v[0], v[1]) for k, v in narrowed.items()), frozenset(comm))


def local_indices(shape: tuple, layout: Layout, pos: int, world: int) -> np.ndarray:
    """Global flat element indices of this rank's part of a value."""
    idx = np.arange(int(np.prod(shape, dtype=np.int64)), dtype=np.int64).reshape(shape)
    if layout.is_sliced:
        idx = take_part(idx, layout.dim, pos, world)
    return idx


class BodyEvaluator:
    """Evaluates a statement body for one rank.

    ``reduce_scalar(reducer, value)`` is a generator performing the scalar
    all-reduce for reductions over sliced data.
    """

    def __init__(self, body, stmt_info: dict, env_info: dict, seed: int, pos: int, world: int,
                 reduce_scalar):
        self.body = body
        self.stmt_info = stmt_info
        self.seed = seed
        self.pos = pos
        self.world = world
        self.reduce_scalar = reduce_scalar
        info = dict(env_info)
        self.plans = []
        for s in body:
            si = stmt_info[s.name]
            self.plans.append(plan_stmt(s.expr, info, si.shape, si.layout))
            info[s.name] = (si.shape, si.layout)

    def narrow(self, plan: StmtPlan, env: dict) -> dict:
        local = dict(env)
        for new, src, axis in plan.narrowed:
            local[new] = take_part(np.asarray(env[src]), axis, self.pos, self.world)
        return local

    def _hook(self, comm_calls):
        def hook(reducer, partial, call):
            if call in comm_calls:
                return (yield from self.reduce_scalar(reducer, partial))
            return partial
        return hook

    def run(self, env: dict):
        """Whole-value evaluation; returns {stmt name: local value}."""
        env = dict(env)
        out = {}
        for s, plan in zip(self.body, self.plans):
            info = self.stmt_info[s.name]
            gidx = local_indices(info.shape, info.layout, self.pos, self.world)

            def mask(call, shape, gidx=gidx):
                return prng.keep_mask(self.seed, call.key, call.rate, np.broadcast_to(gidx, shape))

            value = yield from ex.evaluate(plan.expr, self.narrow(plan, env), DTYPE, mask,
                                           self._hook(plan.comm_calls))
            local_shape = gidx.shape
            value = np.array(np.broadcast_to(np.asarray(value, dtype=DTYPE), local_shape))
            env[s.name] = value
            out[s.name] = value
        return out

    # chunked evaluation on slice-major flat pieces -----------------------------------------

    def chunkable(self, shape: tuple, layout: Layout) -> bool:
        """True when every statement is element-wise over one common (shape, layout)."""
        for s, plan in zip(self.body, self.plans):
            info = self.stmt_info[s.name]
            if plan.comm_calls or ex.has_reduction(s.expr):
                return False
            if info.shape != shape or info.layout != layout:
                return False
        return True

    def flat_operands(self, env: dict, local_shape: tuple, dim: int) -> list:
        """Per-statement operand arrays broadcast to the statement and flattened."""
        from .collectives import to_slice_major
        out = []
        for plan in self.plans:
            local = self.narrow(plan, env)
            flat = {}
            for name in ex.refs(plan.expr):
                v = np.asarray(local[name], dtype=DTYPE) if name in local else None
                if v is None:
                    continue
                flat[name] = v if v.ndim == 0 else to_slice_major(
                    np.broadcast_to(v, local_shape), dim)
            out.append(flat)
        return out

    def run_piece(self, flat_ops: list, positions, gidx_flat: np.ndarray, extra: dict) -> dict:
        """Evaluate every statement at the given flat positions.

        ``extra`` holds values that already cover exactly these positions.
        """
        env: dict = dict(extra)
        out = {}
        for s, plan, ops in zip(self.body, self.plans, flat_ops):
            local = {k: (v if v.ndim == 0 else v[positions]) for k, v in ops.items()
                     if k not in env}
            local.update(env)
            g = gidx_flat[positions]

            def mask(call, shape, g=g):
                return prng.keep_mask(self.seed, call.key, call.rate, np.broadcast_to(g, shape))

            value = ex.run_sync(ex.evaluate(plan.expr, local, DTYPE, mask, ex.local_reduce))
            value = np.array(np.broadcast_to(np.asarray(value, dtype=DTYPE), g.shape))
            env[s.name] = value
            out[s.name] = value
        return out
