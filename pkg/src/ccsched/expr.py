"""Element-wise expression trees used by computation nodes.

Expressions are written as Python-syntax strings (``"m*beta1 + (1-beta1)*avg"``)
and parsed with :mod:`ast`. A secondary output of a fused node is written
``node.stmt`` and stored internally as the reference ``"node:stmt"``.
"""
from __future__ import annotations

import ast
from dataclasses import dataclass
from typing import Callable, Iterator, Union

import numpy as np

BINARY_OPS = ("+", "-", "*", "/")
ELEMENTWISE_FUNCS = {"sqrt": 1, "pow": 2, "dropout": 2}
REDUCTION_FUNCS = {"sum": 1, "norm": 1, "amax": 1}


class ExprError(ValueError):
    pass


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Ref:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class Bin:
    op: str
    lhs: "Expr"
    rhs: "Expr"


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple
    # dropout only: the rate and the stable key feeding the mask generator
    rate: float = 0.0
    key: str = ""


Expr = Union[Num, Ref, Neg, Bin, Call]

_AST_BINOPS = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/"}


def parse(text: str) -> Expr:
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExprError(f"cannot parse expression {text!r}: {exc.msg}") from None
    return _convert(tree.body, text)


def _convert(node: ast.AST, text: str) -> Expr:
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
            and not isinstance(node.value, bool):
        return Num(float(node.value))
    if isinstance(node, ast.Name):
        return Ref(node.id)
    if isinstance(node, ast.Attribute) and isinstance(node.value, ast.Name):
        return Ref(f"{node.value.id}:{node.attr}")
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
        inner = _convert(node.operand, text)
        if isinstance(inner, Num):
            return Num(-inner.value)
        return Neg(inner)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.UAdd):
        return _convert(node.operand, text)
    if isinstance(node, ast.BinOp) and type(node.op) in _AST_BINOPS:
        return Bin(_AST_BINOPS[type(node.op)], _convert(node.left, text),
                   _convert(node.right, text))
    if isinstance(node, ast.BinOp) and isinstance(node.op, ast.Pow):
        return Call("pow", (_convert(node.left, text), _convert(node.right, text)))
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
        fn = node.func.id.lower()
        if fn == "dropout":
            if len(node.args) not in (2, 3):
                raise ExprError(f"dropout takes (x, rate[, key]) in {text!r}")
            rate = _convert(node.args[1], text)
            if not isinstance(rate, Num):
                raise ExprError(f"dropout rate must be a constant in {text!r}")
            key = ""
            if len(node.args) == 3:
                if not (isinstance(node.args[2], ast.Constant)
                        and isinstance(node.args[2].value, str)):
                    raise ExprError(f"dropout key must be a string in {text!r}")
                key = node.args[2].value
            if not 0.0 <= rate.value < 1.0:
                raise ExprError(f"dropout rate must lie in [0, 1) in {text!r}")
            return Call("dropout", (_convert(node.args[0], text),), rate=rate.value, key=key)
        arity = ELEMENTWISE_FUNCS.get(fn, REDUCTION_FUNCS.get(fn))
        if arity is None:
            raise ExprError(f"unknown function {fn!r} in {text!r}")
        if len(node.args) != arity:
            raise ExprError(f"{fn} expects {arity} argument(s) in {text!r}")
        return Call(fn, tuple(_convert(a, text) for a in node.args))
    raise ExprError(f"unsupported syntax in expression {text!r}")


_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}


def render(e: Expr) -> str:
    return _render(e, 0)


def _render(e: Expr, outer: int) -> str:
    if isinstance(e, Num):
        v = e.value
        s = repr(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)
        return f"({s})" if v < 0 and outer > 0 else s
    if isinstance(e, Ref):
        return e.name.replace(":", ".")
    if isinstance(e, Neg):
        return f"-{_render(e.arg, 3)}"
    if isinstance(e, Bin):
        prec = _PRECEDENCE[e.op]
        # right operand of - and / needs parentheses at equal precedence
        rhs_prec = prec + 1 if e.op in "-/" else prec
        s = f"{_render(e.lhs, prec)} {e.op} {_render(e.rhs, rhs_prec)}"
        return f"({s})" if prec < outer else s
    if e.fn == "dropout":
        inner = _render(e.args[0], 0)
        return f"dropout({inner}, {e.rate!r}, {e.key!r})" if e.key else f"dropout({inner}, {e.rate!r})"
    return f"{e.fn}({', '.join(_render(a, 0) for a in e.args)})"


def refs(e: Expr) -> list[str]:
    """Referenced names in first-occurrence order."""
    out: list[str] = []
    for node in walk(e):
        if isinstance(node, Ref) and node.name not in out:
            out.append(node.name)
    return out


def walk(e: Expr) -> Iterator[Expr]:
    yield e
    if isinstance(e, Neg):
        yield from walk(e.arg)
    elif isinstance(e, Bin):
        yield from walk(e.lhs)
        yield from walk(e.rhs)
    elif isinstance(e, Call):
        for a in e.args:
            yield from walk(a)


def substitute(e: Expr, mapping: dict[str, str]) -> Expr:
    """Rename references; names absent from ``mapping`` are kept."""
    if isinstance(e, Ref):
        return Ref(mapping.get(e.name, e.name))
    if isinstance(e, Neg):
        return Neg(substitute(e.arg, mapping))
    if isinstance(e, Bin):
        return Bin(e.op, substitute(e.lhs, mapping), substitute(e.rhs, mapping))
    if isinstance(e, Call):
        return Call(e.fn, tuple(substitute(a, mapping) for a in e.args), e.rate, e.key)
    return e


def assign_dropout_keys(e: Expr, base: str, counter: list[int]) -> Expr:
    """Give every unkeyed dropout a stable key derived from ``base``."""
    if isinstance(e, Call):
        args = tuple(assign_dropout_keys(a, base, counter) for a in e.args)
        key = e.key
        if e.fn == "dropout" and not key:
            key = base if counter[0] == 0 else f"{base}#{counter[0]}"
            counter[0] += 1
        return Call(e.fn, args, e.rate, key)
    if isinstance(e, Neg):
        return Neg(assign_dropout_keys(e.arg, base, counter))
    if isinstance(e, Bin):
        return Bin(e.op, assign_dropout_keys(e.lhs, base, counter),
                   assign_dropout_keys(e.rhs, base, counter))
    return e


def has_reduction(e: Expr) -> bool:
    return any(isinstance(n, Call) and n.fn in REDUCTION_FUNCS for n in walk(e))


def has_dropout(e: Expr) -> bool:
    return any(isinstance(n, Call) and n.fn == "dropout" for n in walk(e))


def op_count(e: Expr) -> int:
    """Arithmetic operations applied per output element."""
    n = 0
    for node in walk(e):
        if isinstance(node, (Bin, Neg)):
            n += 1
        elif isinstance(node, Call):
            n += 2 if node.fn in ("dropout", "norm") else 1
    return n


# Evaluation ----------------------------------------------------------------
#
# Evaluation is a generator so that reductions over sliced data can suspend
# the caller while a scalar all-reduce runs between ranks. Callers that never
# communicate drive it with ``run_sync``.

ReduceHook = Callable[[str, np.ndarray, Call], "Iterator"]
MaskFn = Callable[[Call, tuple], np.ndarray]


def evaluate(e: Expr, env: dict, dtype, mask_fn: MaskFn, reduce_hook: ReduceHook):
    if isinstance(e, Num):
        return dtype(e.value)
    if isinstance(e, Ref):
        return env[e.name]
    if isinstance(e, Neg):
        a = yield from evaluate(e.arg, env, dtype, mask_fn, reduce_hook)
        return -a
    if isinstance(e, Bin):
        a = yield from evaluate(e.lhs, env, dtype, mask_fn, reduce_hook)
        b = yield from evaluate(e.rhs, env, dtype, mask_fn, reduce_hook)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        return a / b
    args = []
    for a in e.args:
        v = yield from evaluate(a, env, dtype, mask_fn, reduce_hook)
        args.append(v)
    if e.fn == "sqrt":
        return np.sqrt(args[0])
    if e.fn == "pow":
        return np.power(args[0], args[1])
    if e.fn == "dropout":
        x = np.asarray(args[0])
        keep = mask_fn(e, x.shape)
        scale = dtype(1.0 / (1.0 - e.rate))
        return np.where(keep, x * scale, dtype(0.0))
    x = np.asarray(args[0])
    if e.fn == "sum":
        partial = np.sum(x, dtype=x.dtype)
        return (yield from reduce_hook("+", np.asarray(partial), e))
    if e.fn == "amax":
        partial = np.max(x) if x.size else np.asarray(-np.inf, dtype=x.dtype)
        return (yield from reduce_hook("max", np.asarray(partial), e))
    # norm: global sum of squares, then the root
    partial = np.sum(x * x, dtype=x.dtype)
    total = yield from reduce_hook("+", np.asarray(partial), e)
    return np.sqrt(total)


def local_reduce(reducer: str, value, call=None):
    """Reduction hook for data that is already complete on this rank."""
    return value
    yield  # pragma: no cover - marks this function as a generator


def run_sync(gen):
    """Drive an evaluation generator that must not communicate."""
    try:
        while True:
            req = next(gen)
            raise RuntimeError(f"unexpected communication request {req!r} in local evaluation")
    except StopIteration as stop:
        return stop.value
