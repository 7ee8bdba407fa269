"""Command-line driver: check, transform, run, tune, oracle and diff."""
from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from .autotune import TuneConfig, tune
from .errors import CcschedError, ParseError
from .oracle import compare, oracle_execute
from .program import (Program, errors_only, layout_listing, program_from_json, program_to_json,
                      validate_program)
from .runtime.config import CommConfig
from .runtime.executor import execute, plan
from .tensors import digest, make_inputs, rebase_inputs, write_tensor
from .transforms import Schedule, apply_schedule, canonical_form, schedule_from_json

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2
DEFAULT_SIZES = {"B": 2, "S": 8, "H": 64, "N": 4096}
DEFAULT_RANKS = 4


class UsageError(Exception):
    pass


# Argument helpers ------------------------------------------------------------------------


def parse_size(text: str) -> dict:
    """``"B=2,S=8,H=64"``, ``"N=65536"`` or a bare element count."""
    text = text.strip()
    if text.isdigit():
        return {"N": int(text)}
    out = {}
    for part in text.split(","):
        key, sep, value = part.partition("=")
        if not sep or not key.strip() or not value.strip().isdigit():
            raise argparse.ArgumentTypeError(f"bad size binding {part!r}")
        out[key.strip()] = int(value)
    return out


def _data_file(kind: str, name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    stem = path.name if path.suffix == ".json" else f"{path.name}.json"
    packaged = resources.files("ccsched").joinpath(kind, stem)
    if packaged.is_file():
        return Path(str(packaged))
    raise UsageError(f"no such file: {name}")


def _load_json(kind: str, name: str) -> dict:
    path = _data_file(kind, name)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None


def _sizes(args) -> list:
    bound = args.size or [{}]
    return [dict(DEFAULT_SIZES, **s) for s in bound]


def _program(args, name: str, sizes: dict) -> Program:
    return program_from_json(_load_json("goldens", name), dict(sizes, W=args.ranks))


def _schedule(args) -> Schedule:
    if not getattr(args, "schedule", None):
        return Schedule()
    return schedule_from_json(_load_json("schedules", args.schedule))


def _comm(args) -> CommConfig:
    base = CommConfig()
    try:
        return CommConfig(
            channels=args.channels if args.channels is not None else base.channels,
            buffer_tile_elems=args.tile if args.tile is not None else base.buffer_tile_elems,
            protocol=args.protocol or base.protocol,
            alpha=args.alpha if args.alpha is not None else base.alpha,
            beta=args.beta if args.beta is not None else base.beta,
            gamma=args.gamma if args.gamma is not None else base.gamma,
            lam=args.lam if args.lam is not None else base.lam,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _emit(args, text: str):
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _table(rows: list, out=None):
    out = out or sys.stdout
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        out.write("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() + "\n")


# Subcommands --------------------------------------------------------------------------------


def cmd_check(args) -> int:
    p = _program(args, args.program, _sizes(args)[0])
    diags = validate_program(p)
    rows = [("node", "kind", "shape", "layout", "group")]
    for nid, kind, shape, layout, group in layout_listing(p):
        rows.append((nid, kind, list(shape) if shape is not None else "?",
                     layout if layout is not None else "?", group if group is not None else "?"))
    _table(rows)
    for d in diags:
        print(d)
    return EXIT_INVALID if errors_only(diags) else EXIT_OK


def cmd_transform(args) -> int:
    p = _program(args, args.program, _sizes(args)[0])
    q = apply_schedule(p, _schedule(args))
    obj = {"program": program_to_json(q),
           "provenance": {new: list(old) for new, old in q.provenance}}
    _emit(args, json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _positional(p: Program, values: dict) -> dict:
    out = {}
    for k, v in values.items():
        out[f"out#{p.outputs.index(k[4:])}" if k.startswith("out:") else k] = v
    return out


def cmd_run(args) -> int:
    base = _program(args, args.program, _sizes(args)[0])
    prog = apply_schedule(base, _schedule(args))
    cfg = _comm(args)
    inputs = make_inputs(base, args.seed)
    want = _positional(base, oracle_execute(base, inputs, args.seed).values())
    report = execute(plan(prog), cfg, rebase_inputs(base, prog, inputs), args.seed, args.mode)
    dev, ok = compare(want, report.global_values(prog), args.tol)
    report.deviation = dev
    text = report.dumps()
    if args.out:
        Path(args.out).write_text(text)
        _table([("program", "ranks", "kernel_steps", "simulated_time", "wall_time", "deviation"),
                (prog.name, report.world, report.kernel_steps, f"{report.simulated_time:.3f}",
                 f"{report.wall_time:.4f}", f"{dev:.3e}")])
    else:
        sys.stdout.write(text)
    if not ok:
        print(f"deviation {dev:.3e} exceeds tolerance {args.tol}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def cmd_tune(args) -> int:
    source = _load_json("goldens", args.program)
    cfg = TuneConfig(fusion_threshold=args.fusion_threshold, world_sizes=(args.ranks,),
                     tensor_sizes=tuple(_sizes(args)), metric=args.metric, seed=args.seed,
                     comm=_comm(args), tol=args.tol, mode=args.mode)
    report = tune(source, cfg)
    text = report.dumps()
    if args.out:
        Path(args.out).write_text(text)
        rows = [("#", "family", "simulated_time", "kernel_steps", "deviation")]
        for i, c in enumerate(report.candidates):
            mark = "*" if i == report.winner else ""
            rows.append((f"{i}{mark}", c.family, f"{c.simulated_time:.3f}", c.kernel_steps,
                         f"{c.deviation:.2e}"))
        _table(rows)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_oracle(args) -> int:
    p = _program(args, args.program, _sizes(args)[0])
    inputs = make_inputs(p, args.seed)
    values = oracle_execute(p, inputs, args.seed).values()
    summary = {"program": p.name, "digest": digest(values),
               "values": {k: list(v.shape) for k, v in sorted(values.items())}}
    if args.out:
        out_dir = Path(args.out)
        for name, v in values.items():
            write_tensor(out_dir / (name.replace(":", "_") + ".bin"), name, v)
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _node_signature(p: Program, nid: str) -> str:
    n = p.node_map[nid]
    attrs = {k: v for k, v in program_to_json(p)["nodes"][p.nodes.index(n)]["attrs"].items()}
    return json.dumps({"kind": n.kind, "inputs": list(n.inputs), "attrs": attrs}, sort_keys=True)


def structural_diff(a: Program, b: Program) -> list:
    """Lines ``- id ...`` / ``+ id ...`` / ``~ id ...`` describing how ``b`` differs."""
    if canonical_form(a) == canonical_form(b):
        return []
    lines = []
    for n in a.nodes:
        if n.id not in b.node_map:
            lines.append(f"- {n.id} {n.kind}({', '.join(n.inputs)})")
    for n in b.nodes:
        if n.id not in a.node_map:
            lines.append(f"+ {n.id} {n.kind}({', '.join(n.inputs)})")
        elif _node_signature(a, n.id) != _node_signature(b, n.id):
            lines.append(f"~ {n.id} {n.kind}({', '.join(n.inputs)})")
    for d in b.decls:
        old = a.decl_map.get(d.name)
        if old is not None and old.layout != d.layout:
            lines.append(f"~ tensor {d.name}: {old.layout} -> {d.layout}")
    if tuple(a.outputs) != tuple(b.outputs):
        lines.append(f"~ outputs {list(a.outputs)} -> {list(b.outputs)}")
    return lines


def cmd_diff(args) -> int:
    sizes = _sizes(args)[0]
    a = _program(args, args.program, sizes)
    b = _program(args, args.other, sizes)
    for line in structural_diff(a, b):
        print(line)
    return EXIT_OK


# Parser ----------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccsched", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, schedule=False, cost=False):
        p.add_argument("program", help="program JSON path or packaged golden name")
        p.add_argument("--ranks", type=int, default=DEFAULT_RANKS)
        p.add_argument("--size", type=parse_size, action="append",
                       help="size bindings, e.g. B=2,S=8,H=64 or N=65536 (repeatable)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out")
        if schedule:
            p.add_argument("--schedule", help="schedule JSON path or packaged schedule name")
        if cost:
            p.add_argument("--channels", type=int)
            p.add_argument("--protocol", choices=("ll", "simple"))
            p.add_argument("--alpha", type=float)
            p.add_argument("--beta", type=float)
            p.add_argument("--gamma", type=float)
            p.add_argument("--lambda", dest="lam", type=float)
            p.add_argument("--tile", type=int)
            p.add_argument("--tol", type=float, default=1e-5)
            p.add_argument("--mode", choices=("threads", "roundrobin"), default="threads",
                           help="rank driver: one thread per rank or single-threaded round robin")

    common(sub.add_parser("check", help="validate and list inferred layouts"))
    common(sub.add_parser("transform", help="apply a schedule"), schedule=True)
    common(sub.add_parser("run", help="execute and compare with the oracle"), schedule=True,
           cost=True)
    tune_p = sub.add_parser("tune", help="search schedules and report the fastest")
    common(tune_p, cost=True)
    tune_p.add_argument("--fusion-threshold", type=int, default=16)
    tune_p.add_argument("--metric", choices=("simulated_clock", "wall_clock"),
                        default="simulated_clock")
    common(sub.add_parser("oracle", help="evaluate the reference semantics"))
    diff_p = sub.add_parser("diff", help="structural difference of two programs")
    common(diff_p)
    diff_p.add_argument("other")
    return parser


HANDLERS = {"check": cmd_check, "transform": cmd_transform, "run": cmd_run, "tune": cmd_tune,
            "oracle": cmd_oracle, "diff": cmd_diff}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.ranks < 1:
        print("error: --ranks must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return HANDLERS[args.command](args)
    except (ParseError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CcschedError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
