"""Per-rank tensor values: generation, slicing, assembly and file I/O."""
from __future__ import annotations

import hashlib
import json
import zlib
from pathlib import Path

import numpy as np

from .program import ElemType, Layout, Program, RefInfo, TensorDecl


def slice_index(ndim: int, dim: int, start: int, stop: int) -> tuple:
    idx = [slice(None)] * ndim
    idx[dim] = slice(start, stop)
    return tuple(idx)


def take_part(arr: np.ndarray, dim: int, part: int, parts: int) -> np.ndarray:
    n = arr.shape[dim] // parts
    return arr[slice_index(arr.ndim, dim, part * n, (part + 1) * n)]


def local_shape(shape: tuple, layout: Layout, world: int) -> tuple:
    if layout.is_sliced:
        shape = list(shape)
        shape[layout.dim] //= world
        return tuple(shape)
    return tuple(shape)


def _rng(seed: int, name: str, extra: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode()), extra])


def _fill(decl: TensorDecl, rng: np.random.Generator, shape: tuple, integer: bool) -> np.ndarray:
    init = dict(decl.init)
    kind = init.get("kind", "uniform")
    if kind == "const":
        return np.full(shape, init["value"], dtype=np.float32)
    low = float(init.get("low", -1.0))
    high = float(init.get("high", 1.0))
    if integer or kind == "randint":
        lo, hi = int(np.floor(low * 4)), int(np.ceil(high * 4))
        if kind == "randint":
            lo, hi = int(low), int(high)
        return rng.integers(lo, hi + 1, size=shape).astype(np.float32)
    return rng.uniform(low, high, size=shape).astype(np.float32)


def make_inputs(p: Program, seed: int = 0, integer: bool = False) -> dict:
    """Deterministic per-rank inputs: name -> list of local arrays, one per rank.

    Replicated tensors are identical on every rank and sliced tensors are
    slices of one global value, so any program that shares these declarations
    (before or after ``as_slice``) sees the same global data.
    """
    out = {}
    for d in p.decls:
        world = p.group_map[d.group].world_size
        if d.layout.kind == "local":
            out[d.name] = [_fill(d, _rng(seed, d.name, r + 1), d.shape, integer) for r in range(world)]
            continue
        full = _fill(d, _rng(seed, d.name), d.shape, integer)
        out[d.name] = distribute(full, d.layout, world)
    return out


def distribute(full: np.ndarray, layout: Layout, world: int) -> list:
    if layout.is_sliced:
        return [np.ascontiguousarray(take_part(full, layout.dim, r, world)) for r in range(world)]
    return [full.copy() for _ in range(world)]


def global_value(parts: list, layout: Layout) -> np.ndarray:
    """Assemble per-rank values into the global form used for comparisons.

    Local tensors keep one entry per rank along a new leading axis.
    """
    if layout.is_sliced:
        return np.concatenate(parts, axis=layout.dim)
    if layout.kind == "local":
        return np.stack(parts)
    return parts[0]


def rebase_inputs(src: Program, dst: Program, inputs: dict) -> dict:
    """Re-distribute inputs made for ``src`` to match ``dst``'s declarations."""
    out = {}
    for d in dst.decls:
        s = src.decl_map[d.name]
        world = dst.group_map[d.group].world_size
        if s.layout == d.layout:
            out[d.name] = [a.copy() for a in inputs[d.name]]
        else:
            out[d.name] = distribute(global_value(inputs[d.name], s.layout), d.layout, world)
    return out


def digest(values: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(values):
        arr = np.ascontiguousarray(values[name], dtype=np.float32)
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.astype("<f4").tobytes())
    return h.hexdigest()


def write_tensor(path: Path, name: str, arr: np.ndarray, elem: ElemType = ElemType.F32):
    """Little-endian float32 row-major data plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps({"name": name, "shape": list(arr.shape), "elem": elem.value},
                                  sort_keys=True) + "\n")


def read_tensor(path: Path) -> tuple:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["shape"])
    return meta["name"], data.astype(np.float32), ElemType(meta["elem"])


def info_local_size(info: RefInfo, world: int) -> int:
    return int(np.prod(local_shape(info.shape, info.layout, world), dtype=np.int64))
