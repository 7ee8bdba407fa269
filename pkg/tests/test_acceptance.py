"""Acceptance suite. Each test carries a ``criterion`` marker; the terminal
summary prints one PASS/FAIL line per criterion."""
import dataclasses
import json
import math
import time

import numpy as np
import pytest

from ccsched import cli
from ccsched.autotune import TuneConfig, enumerate_schedules, rank_key, tune
from ccsched.oracle import compare
from ccsched.runtime import (CommConfig, build_bucket_table, execute, metadata_bytes, plan,
                             production_order, ring_all_gather, ring_all_reduce,
                             ring_reduce_scatter, scattered_collective)
from ccsched.runtime.buckets import metadata_ratio
from ccsched.program import program_from_json
from ccsched.runtime.chunks import chunk_map
from ccsched.runtime.cost import CostModel
from ccsched.tensors import make_inputs, rebase_inputs
from ccsched.transforms import Directive, Schedule, apply_schedule, canonical_form

from conftest import (GOLDENS, golden, golden_source, oracle_values, shipped_schedule,
                      run_schedule)

TOL = 1e-5


# 1. semantics preservation ------------------------------------------------------------------

# (W-independent) size bindings per golden; the larger one reaches 2^18 elements.
SUITE_SIZES = {
    "model_parallel": [dict(B=2, S=8, H=64), dict(B=16, S=256, H=64)],
    "adam": [dict(N=1 << 10), dict(N=1 << 18)],
    "pipeline": [dict(N=1 << 10), dict(N=1 << 18)],
}


@pytest.mark.criterion(1, "every enumerated schedule matches the oracle (W in {2,4}, N <= 2^18, < 60 s)")
def test_criterion_1_semantics_preservation():
    start = time.perf_counter()
    checked = 0
    worst = 0.0
    for name in GOLDENS:
        for world in (2, 4):
            for sizes in SUITE_SIZES[name]:
                base = golden(name, W=world, **sizes)
                inputs = make_inputs(base, 0)
                want = oracle_values(base, inputs)
                for schedule in enumerate_schedules(base):
                    prog = apply_schedule(base, schedule)
                    report = execute(plan(prog), CommConfig(), rebase_inputs(base, prog, inputs),
                                     0, "roundrobin")
                    dev, ok = compare(want, report.global_values(prog), TOL)
                    assert ok, (name, world, sizes, schedule.key(), dev)
                    worst = max(worst, dev)
                    checked += 1
    elapsed = time.perf_counter() - start
    print(f"{checked} runs, worst deviation {worst:.2e}, {elapsed:.1f} s")
    assert max(n for s in SUITE_SIZES.values() for d in s for n in [math.prod(d.values())]) == 1 << 18
    assert elapsed < 60.0


# 2. collective identities -------------------------------------------------------------------


@pytest.mark.criterion(2, "ring RS then AG equals ring AR; byte counters equal ring formulas")
def test_criterion_2_collective_identities():
    rng = np.random.default_rng(2024)
    cfg = CommConfig()
    bw = 4
    for case in range(200):
        world = int(rng.choice([2, 4, 8]))
        n = 1 << int(rng.integers(10, 17))
        inputs = [rng.standard_normal(n).astype(np.float32) for _ in range(world)]
        rs = ring_reduce_scatter(cfg, inputs, byte_width=bw)
        ag = ring_all_gather(cfg, rs.outputs, byte_width=bw)
        ar = ring_all_reduce(cfg, inputs, byte_width=bw)
        exact = np.sum(np.asarray(inputs, dtype=np.float64), axis=0)
        for r in range(world):
            assert compare(ag.outputs[r], ar.outputs[r])[0] <= TOL, case
            assert compare(ar.outputs[r], exact)[0] <= TOL, case
        one_phase = (world - 1) * n * bw // world
        assert rs.comm_bytes == [one_phase] * world
        assert ag.comm_bytes == [one_phase] * world
        assert ar.comm_bytes == [2 * one_phase] * world


# 3. shipped schedules, structurally -----------------------------------------------------------


@pytest.mark.criterion(3, "optimizer schedule gives one fused step and sliced state; pipeline "
                          "schedule cuts inter-group bytes by the group size")
def test_criterion_3_shipped_schedules():
    n, world = 4096, 4
    adam = golden("adam", N=n, W=world)
    fused, report, dev = run_schedule(adam, shipped_schedule("adam_fused"))
    assert dev <= TOL
    assert [x.kind for x in fused.nodes].count("FusedAllReduce") == 1
    assert report.kernel_steps == 1
    for state in ("m", "v"):
        assert fused.decl_map[state].layout.is_sliced
        assert report.memory_elems[state] == n // world

    pipe = golden("pipeline", N=n, W=world)
    assert [g.world_size for g in pipe.groups] == [2, 2]
    _, base_report, _ = run_schedule(pipe, Schedule())
    prog, sched_report, dev = run_schedule(pipe, shipped_schedule("pipeline_overlap"))
    assert dev <= TOL
    groups = [x for x in prog.nodes if x.kind == "OverlapGroup"]
    assert len(groups) == 1
    kinds = [prog.node_map[m].kind for m in groups[0].attrs["members"]]
    assert kinds == ["ReduceScatter", "FusedSend", "AllGather"]
    group_size = pipe.groups[0].world_size
    bw = 2  # F16 activations
    senders = [r for r in range(world) if base_report.inter_group_bytes[r]]
    assert senders == [0, 1]
    for r in senders:
        assert base_report.inter_group_bytes[r] == n * bw
        assert sched_report.inter_group_bytes[r] * group_size == base_report.inter_group_bytes[r]


# 4. scattered tensors -----------------------------------------------------------------------


@pytest.mark.criterion(4, "scattered collective equals contiguous collective; metadata formula")
def test_criterion_4_scattered_tensors():
    rng = np.random.default_rng(44)
    cfg = CommConfig()
    for case in range(50):
        world = int(rng.choice([2, 4]))
        counts = [int(c) for c in rng.integers(1, 3000, size=int(rng.integers(1, 12)))]
        pad = (-sum(counts)) % world
        if pad:
            counts.append(pad)
        table = build_bucket_table([(f"t{i}", c) for i, c in enumerate(counts)],
                                   workers=int(rng.integers(1, 5)))
        per_rank = [[rng.standard_normal(c).astype(np.float32) for c in counts]
                    for _ in range(world)]
        contiguous = [np.concatenate(ts) for ts in per_rank]
        ar = scattered_collective(cfg, table, per_rank, "AllReduce")
        ar_ref = ring_all_reduce(cfg, contiguous)
        rs = scattered_collective(cfg, table, per_rank, "ReduceScatter")
        rs_ref = ring_reduce_scatter(cfg, contiguous)
        for r in range(world):
            assert np.array_equal(np.concatenate(ar.outputs[r]), ar_ref.outputs[r]), case
            assert np.array_equal(rs.outputs[r], rs_ref.outputs[r]), case
        assert ar.comm_bytes == ar_ref.comm_bytes
        assert ar.kernel_steps == 1
        assert all(b.extent <= 1024 for b in table.buckets)

    for total in (1, 1023, 1024, 1025, 2048, 10 ** 6):
        assert metadata_bytes(total) == 12 * math.ceil(total / 1024)
        assert build_bucket_table([("x", total)]).metadata_bytes == metadata_bytes(total)
    ratio = metadata_ratio(334_000_000, 2)
    assert ratio == pytest.approx(12 * math.ceil(334_000_000 / 1024) / (2 * 334_000_000))
    assert round(ratio * 100, 2) == 0.59
    assert round(ratio * 100, 1) == 0.6


# 5. overlap ---------------------------------------------------------------------------------


def _without_overlap(schedule: Schedule) -> Schedule:
    return Schedule(tuple(d for d in schedule.directives if d.kind != "overlap"))


@pytest.mark.criterion(5, "overlapped output equals sequential; overlapped clock <= sequential; "
                          "balanced pipeline <= 0.6 of sequential")
@pytest.mark.parametrize("mode", ["roundrobin", "threads"])
def test_criterion_5_overlap_exact(mode):
    for name, sched in (("model_parallel", "mp_overlap"), ("pipeline", "pipeline_overlap")):
        base = golden(name)
        inputs = make_inputs(base, 5)
        overlapped = shipped_schedule(sched)
        sequential = _without_overlap(overlapped)
        q_ol, r_ol, dev_ol = run_schedule(base, overlapped, seed=5, mode=mode, inputs=inputs)
        q_sq, r_sq, dev_sq = run_schedule(base, sequential, seed=5, mode=mode, inputs=inputs)
        assert dev_ol <= TOL and dev_sq <= TOL
        got, want = r_ol.global_values(q_ol), r_sq.global_values(q_sq)
        assert set(got) == set(want)
        for key in want:
            assert np.array_equal(got[key], want[key]), (name, key)
        assert r_ol.kernel_steps < r_sq.kernel_steps


@pytest.mark.criterion(5, "overlapped output equals sequential; overlapped clock <= sequential; "
                          "balanced pipeline <= 0.6 of sequential")
def test_criterion_5_overlap_never_slower():
    rng = np.random.default_rng(55)
    programs = []
    for name, sched in (("model_parallel", "mp_overlap"), ("pipeline", "pipeline_overlap")):
        base = golden(name)
        overlapped = shipped_schedule(sched)
        programs.append((apply_schedule(base, overlapped),
                         apply_schedule(base, _without_overlap(overlapped))))
    for case in range(100):
        cfg = CommConfig(channels=int(rng.choice([1, 2, 4])),
                         buffer_tile_elems=int(2 ** rng.integers(4, 17)),
                         protocol=str(rng.choice(["ll", "simple"])),
                         alpha=float(rng.uniform(0, 20)), beta=float(10 ** rng.uniform(2, 5)),
                         gamma=float(10 ** rng.uniform(1, 4)), lam=float(rng.uniform(0, 20)))
        for ol_prog, seq_prog in programs:
            t_ol = sum(_step_times(ol_prog, cfg))
            t_seq = sum(_step_times(seq_prog, cfg))
            assert t_ol <= t_seq + 1e-9, (case, cfg)


def _step_times(prog, cfg):
    base_inputs = make_inputs(prog, 0)
    return execute(plan(prog), cfg, base_inputs, 0, "roundrobin").step_times


@pytest.mark.criterion(5, "overlapped output equals sequential; overlapped clock <= sequential; "
                          "balanced pipeline <= 0.6 of sequential")
def test_criterion_5_balanced_pipeline_bound():
    base = golden("model_parallel")
    split = [Directive("split_ar_rs_ag", {"target": "sum", "names": ["rsSum", "agSum"]})]
    seq_prog = apply_schedule(base, Schedule(tuple(split)))
    ol_prog = apply_schedule(base, Schedule(tuple(
        split + [Directive("overlap", {"ids": ["layer", "rsSum"], "names": ["ol"]})])))
    cfg = CommConfig(lam=0.0, buffer_tile_elems=64)
    # rescale compute throughput so the matmul and the reduce-scatter take equal time
    model = CostModel(seq_prog, cfg)
    mm = model.node(seq_prog.node_map["layer"]).busy
    rs = model.node(seq_prog.node_map["rsSum"]).busy
    cfg = dataclasses.replace(cfg, gamma=cfg.gamma * mm / rs)
    model = CostModel(seq_prog, cfg)
    busy = model.node(seq_prog.node_map["layer"]).busy
    assert busy == pytest.approx(model.node(seq_prog.node_map["rsSum"]).busy)

    ol_steps = plan(ol_prog).steps
    seq_steps = plan(seq_prog).steps
    t_ol = dict(zip([s.nodes for s in ol_steps], _step_times(ol_prog, cfg)))
    t_seq = dict(zip([s.nodes for s in seq_steps], _step_times(seq_prog, cfg)))
    overlapped = t_ol[("layer", "rsSum")]
    sequential = t_seq[("layer",)] + t_seq[("rsSum",)]

    world = base.groups[0].world_size
    chunks = len(chunk_map(math.prod(base.info("layer").shape), world, cfg).chunks)
    assert chunks >= 8
    pieces = chunks * world
    # two equal stages of k pieces finish after max + min / k
    assert overlapped == pytest.approx(busy + busy / pieces)
    assert overlapped <= 0.6 * sequential


# 6. autotuner -------------------------------------------------------------------------------


@pytest.mark.criterion(6, "tuner winner is the exhaustive argmin; enumeration deterministic and "
                          "duplicate-free; fused wins at lam=0, AR-Adam at large lam and N=2^10")
@pytest.mark.parametrize("name", GOLDENS)
def test_criterion_6_winner_is_exhaustive_argmin(name):
    cfg = TuneConfig(tensor_sizes=({"B": 2, "S": 8, "H": 64, "N": 4096},))
    report = tune(golden_source(name), cfg)
    base = golden(name)
    times = []
    for cand in report.candidates:
        _, run, dev = run_schedule(base, cand.schedule, cfg.comm, cfg.seed)
        assert dev <= cfg.tol
        assert run.simulated_time == pytest.approx(cand.simulated_time, rel=1e-12)
        times.append((run.simulated_time, run.kernel_steps, cand.schedule.key()))
    assert report.winner == min(range(len(times)), key=times.__getitem__)
    assert report.winner == min(range(len(times)),
                                key=lambda i: rank_key(report.candidates[i], cfg.metric))


@pytest.mark.criterion(6, "tuner winner is the exhaustive argmin; enumeration deterministic and "
                          "duplicate-free; fused wins at lam=0, AR-Adam at large lam and N=2^10")
@pytest.mark.parametrize("name", GOLDENS)
def test_criterion_6_enumeration_deterministic(name):
    base = golden(name)
    first = enumerate_schedules(base)
    second = enumerate_schedules(golden(name))
    assert [s.key() for s in first] == [s.key() for s in second]
    forms = [canonical_form(apply_schedule(base, s)) for s in first]
    assert len(forms) == len(set(forms))


@pytest.mark.criterion(6, "tuner winner is the exhaustive argmin; enumeration deterministic and "
                          "duplicate-free; fused wins at lam=0, AR-Adam at large lam and N=2^10")
def test_criterion_6_zero_launch_overhead_prefers_fused():
    cfg = TuneConfig(tensor_sizes=({"N": 1 << 16},), comm=CommConfig(lam=0.0))
    report = tune(golden_source("adam"), cfg)
    families = {c.family for c in report.candidates}
    assert {"AR-C", "RS-C-AG", "fuse(RS-C-AG)"} <= families
    assert report.candidates[report.winner].family == "fuse(RS-C-AG)"


@pytest.mark.criterion(6, "tuner winner is the exhaustive argmin; enumeration deterministic and "
                          "duplicate-free; fused wins at lam=0, AR-Adam at large lam and N=2^10")
def test_criterion_6_large_launch_overhead_prefers_allreduce():
    cfg = TuneConfig(tensor_sizes=({"N": 1 << 10},), comm=CommConfig(lam=1000.0))
    report = tune(golden_source("adam"), cfg)
    winner = report.candidates[report.winner]
    ranked = sorted(report.candidates, key=lambda c: c.simulated_time)
    print("ranking:", [(c.family, round(c.simulated_time, 2), c.kernel_steps) for c in ranked[:4]])
    assert winner.family == "AR-C"


# 7. determinism -----------------------------------------------------------------------------


@pytest.mark.criterion(7, "repeated run/tune invocations give byte-identical JSON in both modes")
@pytest.mark.parametrize("mode", ["threads", "roundrobin"])
@pytest.mark.parametrize("argv", [
    ["run", "model_parallel", "--schedule", "mp_overlap", "--seed", "7"],
    ["run", "adam", "--schedule", "adam_fused", "--size", "N=65536", "--seed", "3"],
    ["run", "pipeline", "--schedule", "pipeline_overlap", "--seed", "1"],
    ["tune", "adam", "--size", "N=4096", "--seed", "2"],
    ["tune", "pipeline", "--seed", "2"],
])
def test_criterion_7_byte_identical_reports(tmp_path, argv, mode):
    outputs = []
    for attempt in range(2):
        out = tmp_path / f"report{attempt}.json"
        assert cli.main(argv + ["--mode", mode, "--out", str(out)]) == 0
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]
    json.loads(outputs[0])


# supporting checks --------------------------------------------------------------------------


def test_production_order_rotates_from_rank():
    assert production_order(3, 16) == list(range(3, 16)) + [0, 1, 2]


def test_fused_traffic_saving_is_two_tensor_passes():
    n, world = 4096, 4
    base = golden("adam", N=n, W=world)
    # a scalar-only pointwise stage between reduce-scatter and all-gather
    src = golden_source("adam")
    src = dict(src, nodes=[
        {"id": "avg", "kind": "AllReduce", "attrs": {"reducer": "+"}, "inputs": ["g"]},
        {"id": "scaled", "kind": "Pointwise", "attrs": {"expr": "avg * lr"}, "inputs": ["avg", "lr"]},
    ], outputs=["scaled"])
    prog = program_from_json(src, {"N": n, "W": world})
    unfused = apply_schedule(prog, Schedule((
        Directive("split_ar_rs_ag", {"target": "avg", "names": ["rs", "ag"]}),
        Directive("reorder_allgather", {"ag": "ag", "comps": ["scaled"], "names": ["sc", "ag2"]}),
    )))
    fused = apply_schedule(unfused, Schedule((
        Directive("fuse_allreduce", {"rs": "rs", "comps": ["sc"], "ag": "ag2", "names": ["f"]}),)))
    bw = base.decl_map["g"].elem.byte_width

    def traffic(p):
        model = CostModel(p, CommConfig())
        return sum(model.node(x).traffic_bytes for x in p.nodes)

    plain = apply_schedule(prog, Schedule())
    saving_vs_ar = traffic(plain) - traffic(fused)
    assert saving_vs_ar == 2 * n * bw
    r_fused = run_schedule(prog, Schedule((
        Directive("split_ar_rs_ag", {"target": "avg", "names": ["rs", "ag"]}),
        Directive("reorder_allgather", {"ag": "ag", "comps": ["scaled"], "names": ["sc", "ag2"]}),
        Directive("fuse_allreduce", {"rs": "rs", "comps": ["sc"], "ag": "ag2", "names": ["f"]}),
    )))[1]
    r_plain = run_schedule(prog, Schedule())[1]
    assert r_plain.traffic_bytes[0] - r_fused.traffic_bytes[0] == 2 * n * bw
