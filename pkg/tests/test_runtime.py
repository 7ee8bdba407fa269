import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccsched import prng
from ccsched.errors import DivisibilityError, InvalidInput, NoSuchRank, ProgramError, ShapeMismatch
from ccsched.program import Layout, ProcessGroup, build_program, program_from_json
from ccsched.runtime import (CommConfig, build_bucket_table, chunk_map, execute,
                             fused_all_reduce, p2p_send_recv, plan, production_order,
                             ring_all_gather, ring_all_reduce, ring_reduce_scatter,
                             scattered_collective)
from ccsched.runtime.cost import overlap_makespan, ring_phase_time
from ccsched.tensors import make_inputs
from ccsched.transforms import Schedule, apply_schedule

from conftest import golden, shipped_schedule, run_schedule

CFG = CommConfig()
worlds = st.sampled_from([1, 2, 4, 8])


def constant_inputs(world, n):
    return [np.full(n, r + 1, dtype=np.float32) for r in range(world)]


class TestRingCollectives:
    def test_reduce_scatter_of_constants(self):
        res = ring_reduce_scatter(CFG, constant_inputs(4, 8))
        assert all(np.array_equal(o, np.full(2, 10.0)) for o in res.outputs)

    def test_all_gather_of_pairs(self):
        res = ring_all_gather(CFG, [np.array([r, r], dtype=np.float32) for r in range(4)])
        for o in res.outputs:
            assert o.tolist() == [0, 0, 1, 1, 2, 2, 3, 3]

    def test_all_reduce_of_constants(self):
        res = ring_all_reduce(CFG, constant_inputs(4, 16))
        assert all(np.array_equal(o, np.full(16, 10.0)) for o in res.outputs)

    def test_single_rank_is_a_copy(self):
        x = np.arange(6, dtype=np.float32)
        for op in (ring_all_reduce, ring_reduce_scatter, ring_all_gather):
            res = op(CFG, [x])
            assert np.array_equal(res.outputs[0], x)
            assert res.comm_bytes == [0]

    def test_unknown_reducer(self):
        with pytest.raises(InvalidInput):
            ring_all_reduce(CFG, constant_inputs(2, 4), "min")

    def test_ranks_must_agree_on_shape(self):
        with pytest.raises(ShapeMismatch):
            ring_all_reduce(CFG, [np.zeros(4), np.zeros(8)])

    @settings(max_examples=40, deadline=None)
    @given(world=worlds, log_n=st.integers(3, 12), seed=st.integers(0, 2 ** 32 - 1),
           channels=st.sampled_from([1, 2, 4]), tile=st.sampled_from([64, 256, 1 << 16]),
           reducer=st.sampled_from(["+", "max"]))
    def test_all_reduce_matches_sequential_reduction(self, world, log_n, seed, channels, tile,
                                                     reducer):
        cfg = CommConfig(channels=channels, buffer_tile_elems=tile)
        n = world << log_n
        rng = np.random.default_rng(seed)
        inputs = [rng.standard_normal(n).astype(np.float32) for _ in range(world)]
        stacked = np.asarray(inputs, dtype=np.float64)
        want = stacked.sum(0) if reducer == "+" else stacked.max(0)
        res = ring_all_reduce(cfg, inputs, reducer)
        for o in res.outputs:
            assert np.max(np.abs(o - want)) <= 1e-5 * max(np.max(np.abs(want)), 1e-12)

    @settings(max_examples=30, deadline=None)
    @given(world=worlds, rows=st.integers(1, 4), seed=st.integers(0, 1000))
    def test_gather_inverts_scatter_on_any_axis(self, world, rows, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((rows, 2 * world, 3)).astype(np.float32)
        parts = np.split(x, world, axis=1)
        res = ring_all_gather(CFG, parts, dim=1)
        assert all(np.array_equal(o, x) for o in res.outputs)

    def test_modes_agree_bit_for_bit(self):
        rng = np.random.default_rng(3)
        inputs = [rng.standard_normal(4096).astype(np.float32) for _ in range(4)]
        a = ring_all_reduce(CFG, inputs, mode="threads")
        b = ring_all_reduce(CFG, inputs, mode="roundrobin")
        assert all(np.array_equal(x, y) for x, y in zip(a.outputs, b.outputs))
        assert a.comm_bytes == b.comm_bytes


class TestChunks:
    def test_production_order_of_rank_three(self):
        assert production_order(3, 16) == [3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 0, 1, 2]

    @given(world=st.sampled_from([1, 2, 4, 8]), block=st.integers(1, 5000),
           channels=st.sampled_from([1, 2, 4]), tile_log=st.integers(3, 16))
    def test_chunks_tile_each_block_exactly(self, world, block, channels, tile_log):
        cfg = CommConfig(channels=channels, buffer_tile_elems=1 << tile_log)
        cm = chunk_map(block * world, world, cfg)
        covered = np.zeros(block, dtype=int)
        for c in cm.chunks:
            covered[c.start:c.stop] += 1
        assert covered.tolist() == [1] * block
        per_round = max(cfg.buffer_tile_elems // world, 1)
        assert all(size <= per_round for size in cm.round_sizes())

    @given(rank=st.integers(0, 63), n=st.integers(1, 64))
    def test_production_order_is_a_rotation(self, rank, n):
        order = production_order(rank % n, n)
        assert sorted(order) == list(range(n))
        assert order[0] == rank % n

    def test_indivisible_total(self):
        with pytest.raises(ValueError):
            chunk_map(10, 4, CFG)


class TestDropoutMasks:
    @settings(max_examples=30)
    @given(seed=st.integers(0, 2 ** 32), n=st.integers(1, 2000), parts=st.sampled_from([1, 2, 4]),
           rate=st.floats(0.0, 0.9))
    def test_slices_draw_the_bits_of_the_whole(self, seed, n, parts, rate):
        n = n * parts
        whole = prng.keep_mask(seed, "drop", rate, np.arange(n))
        pieces = [prng.keep_mask(seed, "drop", rate, idx)
                  for idx in np.array_split(np.arange(n), parts)]
        assert np.array_equal(np.concatenate(pieces), whole)

    def test_keys_and_seeds_change_the_stream(self):
        idx = np.arange(4096)
        base = prng.uniforms(1, "a", idx)
        assert not np.array_equal(base, prng.uniforms(2, "a", idx))
        assert not np.array_equal(base, prng.uniforms(1, "b", idx))
        assert 0.45 < base.mean() < 0.55


class TestFusedAllReduce:
    def test_identity_expression_equals_plain_all_reduce(self):
        rng = np.random.default_rng(9)
        inputs = [rng.standard_normal(1024).astype(np.float32) for _ in range(4)]
        fused = fused_all_reduce(CFG, inputs)
        plain = ring_all_reduce(CFG, inputs)
        assert all(np.array_equal(a, b) for a, b in zip(fused.outputs, plain.outputs))
        assert fused.comm_bytes == plain.comm_bytes

    def test_expression_with_operands(self):
        rng = np.random.default_rng(10)
        inputs = [rng.standard_normal(64).astype(np.float32) for _ in range(4)]
        bias = rng.standard_normal(64).astype(np.float32)
        scale = rng.standard_normal(64).astype(np.float32)
        res = fused_all_reduce(CFG, inputs, "x * s + b",
                               {"b": (bias, Layout("replicated")), "s": (scale, Layout.sliced(0))})
        want = np.sum(np.asarray(inputs, dtype=np.float64), 0) * scale + bias
        for o in res.outputs:
            assert np.max(np.abs(o - want)) <= 1e-5 * np.max(np.abs(want))

    def test_unfused_and_fused_model_parallel_agree(self):
        base = golden("model_parallel")
        sched = shipped_schedule("mp_overlap")
        upto_two = Schedule(sched.directives[:2])
        upto_three = Schedule(sched.directives[:3])
        inputs = make_inputs(base, 4)
        q2, r2, d2 = run_schedule(base, upto_two, seed=4, inputs=inputs)
        q3, r3, d3 = run_schedule(base, upto_three, seed=4, inputs=inputs)
        assert d2 <= 1e-5 and d3 <= 1e-5
        a, b = r2.global_values(q2), r3.global_values(q3)
        assert max(np.max(np.abs(a[k] - b[k])) / np.max(np.abs(a[k])) for k in a) <= 1e-5


class TestPointToPoint:
    def test_exchange(self):
        payloads = {0: np.arange(4), 1: np.arange(4) * 2}
        got, counters = p2p_send_recv(payloads, {0: 2, 1: 3}, 4, byte_width=2,
                                      rank_group=(0, 0, 1, 1))
        assert got[2].tolist() == [0, 1, 2, 3] and got[3].tolist() == [0, 2, 4, 6]
        assert counters.inter_group_bytes == [8, 8, 0, 0]

    def test_destination_outside_world(self):
        with pytest.raises(NoSuchRank):
            p2p_send_recv({0: np.zeros(2)}, {0: 5}, 2)

    def test_pipeline_sends_full_tensor_before_and_slice_after(self):
        n = 4096
        base = golden("pipeline", N=n)
        _, before, _ = run_schedule(base, Schedule())
        _, after, _ = run_schedule(base, shipped_schedule("pipeline_overlap"))
        assert before.inter_group_bytes[:2] == [n * 2, n * 2]
        assert after.inter_group_bytes[:2] == [n * 2 // 2, n * 2 // 2]


class TestBuckets:
    def test_two_buckets_for_2048(self):
        assert [b.extent for b in build_bucket_table([("x", 2048)]).buckets] == [1024, 1024]

    def test_buckets_do_not_span_tensors(self):
        assert [b.extent for b in build_bucket_table([("a", 1000), ("b", 25)]).buckets] == [1000, 25]

    @given(st.lists(st.integers(1, 5000), min_size=1, max_size=20), st.integers(1, 8))
    def test_buckets_cover_every_element_once(self, counts, workers):
        table = build_bucket_table([(f"t{i}", c) for i, c in enumerate(counts)], workers)
        seen = [np.zeros(c, dtype=int) for c in counts]
        for b in table.buckets:
            assert 0 < b.extent <= 1024
            seen[b.tensor][b.offset:b.offset + b.extent] += 1
        assert all((s == 1).all() for s in seen)
        assert table.metadata_bytes == 12 * len(table.buckets)
        data = [np.arange(c, dtype=np.float32) + 1000 * i for i, c in enumerate(counts)]
        back = table.unpack(table.pack(data), [d.shape for d in data])
        assert all(np.array_equal(a, b) for a, b in zip(back, data))

    def test_many_mixed_tensors_in_one_kernel(self):
        rng = np.random.default_rng(360)
        counts = [int(c) for c in rng.integers(1, 400, 360)]
        counts.append((-sum(counts)) % 4 or 4)
        table = build_bucket_table([(f"t{i}", c) for i, c in enumerate(counts)], workers=3)
        per_rank = [[rng.standard_normal(c).astype(np.float32) for c in counts] for _ in range(4)]
        res = scattered_collective(CFG, table, per_rank)
        ref = ring_all_reduce(CFG, [np.concatenate(ts) for ts in per_rank])
        assert res.kernel_steps == 1
        assert all(np.array_equal(np.concatenate(a), b) for a, b in zip(res.outputs, ref.outputs))

    def test_one_tensor_equals_plain_collective(self):
        x = [np.arange(1024, dtype=np.float32) * (r + 1) for r in range(2)]
        res = scattered_collective(CFG, build_bucket_table([("x", 1024)]), [[v] for v in x])
        ref = ring_all_reduce(CFG, x)
        assert all(np.array_equal(a[0], b) for a, b in zip(res.outputs, ref.outputs))

    def test_reduce_scatter_needs_divisible_total(self):
        table = build_bucket_table([("x", 7)])
        with pytest.raises(DivisibilityError):
            scattered_collective(CFG, table, [[np.zeros(7)], [np.zeros(7)]], "ReduceScatter")


class TestPlanAndExecute:
    def test_program_five_is_one_overlap_step(self):
        p = apply_schedule(golden("model_parallel"), shipped_schedule("mp_overlap"))
        kernel = [s for s in plan(p).steps if s.kind != "view"]
        assert [s.kind for s in kernel] == ["overlap"]

    def test_model_parallel_has_four_steps(self):
        assert plan(golden("model_parallel")).kernel_steps == 4

    def test_empty_program(self):
        p = build_program("empty", (ProcessGroup(0, 2, 0),), [], [], ())
        assert plan(p).steps == () or list(plan(p).steps) == []

    def test_single_rank_collectives_are_exact(self):
        src = {"name": "copies", "groups": [{"id": 0, "size": 1}],
               "tensors": [{"name": "x", "elem": "F32", "shape": [16], "layout": {"kind": "Local"},
                            "group": 0}],
               "nodes": [
                   {"id": "ar", "kind": "AllReduce", "attrs": {"reducer": "+"}, "inputs": ["x"]},
                   {"id": "y", "kind": "Pointwise", "attrs": {"expr": "ar * 3 - 1"},
                    "inputs": ["ar"]},
                   {"id": "rs", "kind": "ReduceScatter", "attrs": {"reducer": "+"},
                    "inputs": ["x"]},
                   {"id": "ag", "kind": "AllGather", "attrs": {}, "inputs": ["rs"]},
                   {"id": "z", "kind": "Pointwise", "attrs": {"expr": "ag + y"},
                    "inputs": ["ag", "y"]}],
               "outputs": ["z"]}
        base = program_from_json(src)
        inputs = make_inputs(base, 0, integer=True)
        _, report, dev = run_schedule(base, Schedule(), inputs=inputs)
        assert dev == 0.0
        assert report.comm_bytes == [0]

    def test_invalid_program_is_refused(self):
        src = {"name": "bad", "groups": [{"id": 0, "size": 2}],
               "tensors": [{"name": "x", "elem": "F32", "shape": [4],
                            "layout": {"kind": "Replicated"}, "group": 0}],
               "nodes": [{"id": "ag", "kind": "AllGather", "attrs": {}, "inputs": ["x"]}],
               "outputs": ["ag"]}
        p = program_from_json(src)
        with pytest.raises(ProgramError):
            execute(plan(p), CFG, make_inputs(p, 0), 0)

    @pytest.mark.parametrize("name,sched", [("model_parallel", "mp_overlap"),
                                            ("adam", "adam_fused"),
                                            ("pipeline", "pipeline_overlap")])
    def test_thread_and_round_robin_drivers_agree(self, name, sched):
        base = golden(name)
        _, a, _ = run_schedule(base, shipped_schedule(sched), mode="threads")
        _, b, _ = run_schedule(base, shipped_schedule(sched), mode="roundrobin")
        assert a.dumps() == b.dumps()

    def test_fused_optimizer_keeps_quarter_of_state(self):
        _, report, dev = run_schedule(golden("adam", N=1 << 16), shipped_schedule("adam_fused"))
        assert dev <= 1e-5 and report.kernel_steps == 1
        assert report.memory_elems["m"] == report.memory_elems["v"] == (1 << 16) // 4

    def test_overlap_records_rotated_production(self):
        p = apply_schedule(golden("model_parallel"), shipped_schedule("mp_overlap"))
        report = execute(plan(p), CFG, make_inputs(p, 0), 0, "roundrobin")
        orders = report.production_orders["layer"]
        for rank, order in orders.items():
            blocks = [block for _, block in order]
            assert blocks[0] == rank


class TestCostModel:
    @given(st.lists(st.tuples(st.sampled_from(["net", "compute", "p2p"]),
                              st.floats(0, 100)), min_size=1, max_size=5),
           st.integers(1, 64))
    def test_makespan_between_bottleneck_and_serial(self, members, pieces):
        span = overlap_makespan(members, pieces)
        per_resource = {}
        for res, busy in members:
            per_resource[res] = per_resource.get(res, 0.0) + busy
        assert span <= sum(b for _, b in members) + 1e-9
        assert span >= max(per_resource.values()) - 1e-9

    @given(st.floats(0.1, 100), st.integers(1, 256))
    def test_two_equal_stages(self, busy, pieces):
        span = overlap_makespan([("compute", busy), ("net", busy)], pieces)
        assert span == pytest.approx(busy + busy / pieces)

    def test_ring_phase_formula(self):
        cfg = CommConfig(channels=1, buffer_tile_elems=1 << 20, alpha=3.0, beta=100.0)
        # one round; each of the W-1 steps moves one N/W block
        assert ring_phase_time(4096, 4, 2, cfg) == pytest.approx(3 * (3.0 + 1024 * 2 / 100.0))

    def test_more_rounds_pay_more_latency(self):
        small = CommConfig(buffer_tile_elems=64)
        big = CommConfig(buffer_tile_elems=1 << 16)
        assert ring_phase_time(4096, 4, 4, small) > ring_phase_time(4096, 4, 4, big)

    def test_ll_protocol_changes_effective_parameters(self):
        ll = dataclasses.replace(CFG, protocol="ll")
        assert (ll.alpha_eff, ll.beta_eff) != (CFG.alpha_eff, CFG.beta_eff)
