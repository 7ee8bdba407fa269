import pytest
from hypothesis import given, settings, strategies as st

from ccsched.autotune import (Candidate, TuneConfig, depth_bound, enumerate_schedules, family,
                              fusion_prepass, rank_key, tune)
from ccsched.errors import CandidateFailed
from ccsched.program import program_from_json
from ccsched.runtime import CommConfig
from ccsched.transforms import Schedule, apply_schedule, canonical_form

from conftest import GOLDENS, golden, golden_source


def families(name, **sizes):
    base = golden(name, **sizes)
    return [family(apply_schedule(base, s)) for s in enumerate_schedules(base)]


def no_comm_program():
    return program_from_json({
        "name": "local", "groups": [{"id": 0, "size": 2}],
        "tensors": [{"name": "x", "elem": "F32", "shape": [8], "layout": {"kind": "Replicated"},
                     "group": 0}],
        "nodes": [{"id": "a", "kind": "Pointwise", "attrs": {"expr": "x + 1"}, "inputs": ["x"]},
                  {"id": "b", "kind": "Pointwise", "attrs": {"expr": "a * a"}, "inputs": ["a"]}],
        "outputs": ["b"]})


class TestEnumeration:
    def test_optimizer_families(self):
        assert {"AR-C", "RS-C-AG", "fuse(RS-C-AG)"} <= set(families("adam"))

    def test_model_parallel_families(self):
        assert {"MM-AR-C", "MM-RS-C-AG", "ol(MM,fuse(RS-C-AG))"} <= set(families("model_parallel"))

    def test_no_communication_gives_only_the_fusion_schedule(self):
        p = no_comm_program()
        schedules = enumerate_schedules(p)
        assert len(schedules) == 1
        assert [d.kind for d in schedules[0].directives] == ["fuse_computation"]

    def test_prepass_respects_threshold(self):
        adam = golden("adam")
        chunks = fusion_prepass(adam, 2)
        assert all(len(d.args["ids"]) <= 2 for d in chunks)
        assert sum(len(d.args["ids"]) for d in chunks) >= 4

    @settings(max_examples=12, deadline=None)
    @given(name=st.sampled_from(GOLDENS), threshold=st.integers(1, 8))
    def test_prepass_parts_always_apply(self, name, threshold):
        base = golden(name)
        pre = fusion_prepass(base, threshold)
        fused = apply_schedule(base, Schedule(tuple(pre)))
        assert len(fused.nodes) == len(base.nodes) - sum(len(d.args["ids"]) - 1 for d in pre)

    def test_threshold_must_be_positive(self):
        with pytest.raises(ValueError):
            TuneConfig(fusion_threshold=0)

    def test_depth_bound_counts_communication(self):
        assert depth_bound(golden("model_parallel")) == 1 + 3
        assert depth_bound(golden("pipeline")) == 2 + 3

    @pytest.mark.parametrize("name", GOLDENS)
    def test_every_schedule_applies_and_is_distinct(self, name):
        base = golden(name)
        forms = set()
        for s in enumerate_schedules(base):
            forms.add(canonical_form(apply_schedule(base, s)))
        assert len(forms) == len(enumerate_schedules(base))

    @settings(max_examples=10, deadline=None)
    @given(threshold=st.integers(1, 20))
    def test_enumeration_is_repeatable(self, threshold):
        cfg = TuneConfig(fusion_threshold=threshold)
        base = golden("adam")
        a = [s.key() for s in enumerate_schedules(base, cfg)]
        b = [s.key() for s in enumerate_schedules(golden("adam"), cfg)]
        assert a == b


class TestTune:
    def test_single_candidate_wins(self):
        report = tune(no_comm_program())
        assert len(report.candidates) == 1 and report.winner == 0

    def test_model_parallel_default_winner(self):
        report = tune(golden_source("model_parallel"),
                      TuneConfig(tensor_sizes=({"B": 2, "S": 8, "H": 64},)))
        assert report.candidates[report.winner].family == "ol(MM,fuse(RS-C-AG))"

    def test_optimizer_crossover_across_sizes(self):
        winners = []
        for log_n in (10, 12, 14, 16, 18, 20):
            report = tune(golden_source("adam"), TuneConfig(tensor_sizes=({"N": 1 << log_n},)))
            winners.append(report.candidates[report.winner].family)
        assert len(set(winners)) > 1
        assert winners[-1] == "fuse(RS-C-AG)"

    def test_candidates_all_pass_the_oracle(self):
        report = tune(golden_source("pipeline"))
        assert all(c.deviation <= 1e-5 for c in report.candidates)

    def test_sizes_are_summed_across_instances(self):
        one = tune(golden_source("adam"), TuneConfig(tensor_sizes=({"N": 1024},)))
        two = tune(golden_source("adam"), TuneConfig(tensor_sizes=({"N": 1024}, {"N": 1024})))
        for a, b in zip(one.candidates, two.candidates):
            assert b.simulated_time == pytest.approx(2 * a.simulated_time)

    def test_bad_tolerance_surfaces_as_candidate_failure(self):
        with pytest.raises(CandidateFailed):
            tune(golden_source("adam"), TuneConfig(tol=0.0))

    def test_wall_time_only_reported_for_wall_metric(self):
        sim = tune(golden_source("adam")).to_json()
        wall = tune(golden_source("adam"), TuneConfig(metric="wall_clock")).to_json()
        assert "wall_time" not in sim["candidates"][0]
        assert "wall_time" in wall["candidates"][0]

    def test_ties_prefer_fewer_steps_then_smaller_schedule(self):
        a = Candidate(Schedule(), "x", simulated_time=1.0, kernel_steps=2)
        b = Candidate(Schedule(), "y", simulated_time=1.0, kernel_steps=1)
        assert rank_key(b, "simulated_clock") < rank_key(a, "simulated_clock")

    def test_lower_launch_overhead_never_raises_time(self):
        hi = tune(golden_source("adam"), TuneConfig(comm=CommConfig(lam=10.0)))
        lo = tune(golden_source("adam"), TuneConfig(comm=CommConfig(lam=0.0)))
        for a, b in zip(hi.candidates, lo.candidates):
            assert b.simulated_time <= a.simulated_time
