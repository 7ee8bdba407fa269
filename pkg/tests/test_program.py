import json

import pytest
from hypothesis import given, settings, strategies as st

from ccsched.errors import InvalidInput, LayoutMismatch, ParseError
from ccsched.program import (LOCAL, REPLICATED, Layout, errors_only, infer_layout,
                             layout_listing, program_from_json, program_to_json, topo_order,
                             validate_program)
from ccsched.transforms import canonical_form

from conftest import GOLDENS, golden, golden_source


def tensor(name, shape, layout, **extra):
    return dict({"name": name, "elem": "F32", "shape": shape, "layout": layout, "group": 0}, **extra)


def pointwise(nid, expr, inputs):
    return {"id": nid, "kind": "Pointwise", "attrs": {"expr": expr}, "inputs": inputs}


def program(tensors, nodes, outputs, world=4):
    return program_from_json({"name": "t", "groups": [{"id": 0, "size": world}],
                              "tensors": tensors, "nodes": nodes, "outputs": outputs})


REPL = {"kind": "Replicated"}


def codes(p, severity="error"):
    return [d.code for d in validate_program(p) if d.severity == severity]


class TestInferLayout:
    def test_matmul_over_sliced_contraction_is_local(self):
        assert infer_layout("MatMul", [Layout.sliced(2), Layout.sliced(0)],
                            [(2, 8, 64), (64, 64)], world_size=4) == (LOCAL, (2, 8, 64))

    def test_allreduce_of_local_is_replicated(self):
        assert infer_layout("AllReduce", [LOCAL], [(2, 8, 64)], world_size=4) == \
            (REPLICATED, (2, 8, 64))

    def test_pointwise_of_replicated_and_scalar(self):
        assert infer_layout("Pointwise", [REPLICATED, REPLICATED], [(4,), ()]) == (REPLICATED, (4,))

    def test_conflicting_slice_axes(self):
        with pytest.raises(LayoutMismatch):
            infer_layout("Pointwise", [Layout.sliced(0), Layout.sliced(1)], [(8,), (8, 2)],
                         world_size=4)

    def test_allgather_needs_sliced_input(self):
        with pytest.raises(InvalidInput):
            infer_layout("AllGather", [REPLICATED], [(8,)], world_size=4)

    @given(rank=st.integers(1, 4), data=st.data())
    def test_pointwise_keeps_a_single_slice_axis(self, rank, data):
        dim = data.draw(st.integers(0, rank - 1))
        shape = tuple(data.draw(st.sampled_from([4, 8])) for _ in range(rank))
        others = data.draw(st.lists(st.sampled_from(["replicated", "same"]), max_size=3))
        layouts = [Layout.sliced(dim)] + [Layout.sliced(dim) if o == "same" else REPLICATED
                                          for o in others]
        out = infer_layout("Pointwise", layouts, [shape] * len(layouts), world_size=4)
        assert out == (Layout.sliced(dim), shape)

    @given(rank=st.integers(1, 3), data=st.data())
    def test_reduce_scatter_then_allgather_restores_shape(self, rank, data):
        shape = tuple(data.draw(st.sampled_from([4, 8, 16])) for _ in range(rank))
        rs_layout, rs_shape = infer_layout("ReduceScatter", [LOCAL], [shape],
                                           {"reducer": "+"}, world_size=4)
        assert rs_layout.is_sliced and rs_shape == shape
        assert infer_layout("AllGather", [rs_layout], [rs_shape], world_size=4) == \
            (REPLICATED, shape)


class TestValidate:
    def test_goldens_are_clean(self):
        for name in GOLDENS:
            assert errors_only(validate_program(golden(name))) == []

    def test_model_parallel_at_small_sizes(self):
        p = golden("model_parallel", B=2, S=4, H=8, W=4)
        assert validate_program(p) == []

    def test_model_parallel_listing(self):
        rows = {r[0]: str(r[3]) for r in layout_listing(golden("model_parallel"))}
        assert rows == {"layer": "Local", "sum": "Replicated", "dropout": "Replicated",
                        "out": "Replicated"}

    def test_indivisible_slice(self):
        p = program([tensor("x", [7], {"kind": "Sliced", "dim": 0})],
                    [pointwise("y", "x*2", ["x"])], ["y"])
        assert codes(p) == ["DivisibilityError"]

    def test_missing_output(self):
        p = program([tensor("x", [8], REPL)], [pointwise("y", "x*2", ["x"])], ["zz"])
        assert "DanglingReference" in codes(p)

    def test_allreduce_of_replicated_is_a_warning(self):
        p = program([tensor("x", [8], REPL)],
                    [{"id": "y", "kind": "AllReduce", "attrs": {"reducer": "+"}, "inputs": ["x"]}],
                    ["y"])
        assert codes(p) == [] and codes(p, "warning") == ["Redundant"]

    def test_send_to_missing_group_is_an_error(self):
        src = dict(golden_source("pipeline"), groups=[{"id": 0, "size": "W"}])
        p = program_from_json(src, {"N": 64, "W": 4})
        assert [(d.code, d.node) for d in errors_only(validate_program(p))] == \
            [("InvalidInput", "output")]


class TestTopoOrder:
    def test_model_parallel_line_order(self):
        assert topo_order(golden("model_parallel")) == ["layer", "sum", "dropout", "out"]

    def test_single_node(self):
        p = program([tensor("x", [8], REPL)], [pointwise("y", "x+1", ["x"])], ["y"])
        assert topo_order(p) == ["y"]

    def test_diamond_breaks_ties_by_id(self):
        nodes = [pointwise("d", "b+c", ["b", "c"]), pointwise("c", "a*3", ["a"]),
                 pointwise("b", "a*2", ["a"]), pointwise("a", "x+1", ["x"])]
        p = program([tensor("x", [8], REPL)], nodes, ["d"])
        assert topo_order(p) == ["a", "b", "c", "d"]

    @settings(max_examples=50)
    @given(st.lists(st.lists(st.integers(0, 20), max_size=3), min_size=1, max_size=12))
    def test_every_node_follows_its_inputs(self, edges):
        nodes = []
        for i, preds in enumerate(edges):
            ins = sorted({f"n{j}" for j in preds if j < i}) or ["x"]
            nodes.append(pointwise(f"n{i}", " + ".join(ins), ins))
        p = program([tensor("x", [8], REPL)], list(reversed(nodes)), [f"n{len(nodes) - 1}"])
        order = topo_order(p)
        pos = {n: k for k, n in enumerate(order)}
        assert sorted(order) == sorted(n["id"] for n in nodes)
        for n in nodes:
            for ref in n["inputs"]:
                if ref != "x":
                    assert pos[ref] < pos[n["id"]]


class TestJson:
    @pytest.mark.parametrize("name", GOLDENS)
    def test_round_trip(self, name):
        p = golden(name)
        q = program_from_json(json.loads(json.dumps(program_to_json(p))))
        assert canonical_form(p) == canonical_form(q)
        assert program_to_json(q) == program_to_json(p)

    @pytest.mark.parametrize("bad", [
        {"name": "t"},
        {"name": "t", "groups": [{"id": 0, "size": 1}], "tensors": [{"name": "x"}], "nodes": [],
         "outputs": []},
        {"name": "t", "groups": [{"id": 0, "size": 1}],
         "tensors": [tensor("x", [4], {"kind": "Diagonal"})], "nodes": [], "outputs": []},
    ])
    def test_malformed_documents(self, bad):
        with pytest.raises(ParseError):
            program_from_json(bad)

    def test_symbolic_extents(self):
        p = golden("model_parallel", B=3, S=5, H=8)
        assert p.decl_map["in"].shape == (3, 5, 8)
