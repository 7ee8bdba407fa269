import json
from importlib import resources

import pytest

from ccsched.oracle import compare, oracle_execute
from ccsched.program import program_from_json
from ccsched.runtime import CommConfig, execute, plan
from ccsched.tensors import make_inputs, rebase_inputs
from ccsched.transforms import apply_schedule, schedule_from_json

GOLDENS = ("model_parallel", "adam", "pipeline")
SHIPPED_SCHEDULES = {"model_parallel": "mp_overlap", "adam": "adam_fused",
                   "pipeline": "pipeline_overlap"}


def golden_source(name: str) -> dict:
    return json.loads(resources.files("ccsched").joinpath("goldens", f"{name}.json").read_text())


def schedule_source(name: str) -> dict:
    return json.loads(resources.files("ccsched").joinpath("schedules", f"{name}.json").read_text())


def golden(name: str, **sizes):
    defaults = {"B": 2, "S": 8, "H": 64, "N": 4096, "W": 4}
    return program_from_json(golden_source(name), dict(defaults, **sizes))


def shipped_schedule(name: str):
    return schedule_from_json(schedule_source(name))


def oracle_values(base, inputs, seed=0) -> dict:
    """Oracle values keyed positionally, the way RunReport.global_values keys them."""
    values = oracle_execute(base, inputs, seed).values()
    return {(f"out#{base.outputs.index(k[4:])}" if k.startswith("out:") else k): v
            for k, v in values.items()}


def run_schedule(base, schedule, cfg=None, seed=0, mode="roundrobin", inputs=None):
    """(transformed program, run report, oracle deviation)."""
    cfg = cfg or CommConfig()
    inputs = inputs if inputs is not None else make_inputs(base, seed)
    prog = apply_schedule(base, schedule)
    report = execute(plan(prog), cfg, rebase_inputs(base, prog, inputs), seed, mode)
    dev, _ = compare(oracle_values(base, inputs, seed), report.global_values(prog))
    return prog, report, dev


# one pass/fail line per acceptance criterion ---------------------------------------------

_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = rep.failed or (rep.when == "call" and rep.outcome != "passed")
    entry = _CRITERIA.setdefault(number, [title, True])
    if failed:
        entry[1] = False


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}")
