"""Collective-communication-aware program transformation, tuning and simulation."""
from .autotune import TuneConfig, TuneReport, enumerate_schedules, tune
from .oracle import compare, oracle_execute
from .program import Program, program_from_json, program_to_json, validate_program
from .runtime import CommConfig, RunReport, execute, plan
from .transforms import Directive, Schedule, apply_schedule, canonical_form, schedule_from_json

__all__ = [
    "CommConfig", "Directive", "Program", "RunReport", "Schedule", "TuneConfig", "TuneReport",
    "apply_schedule", "canonical_form", "compare", "enumerate_schedules", "execute",
    "oracle_execute", "plan", "program_from_json", "program_to_json", "schedule_from_json",
    "tune", "validate_program",
]
