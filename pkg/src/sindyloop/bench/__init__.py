"""Benchmark systems, trajectory generation, structural grading and reports."""

from .grading import Grade, StructuralGrade, grade_structure, truth_model
from .march_leuba import MarchLeubaParams, closed_loop_jacobian, generator_from_doc, march_leuba_generate
from .report import BenchResult, emit_report, report_csv, write_report
from .runner import run_bench, run_system
from .systems import (
    FIXTURE_DIR,
    FIXTURE_NAMES,
    SystemSpec,
    fixture_replay_path,
    generate_trajectory,
    load_fixture,
    load_spec,
    read_spec_doc,
    spec_from_doc,
)

__all__ = [
    "BenchResult",
    "FIXTURE_DIR",
    "FIXTURE_NAMES",
    "Grade",
    "MarchLeubaParams",
    "StructuralGrade",
    "SystemSpec",
    "closed_loop_jacobian",
    "emit_report",
    "fixture_replay_path",
    "generate_trajectory",
    "generator_from_doc",
    "grade_structure",
    "load_fixture",
    "load_spec",
    "march_leuba_generate",
    "read_spec_doc",
    "report_csv",
    "run_bench",
    "run_system",
    "spec_from_doc",
    "truth_model",
    "write_report",
]
