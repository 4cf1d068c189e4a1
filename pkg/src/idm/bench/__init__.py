"""Experiment harness: sweeps, reports, figures, and the command line."""

from .experiments import (
    RESULTS_HEADER,
    DemoArtifacts,
    ExperimentConfig,
    ExperimentRecord,
    FieldArtifacts,
    RunFailure,
    RunResult,
    run_circle_demo,
    run_dimension_experiment,
    run_rate_experiment,
    run_score_field,
    write_results_csv,
    write_summary_json,
)

__all__ = [
    "RESULTS_HEADER",
    "DemoArtifacts",
    "ExperimentConfig",
    "ExperimentRecord",
    "FieldArtifacts",
    "RunFailure",
    "RunResult",
    "run_circle_demo",
    "run_dimension_experiment",
    "run_rate_experiment",
    "run_score_field",
    "write_results_csv",
    "write_summary_json",
]
