"""Config-driven experiment runner (``sublim`` command)."""
from .config import ExperimentConfig
from .main import main
from .runner import (
    CheckpointCache,
    ExperimentResult,
    RunRecord,
    aggregate,
    emit_figure_data,
    load_result,
    run_experiment,
    run_seed,
    run_sweep,
)

__all__ = ["ExperimentConfig", "main", "CheckpointCache", "ExperimentResult", "RunRecord", "aggregate",
           "emit_figure_data", "load_result", "run_experiment", "run_seed", "run_sweep"]
