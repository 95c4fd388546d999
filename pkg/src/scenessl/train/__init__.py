"""Optimisation and the staged training pipeline."""

from .config import SCHEMA, ExperimentConfig
from .grid import Cell, ExperimentGrid, GridResult, Variant, build_data, format_pm, run_grid, summary_table
from .optim import (
    EarlyStopConfig,
    Lars,
    LarsConfig,
    ScheduleConfig,
    StopDecision,
    cosine_restart_lr,
    early_stop,
    lars_step,
    local_learning_rate,
)
from .rundir import RunDirectory
from .stage import (
    LossParams,
    Stage,
    StageData,
    StagePlan,
    StageResult,
    check_lineage,
    initial_checkpoint,
    run_plan,
    run_stage,
)

__all__ = [
    "SCHEMA", "Cell", "EarlyStopConfig", "ExperimentConfig", "ExperimentGrid", "GridResult", "Lars", "LarsConfig",
    "LossParams", "RunDirectory", "ScheduleConfig", "Stage", "StageData", "StagePlan", "StageResult",
    "StopDecision", "Variant", "build_data", "check_lineage", "cosine_restart_lr", "early_stop", "format_pm",
    "initial_checkpoint", "lars_step", "local_learning_rate", "run_grid", "run_plan", "run_stage",
    "summary_table",
]
