"""Search keep-rate schedules for small-loss training under label noise."""
from .distributions import ThetaParams
from .harness import ExperimentConfig, compare_search_algorithms, emit_schedule_plot_data, run_experiment
from .schedule import ScheduleParams, eval_schedule, fit_to_reference, keep_count
from .search import SearchConfig, run_search
from .trainer import TrainConfig, evaluate_objective, train_coteaching, train_single

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "ScheduleParams", "SearchConfig", "ThetaParams", "TrainConfig",
    "compare_search_algorithms", "emit_schedule_plot_data", "eval_schedule", "evaluate_objective",
    "fit_to_reference", "keep_count", "run_experiment", "run_search", "train_coteaching",
    "train_single",
]
