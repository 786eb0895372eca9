"""Desk-scale laboratory for stealing multi-exit networks through the
probabilities they return and the time they take to return them."""

from .errors import BudgetError, ContractError, FormatError
from .multiexit import (
    BackboneSpec,
    MultiExitNet,
    OutputStrategy,
    build_evenly_partitioned,
    load_checkpoint,
    save_checkpoint,
)
from .victimlab import TimingModel, VictimDeployment, train_victim
from .changepoint import ChangepointResult, detect_changepoints
from .attack import AttackConfig, QueryRecord, train_baseline, train_substitute
from .search import search_strategy
from .metrics import EvalReport, make_report

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "BackboneSpec",
    "BudgetError",
    "ChangepointResult",
    "ContractError",
    "EvalReport",
    "FormatError",
    "MultiExitNet",
    "OutputStrategy",
    "QueryRecord",
    "TimingModel",
    "VictimDeployment",
    "build_evenly_partitioned",
    "detect_changepoints",
    "load_checkpoint",
    "make_report",
    "save_checkpoint",
    "search_strategy",
    "train_baseline",
    "train_substitute",
    "train_victim",
    "__version__",
]
