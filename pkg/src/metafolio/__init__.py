"""Portfolio building, budget allocation and per-dataset policy selection for AutoML meta-data."""
from .errors import CapacityError, MetafolioError, NoResultYet, ParseError, ValidationError
from .meta_data import (
    STANDARD_POLICY_IDS,
    Checkpoint,
    DatasetMeta,
    LearningCurve,
    PerformanceMatrix,
    Policy,
    Portfolio,
    load_matrix,
    save_matrix,
)
from .metrics import NormalizationStats, adtm, average_rank, normalize_loss, sign_test, wilcoxon_signed_rank
from .portfolio import brute_force_portfolio, greedy_portfolio, penalty_reduction, replay_with_budget
from .selector import (
    MetaFeatures,
    PolicySelector,
    SelectorHyperparams,
    fallback_check,
    oracle_policy,
    random_policy,
    select_policy,
    single_best,
    train_pairwise_selector,
)
from .strategies import ge_s, make_sh_schedule, portfolio_loss
from .ensemble import PredictionSet, ensemble_predict, ensemble_select
from .harness import build_training_table, compare_systems, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "MetafolioError",
    "NoResultYet",
    "ParseError",
    "ValidationError",
    "STANDARD_POLICY_IDS",
    "Checkpoint",
    "DatasetMeta",
    "LearningCurve",
    "PerformanceMatrix",
    "Policy",
    "Portfolio",
    "load_matrix",
    "save_matrix",
    "NormalizationStats",
    "adtm",
    "average_rank",
    "normalize_loss",
    "sign_test",
    "wilcoxon_signed_rank",
    "brute_force_portfolio",
    "greedy_portfolio",
    "penalty_reduction",
    "replay_with_budget",
    "MetaFeatures",
    "PolicySelector",
    "SelectorHyperparams",
    "fallback_check",
    "oracle_policy",
    "random_policy",
    "select_policy",
    "single_best",
    "train_pairwise_selector",
    "ge_s",
    "make_sh_schedule",
    "portfolio_loss",
    "PredictionSet",
    "ensemble_predict",
    "ensemble_select",
    "build_training_table",
    "compare_systems",
    "run_pipeline",
]
