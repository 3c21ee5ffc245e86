"""Adversarial SCO instances for multi-pass and one-pass SGD.

Builds packing-based hard instances, runs SGD against sample-dependent
gradient oracles and checks lower-bound inequalities, trajectory invariants
and event probabilities at desk scale.
"""

__version__ = "0.1.0"

from .errors import (
    AttemptsExhausted,
    ConfigError,
    DimensionMismatch,
    InvalidRegime,
    OutOfRange,
    ScheduleExhausted,
    StateCorruption,
)
from .packing import PackingKind, PackingSet, generate_packing, verify_packing
from .instance import Dataset, make_dataset, population_loss, empirical_loss
from .construction import (
    BlockScheme,
    ConstructionParams,
    Variant,
    derive_params,
    eval_f,
    make_block_scheme,
    subgradient_generic,
)
from .oracle import AdversarialOracle, OracleState, oracle_step, validate_subgradient
from .optimizer import RunResult, Schedule, make_schedule, project_ball, run_sgd, suffix_average

__all__ = [
    "AdversarialOracle",
    "AttemptsExhausted",
    "BlockScheme",
    "ConfigError",
    "ConstructionParams",
    "Dataset",
    "DimensionMismatch",
    "InvalidRegime",
    "OracleState",
    "OutOfRange",
    "PackingKind",
    "PackingSet",
    "RunResult",
    "Schedule",
    "ScheduleExhausted",
    "StateCorruption",
    "Variant",
    "derive_params",
    "empirical_loss",
    "eval_f",
    "generate_packing",
    "make_block_scheme",
    "make_dataset",
    "make_schedule",
    "oracle_step",
    "population_loss",
    "project_ball",
    "run_sgd",
    "subgradient_generic",
    "suffix_average",
    "validate_subgradient",
    "verify_packing",
]
