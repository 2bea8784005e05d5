"""Deterministic engine and adversarial simulator for pre-signed vault custody."""

from .chain import Chain, Visibility
from .config import ConfigError, ScenarioConfig
from .fleet import WalletTopology
from .orchestrator import CTV, DELETED_KEY, Feerates, RecoveryKind, UnvaultPolicy, World, bootstrap
from .threats import (
    SCENARIOS, BoundError, CompromiseSet, OutcomeClass, RunOptions, ScenarioOutcome, evaluate, race,
    run_matrix, run_scenario, tolerance_oracle,
)

__version__ = "0.1.0"

__all__ = [
    "Chain", "Visibility", "ConfigError", "ScenarioConfig", "WalletTopology", "CTV", "DELETED_KEY",
    "Feerates", "RecoveryKind", "UnvaultPolicy", "World", "bootstrap", "SCENARIOS", "BoundError",
    "CompromiseSet", "OutcomeClass", "RunOptions", "ScenarioOutcome", "evaluate", "race", "run_matrix",
    "run_scenario", "tolerance_oracle",
]
