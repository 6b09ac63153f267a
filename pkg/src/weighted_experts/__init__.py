"""Class-incremental learning with per-site experts and weighted score fusion."""
from .config import RunConfig, ScenarioConfig, TrainConfig
from .data import generate_scenario
from .errors import ConfigError, DataError, DivergenceError, PolicyError, WeightedExpertsError
from .fusion import FusionModel, train_fusion
from .pipeline import Run, run_incremental_pipeline

__all__ = [
    "RunConfig", "ScenarioConfig", "TrainConfig", "generate_scenario", "ConfigError", "DataError",
    "DivergenceError", "PolicyError", "WeightedExpertsError", "FusionModel", "train_fusion", "Run",
    "run_incremental_pipeline",
]
