"""Utility-based perturbed gradient descent for streaming learning."""

from ._upgd import (
    ConfigError,
    ConstantInput,
    DatasetNotLoaded,
    Diverged,
    NearZeroDenominator,
    Network,
    TaskStream,
    UpgdError,
    average_ranks,
    build_network,
    feature_utility,
    loss,
    preset_config,
    preset_names,
    probe,
    run,
    scale_global,
    spearman,
    summarize,
    weight_utility,
)

__all__ = [
    "ConfigError",
    "ConstantInput",
    "DatasetNotLoaded",
    "Diverged",
    "NearZeroDenominator",
    "Network",
    "TaskStream",
    "UpgdError",
    "average_ranks",
    "build_network",
    "feature_utility",
    "loss",
    "preset_config",
    "preset_names",
    "probe",
    "run",
    "scale_global",
    "spearman",
    "summarize",
    "weight_utility",
]
