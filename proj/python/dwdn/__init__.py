"""Dynamic-width/depth separation networks: training, subnetwork extraction and cost-driven selection."""

from ._core import (
    BudgetError,
    CheckpointError,
    ConfigError,
    CostRow,
    Error,
    Model,
    ModelConfig,
    TrainConfig,
    enumerate_costs,
    istft,
    select_config,
    separate,
    snr_db,
    stft,
    synth_batch,
    tac_reweight,
    train,
)

__all__ = [
    "BudgetError",
    "CheckpointError",
    "ConfigError",
    "CostRow",
    "Error",
    "Model",
    "ModelConfig",
    "TrainConfig",
    "enumerate_costs",
    "istft",
    "select_config",
    "separate",
    "snr_db",
    "stft",
    "synth_batch",
    "tac_reweight",
    "train",
]
