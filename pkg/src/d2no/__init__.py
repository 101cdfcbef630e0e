"""Distributed deep operator networks: per-client branch nets sharing one trunk."""
from .nn import Mlp, OptimizerState, StackedMlp, mlp_init, param_count
from .operator import (
    D2noModel,
    DeepOnet,
    SensorGrid,
    d2no_forward,
    d2no_init,
    deeponet_backward,
    deeponet_forward,
    deeponet_init,
    load_model,
    save_model,
)
from .training import ClientDataset, Metrics, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ClientDataset", "D2noModel", "DeepOnet", "Metrics", "Mlp", "OptimizerState",
    "SensorGrid", "StackedMlp", "TrainConfig", "d2no_forward", "d2no_init",
    "deeponet_backward", "deeponet_forward", "deeponet_init", "evaluate", "load_model",
    "mlp_init", "param_count", "save_model", "train",
]
