"""Small numpy CNN engine: specs, layers, training, checkpoints."""
from treecnn.nn.network import (
    Network,
    TrainingSchedule,
    forward,
    loss_and_gradients,
    sgd_update,
    train_network,
)
from treecnn.nn.spec import LayerSpec, NetworkSpec, SpecError, count_weights

__all__ = [
    "LayerSpec",
    "Network",
    "NetworkSpec",
    "SpecError",
    "TrainingSchedule",
    "count_weights",
    "forward",
    "loss_and_gradients",
    "sgd_update",
    "train_network",
]
