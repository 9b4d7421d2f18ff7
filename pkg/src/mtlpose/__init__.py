"""Multi-task convolutional network for 2-D human pose: joint regression plus part detection.

Pure numpy. The usual entry points::

    from mtlpose import network, training, synth, evaluation, introspect
    spec = network.preset("desk")
    state = network.init_state(spec, seed=0)
"""
from . import checkpoint, data, errors, evaluation, introspect, layers, network, synth, tensor, training
from .checkpoint import load_checkpoint, save_checkpoint
from .network import LossWeights, NetworkSpec, NetworkState, forward, init_state, predict, preset
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "checkpoint", "data", "errors", "evaluation", "introspect", "layers", "network", "synth", "tensor",
    "training", "load_checkpoint", "save_checkpoint", "LossWeights", "NetworkSpec", "NetworkState",
    "forward", "init_state", "predict", "preset", "TrainConfig", "train",
]
