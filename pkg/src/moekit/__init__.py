"""Desk-scale sparse mixture-of-experts encoder toolkit.

Three encoder variants sharing one training and analysis pipeline:

* ``dense``  -- ordinary feed-forward sublayers,
* ``switch`` -- top-1 token routing with an independent router per layer,
* ``omni``   -- top-1 token routing with a single router shared by every layer.

Models train with a CTC objective on synthetic feature corpora and ship
with routing diagnostics (adjacent-layer contingency, Cramer's V, routing
entropy, and an expert-permutation robustness probe).
"""

from moekit.encoder import ModelConfig, build_model, load_checkpoint, save_checkpoint
from moekit.training import TrainConfig, run_experiment

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "build_model",
    "save_checkpoint",
    "load_checkpoint",
    "run_experiment",
    "__version__",
]
