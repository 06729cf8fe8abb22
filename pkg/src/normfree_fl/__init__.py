"""Normalization-free multi-domain federated learning, simulated with numpy."""

from .errors import SimError
from .experiment import ExperimentConfig, RunSummary, compare_report, parse_config, run_experiment
from .federation import AlgorithmKind, AlgorithmSpec, aggregate, local_train, partition_params, run_round
from .model import ModelSpec, ModelState, build_cnn6, forward, backward
from .optim import OptimSpec, agc_clip, sgd_step
from .tensor_core import RngStream

__version__ = "0.1.0"
