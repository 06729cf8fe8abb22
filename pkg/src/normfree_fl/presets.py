"""Named experiment presets used by the acceptance suite and the scripts.

Each preset is a list of ``section.key=value`` overrides applied on top of
the parser defaults, so ``parse_config("", preset + extra)`` reproduces it
and the same strings work with ``normfree-fl run ... --set``.
"""

from __future__ import annotations

from typing import Sequence

from .experiment import ExperimentConfig, parse_config

ALL_ALGORITHMS = ("FedAvg", "FedProx", "FedAvgGN", "FedAvgLN", "SiloBN", "FixBN", "FedBN", "FedWon")
BN_ALGORITHMS = ("FedAvg", "FedProx", "SiloBN", "FixBN", "FedBN")

# three domains of 3x28x28 glyphs; noise and jitter keep the task away from saturation
MULTI_DOMAIN = [
    "dataset.domains=3",
    "dataset.classes=10",
    "dataset.train_per_domain=500",
    "dataset.test_per_domain=100",
    "dataset.image_shape=[3, 28, 28]",
    "dataset.clients_per_domain=2",
    "dataset.noise=0.3",
    "dataset.jitter=1",
    "model.width_scale=1/8",
    "federation.batch_size=32",
    "federation.local_epochs=1",
    "federation.rounds=50",
]

SWEEP_LRS = (0.01, 0.02, 0.05, 0.1)

# best final mean accuracy of the SWEEP_LRS grid on MULTI_DOMAIN (seed 0, ties to the lower
# final training loss); produced by scripts/lr_sweep.py, raw numbers in results/lr_sweep.csv
TUNED_LR = {
    "FedAvg": 0.05,
    "FedProx": 0.1,
    "FedAvgGN": 0.1,
    "FedAvgLN": 0.1,
    "SiloBN": 0.1,
    "FixBN": 0.02,
    "FedBN": 0.1,
    "FedWon": 0.1,
}

# many small clients, a fifth of them per round
CROSS_DEVICE = [
    "dataset.domains=5",
    "dataset.train_per_domain=500",
    "dataset.test_per_domain=100",
    "dataset.clients_per_domain=10",
    "dataset.noise=0.3",
    "dataset.jitter=1",
    "federation.fraction=0.2",
    "federation.batch_size=4",
    "federation.rounds=50",
]
CROSS_DEVICE_LR = {"FedAvg": 0.01, "FedWon": 0.04}

# small-batch learning rates for the norm-free model
SMALL_BATCH_LR = {1: 0.005, 2: 0.01}


def preset(base: Sequence[str], algorithm: str, seeds=(0, 1, 2), lr=None, extra: Sequence[str] = ()) -> ExperimentConfig:
    overrides = list(base) + [f"federation.algorithm={algorithm}", f"seeds={list(seeds)}"]
    if lr is not None:
        overrides.append(f"optim.lr={lr}")
    return parse_config("", overrides + list(extra))


def multi_domain(algorithm: str, seeds=(0, 1, 2), lr=None, extra: Sequence[str] = ()) -> ExperimentConfig:
    return preset(MULTI_DOMAIN, algorithm, seeds, TUNED_LR[algorithm] if lr is None else lr, extra)


def cross_device(algorithm: str, seeds=(0, 1, 2), extra: Sequence[str] = ()) -> ExperimentConfig:
    return preset(CROSS_DEVICE, algorithm, seeds, CROSS_DEVICE_LR[algorithm], extra)
