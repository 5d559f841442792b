"""FedRCO: federated learning with Kronecker-factored natural-gradient local steps,
a gradient anomaly monitor, and accuracy-weighted model pulls.

Quick start::

    from fedrco.config import ExperimentConfig
    from fedrco.experiment import run_experiment

    result = run_experiment(ExperimentConfig(method="fedrco", rounds=20), "runs/demo")
    print(result.accuracies[-1])
"""
from .config import ExperimentConfig, config_from_dict, load_config
from .errors import ConfigInvalid, FedRCOError
from .experiment import ExperimentResult, run_experiment, sweep

__version__ = "0.1.0"

__all__ = [
    "ConfigInvalid",
    "ExperimentConfig",
    "ExperimentResult",
    "FedRCOError",
    "config_from_dict",
    "load_config",
    "run_experiment",
    "sweep",
]
