"""Weight-based masking networks for unsupervised domain adaptation."""
from .harness import RunConfig, ablation_run, domain_error, domain_error_probe, evaluate_accuracy, train
from .model import WemnetModel

__all__ = [
    "RunConfig",
    "WemnetModel",
    "ablation_run",
    "domain_error",
    "domain_error_probe",
    "evaluate_accuracy",
    "train",
]
