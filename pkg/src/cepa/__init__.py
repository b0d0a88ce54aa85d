"""Backdoor detection by consensus embedded perturbation, at desk scale."""

from .core import CepaConfig, CepaRun, run_cepa, scan
from .infer import DetectionReport, decide, mad_anomaly_indices
from .model import TappedClassifier, desk_cnn
from .verify import VerifyConfig, table1_protocol

__version__ = "0.1.0"

__all__ = [
    "CepaConfig", "CepaRun", "run_cepa", "scan",
    "DetectionReport", "decide", "mad_anomaly_indices",
    "TappedClassifier", "desk_cnn",
    "VerifyConfig", "table1_protocol",
]
