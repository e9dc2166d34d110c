"""
robustgen - Robust evaluation of generalization measures.

Trains small networks over hyperparameter grids, computes norm- and flatness-based
generalization measures from the learned weights, and scores them by their worst-case
sign-error and robust regression error over families of environments.
"""

__version__ = "0.1.0"

from .measures import MEASURE_IDS
from .records import ExperimentRecord, HyperparameterConfig, RecordStore

__all__ = ["MEASURE_IDS", "ExperimentRecord", "HyperparameterConfig", "RecordStore", "__version__"]
