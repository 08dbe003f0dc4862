"""Verification, fair prediction and fairness retraining for ReLU classifiers."""

from .fairness import (Counterexample, FairnessReport, UndecidedError, VerificationOutcome, audit,
                       enumerate_predict, fair_predict, verify, verify_max_violation)
from .network import NetworkSpec, load_model, save_model
from .schema import Dataset, FeatureSchema, FeatureSpec, load_dataset, load_schema

__all__ = [
    "Counterexample", "Dataset", "FairnessReport", "FeatureSchema", "FeatureSpec", "NetworkSpec",
    "UndecidedError", "VerificationOutcome", "audit", "enumerate_predict", "fair_predict",
    "load_dataset", "load_model", "load_schema", "save_model", "verify", "verify_max_violation",
]
__version__ = "0.1.0"
