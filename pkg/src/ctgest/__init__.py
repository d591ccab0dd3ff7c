"""Continuous-time g-estimation toolkit.

Simulates continuous-time outcome/treatment processes, records them at
discrete visits and estimates the structural treatment effect with naive,
modified and controlling-the-future g-estimation.
"""
from .dgp import ContinuousPath, ModelConfig, generate_dataset, generate_subject
from .estimators import (
    EstimateResult,
    EstimatorSpec,
    Theta,
    ignorability_diagnostic,
    sandwich_cov,
    solve,
)
from .mc_harness import StudyConfig, StudySummary, load_config, run_replication, run_study
from .panel import PanelDataset, PanelSchema, panel_from_paths, read_panel_csv, write_panel_csv
from .propensity import PropensitySpec, default_spec

__version__ = "0.1.0"

__all__ = [
    "ContinuousPath",
    "EstimateResult",
    "EstimatorSpec",
    "ModelConfig",
    "PanelDataset",
    "PanelSchema",
    "PropensitySpec",
    "StudyConfig",
    "StudySummary",
    "Theta",
    "default_spec",
    "generate_dataset",
    "generate_subject",
    "ignorability_diagnostic",
    "load_config",
    "panel_from_paths",
    "read_panel_csv",
    "run_replication",
    "run_study",
    "sandwich_cov",
    "solve",
    "write_panel_csv",
]
