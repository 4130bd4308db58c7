"""Streaming conformal evaluation for flow-based intrusion detection."""

from .chunking import ControllerState, controller_new, observe
from .conformal import (STRATEGIES, Calibration, Verdict, calibrate, calibrate_approx_cce,
                        calibrate_approx_tce, calibrate_cce, calibrate_ice, evaluate,
                        evaluate_many, nonconformity, p_value, quantile_threshold)
from .ingest import (FlowTable, Standardizer, apply_standardizer, fit_standardizer,
                     load_flow_csv, map_label)
from .metrics import compute_metrics
from .neural import (MLPModel, TrainConfig, build_ce_mlp, build_fnn_classifier,
                     fit_temperature, predict_proba, train)
from .stream import (RollingBuffer, SimConfig, SimulationReport, buffer_append, detect_drift,
                     run_simulation)
from .synthetic import DriftSpec, generate_stream, make_spec

__version__ = "0.1.0"
