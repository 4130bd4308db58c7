"""Chunked streaming evaluation with drift-triggered retraining."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .chunking import ControllerState
from .conformal import STRATEGIES, Calibration, CalibrationError, Verdict, calibrate, evaluate_many
from .ingest import FlowTable, Standardizer, fit_standardizer
from .metrics import compute_metrics
from .neural import MLPModel, TrainConfig, build_ce_mlp, build_fnn_classifier, train

logger = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    pass


def derive_seed(base: int, *keys) -> int:
    """Deterministic child seed for a named component (and e.g. a retrain index)."""
    words = [int(base) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            words.extend(key.encode())
        else:
            words.append(int(key))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass
class ControllerConfig:
    chi0: int = 100
    chi_min: int = 10
    chi_max: int = 5000
    lam: float = 0.9
    delta: int = 100
    ema_high: float = 0.2
    ema_low: float = 0.05
    window: Optional[int] = None

    def build(self) -> ControllerState:
        return ControllerState(chi=self.chi0, chi_min=self.chi_min, chi_max=self.chi_max,
                               lam=self.lam, delta=self.delta, ema_high=self.ema_high,
                               ema_low=self.ema_low, window=self.window)


@dataclass
class SimConfig:
    strategy: str = "approx_cce"
    alpha: float = 0.05
    k: int = 5
    ice_split: float = 0.8
    rho: float = 0.10
    chunking: Union[str, int] = "adaptive"
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    buffer_capacity: int = 20000
    seed: int = 0
    fnn: TrainConfig = field(default_factory=TrainConfig)
    ce: TrainConfig = field(default_factory=TrainConfig)
    n_jobs: int = 1
    inference_batch: int = 1024
    count_initial_calibration: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must be in [0, 1)")
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if not 0.0 < self.ice_split < 1.0:
            raise ValueError("ice_split must be in (0, 1)")
        if self.chunking != "adaptive":
            if isinstance(self.chunking, bool) or not isinstance(self.chunking, int) \
                    or self.chunking < 1:
                raise ValueError("chunking must be 'adaptive' or a positive integer")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")
        self.controller.build()  # validates bounds

    @property
    def adaptive(self) -> bool:
        return self.chunking == "adaptive"


class RollingBuffer:
    """Fixed-capacity FIFO of labeled raw feature rows; oldest rows are evicted first."""

    def __init__(self, capacity: int, n_features: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._X = np.empty((capacity, n_features))
        self._y = np.empty(capacity, dtype=np.int64)
        self._start = 0
        self._len = 0
        self.class_counts = np.zeros(2, dtype=np.int64)

    def __len__(self):
        return self._len

    def append(self, X, y) -> "RollingBuffer":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64).ravel()
        if len(X) == 0:
            return self
        if X.ndim != 2 or X.shape[1] != self._X.shape[1] or len(X) != len(y):
            raise ValueError("chunk rows do not match buffer dimensions")
        if len(X) > self.capacity:
            X, y = X[-self.capacity:], y[-self.capacity:]
        n = len(X)
        overflow = max(0, self._len + n - self.capacity)
        if overflow:
            evicted = (self._start + np.arange(overflow)) % self.capacity
            self.class_counts -= np.bincount(self._y[evicted], minlength=2)
            self._start = (self._start + overflow) % self.capacity
            self._len -= overflow
        slots = (self._start + self._len + np.arange(n)) % self.capacity
        self._X[slots] = X
        self._y[slots] = y
        self._len += n
        self.class_counts += np.bincount(y, minlength=2)
        return self

    def contents(self):
        """Rows and labels, oldest first."""
        idx = (self._start + np.arange(self._len)) % self.capacity
        return self._X[idx], self._y[idx]


def buffer_append(buffer: RollingBuffer, X, y) -> RollingBuffer:
    return buffer.append(X, y)


def detect_drift(verdicts, rho: float) -> bool:
    """True iff the chunk's rejection rate exceeds ``rho``.

    ``verdicts`` is a sequence of :class:`Verdict` or a boolean array of
    acceptance flags.
    """
    if len(verdicts) == 0:
        raise ValueError("cannot detect drift on an empty chunk")
    if isinstance(verdicts[0], Verdict):
        rejected = sum(not v.accepted for v in verdicts)
    else:
        rejected = int(np.sum(~np.asarray(verdicts, dtype=bool)))
    return rejected / len(verdicts) > rho


@dataclass
class Pipeline:
    standardizer: Standardizer
    fnn: MLPModel
    calibration: Calibration
    feature_names: tuple = ()

    def classify(self, X_raw, batch_size: int = 1024) -> np.ndarray:
        Xs = self.standardizer.apply(X_raw)
        return np.argmax(self.fnn.predict_proba(Xs, batch_size), axis=1)

    def evaluate(self, X_raw, batch_size: int = 1024):
        return evaluate_many(self.calibration, self.standardizer.apply(X_raw), batch_size)


def fit_pipeline(X_raw, y, cfg: SimConfig, seed: int, feature_names: Sequence[str] = ()) -> Pipeline:
    """Fit standardizer, flow classifier and the conformal evaluator on one labeled set."""
    X_raw = np.asarray(X_raw, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    std = fit_standardizer(X_raw)
    Xs = std.apply(X_raw)
    d = Xs.shape[1]

    fnn_seed = derive_seed(seed, "fnn")
    fnn = train(build_fnn_classifier(d, fnn_seed), Xs, y, replace(cfg.fnn, seed=fnn_seed))

    def train_ce(Xt, yt, s):
        return train(build_ce_mlp(d, s), Xt, yt, replace(cfg.ce, seed=s))

    cal = calibrate(cfg.strategy, train_ce, Xs, y, alpha=cfg.alpha, k=cfg.k,
                    split_fraction=cfg.ice_split, seed=derive_seed(seed, "calibration"),
                    n_jobs=cfg.n_jobs)
    return Pipeline(std, fnn, cal, tuple(feature_names))


@dataclass
class SimulationReport:
    records: list
    metrics: dict
    n_calibrations: int
    runtime_seconds: float
    chunk_sizes: list
    controller_trace: list
    strategy: str
    seeds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "strategy": self.strategy,
            "n_flows": int(sum(self.chunk_sizes)),
            "n_chunks": len(self.chunk_sizes),
            "n_calibrations": self.n_calibrations,
            "n_drift_events": sum(r["drift"] for r in self.records),
            "n_skipped_retrains": sum(r["event"] == "drift-no-retrain" for r in self.records),
            "metrics": self.metrics,
            "runtime_seconds": self.runtime_seconds,
            "seeds": self.seeds,
            "config": self.config,
        }


def run_simulation(train_table: FlowTable, stream: FlowTable, cfg: SimConfig,
                   pipeline: Optional[Pipeline] = None,
                   on_record: Optional[Callable[[dict], None]] = None) -> SimulationReport:
    """Stream ``stream`` through the evaluator chunk by chunk.

    Each chunk is evaluated with the current calibration, appended to the
    rolling buffer with its ground-truth labels, and, if its rejection rate
    exceeds ``cfg.rho``, triggers a refit of the standardizer, classifier and
    evaluator on the buffer. ``pipeline`` skips the initial fit.
    """
    if len(stream) == 0:
        raise SimulationError("stream is empty")
    if stream.n_features != train_table.n_features:
        raise SimulationError("training and stream tables have different feature counts")
    t_start = time.perf_counter()
    seeds = {"base": cfg.seed, "initial": derive_seed(cfg.seed, "initial")}

    if pipeline is None:
        pipeline = fit_pipeline(train_table.features, train_table.labels, cfg,
                                seeds["initial"], train_table.feature_names)
    buffer = RollingBuffer(cfg.buffer_capacity, train_table.n_features)
    buffer.append(train_table.features[-cfg.buffer_capacity:],
                  train_table.labels[-cfg.buffer_capacity:])

    controller = cfg.controller.build() if cfg.adaptive else None
    n_calibrations = 1 if cfg.count_initial_calibration else 0
    n_retrains = 0
    X_all, y_all = stream.features, stream.labels
    fnn_pred = np.empty(len(stream), dtype=np.int64)
    ce_pred = np.empty(len(stream), dtype=np.int64)
    accepted_all = np.empty(len(stream), dtype=bool)
    records, sizes = [], []

    pos = 0
    chunk_index = 0
    while pos < len(stream):
        size = controller.chi if controller is not None else cfg.chunking
        stop = min(pos + size, len(stream))
        X, y = X_all[pos:stop], y_all[pos:stop]
        t0 = time.perf_counter()
        accepted, pred, _, _ = pipeline.evaluate(X, cfg.inference_batch)
        fnn_pred[pos:stop] = pipeline.classify(X, cfg.inference_batch)
        ce_pred[pos:stop] = pred
        accepted_all[pos:stop] = accepted
        eval_seconds = time.perf_counter() - t0

        n_rejected = int((~accepted).sum())
        drift = detect_drift(accepted, cfg.rho)
        buffer.append(X, y)

        event = "ok"
        retrain_seconds = 0.0
        if drift:
            event = "drift-no-retrain"
            if buffer.class_counts.min() == 0:
                logger.warning("chunk %d: drift but buffer is single-class; retrain skipped",
                               chunk_index)
            else:
                t1 = time.perf_counter()
                Xb, yb = buffer.contents()
                try:
                    pipeline = fit_pipeline(Xb, yb, cfg, derive_seed(cfg.seed, "retrain", n_retrains),
                                            train_table.feature_names)
                except CalibrationError as exc:
                    logger.warning("chunk %d: retrain skipped: %s", chunk_index, exc)
                else:
                    n_retrains += 1
                    n_calibrations += 1
                    event = "drift-retrain"
                retrain_seconds = time.perf_counter() - t1

        next_size = controller.observe(drift) if controller is not None else cfg.chunking
        record = {
            "chunk": chunk_index,
            "start": pos,
            "size": stop - pos,
            "n_rejected": n_rejected,
            "reject_rate": n_rejected / (stop - pos),
            "drift": bool(drift),
            "retrain": event == "drift-retrain",
            "event": event,
            "n_calibrations": n_calibrations,
            "buffer_size": len(buffer),
            "next_chunk_size": int(next_size),
            "ema": controller.ema if controller is not None else None,
            "eval_seconds": eval_seconds,
            "retrain_seconds": retrain_seconds,
        }
        records.append(record)
        sizes.append(stop - pos)
        if on_record is not None:
            on_record(record)
        pos = stop
        chunk_index += 1

    metrics = compute_metrics(fnn_pred, (accepted_all, ce_pred), y_all)
    cfg_dict = asdict(cfg)
    return SimulationReport(
        records=records,
        metrics=metrics,
        n_calibrations=n_calibrations,
        runtime_seconds=time.perf_counter() - t_start,
        chunk_sizes=sizes,
        controller_trace=list(controller.trace) if controller is not None else [],
        strategy=cfg.strategy,
        seeds=seeds,
        config=cfg_dict,
    )
