"""YAML run configuration: parsing, CLI overrides and cross-field validation.

Schema (every key optional unless noted)::

    data:
      train_csv: path            # or train_synthetic: <drift spec>
      stream_csv: path           # or stream_synthetic: <drift spec>
      label_column: Label
    strategy: approx_cce         # ice | cce | approx_tce | approx_cce
    alpha: 0.05
    k: 5
    ice_split: 0.8
    rho: 0.10
    chunking: adaptive           # or fixed:N
    controller: {chi0: 100, chi_min: 10, chi_max: 5000, lambda: 0.9, delta: 100,
                 ema_high: 0.2, ema_low: 0.05, window: null}
    buffer_capacity: 20000
    seed: 0
    fnn:    {epochs: 30, batch_size: 256, learning_rate: 0.001}
    ce_mlp: {epochs: 30, batch_size: 256, learning_rate: 0.001}
    n_jobs: 1
    output: out                  # run directory
    artifacts: <output>/artifacts
    auto_train: true
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .neural import TrainConfig
from .stream import ControllerConfig, SimConfig
from .synthetic import DriftSpec, SpecError, spec_from_dict


class ConfigError(ValueError):
    pass


_TOP_KEYS = {"data", "strategy", "alpha", "k", "ice_split", "rho", "chunking", "controller",
             "buffer_capacity", "seed", "fnn", "ce_mlp", "n_jobs", "artifacts", "auto_train",
             "output", "verbosity"}
_DATA_KEYS = {"train_csv", "stream_csv", "train_synthetic", "stream_synthetic", "label_column"}
_TRAIN_KEYS = {"epochs", "batch_size", "learning_rate"}
_CONTROLLER_KEYS = {"chi0", "chi_min", "chi_max", "lambda", "delta", "ema_high", "ema_low",
                    "window"}


@dataclass
class DataConfig:
    train_csv: Optional[Path] = None
    stream_csv: Optional[Path] = None
    train_synthetic: Optional[DriftSpec] = None
    stream_synthetic: Optional[DriftSpec] = None
    label_column: Optional[str] = None


@dataclass
class RunConfig:
    sim: SimConfig
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: Path = Path("out")
    artifacts: Optional[Path] = None
    auto_train: bool = True
    verbosity: int = 0

    @property
    def artifact_dir(self) -> Path:
        return self.artifacts if self.artifacts is not None else self.out_dir / "artifacts"


def parse_chunking(value):
    """``adaptive`` or ``fixed:N`` (a bare integer is accepted as fixed)."""
    if isinstance(value, bool):
        raise ConfigError(f"invalid chunking {value!r}")
    if isinstance(value, int):
        size = value
    else:
        text = str(value).strip().lower()
        if text == "adaptive":
            return "adaptive"
        if text.startswith("fixed:"):
            text = text[len("fixed:"):]
        try:
            size = int(text)
        except ValueError:
            raise ConfigError(f"invalid chunking {value!r}; use 'adaptive' or 'fixed:N'") from None
    if size < 1:
        raise ConfigError(f"fixed chunk size must be >= 1, got {size}")
    return size


def _check_keys(section: dict, allowed: set, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _train_config(raw: dict, where: str) -> TrainConfig:
    _check_keys(raw, _TRAIN_KEYS, where)
    return TrainConfig(learning_rate=float(raw.get("learning_rate", 1e-3)),
                       epochs=int(raw.get("epochs", 30)),
                       batch_size=int(raw.get("batch_size", 256)))


def build_config(raw: dict, base_dir: Path = Path("."), overrides: Optional[dict] = None) -> RunConfig:
    raw = dict(raw or {})
    _check_keys(raw, _TOP_KEYS, "config")
    # config paths are relative to the config file, command-line ones to the cwd
    out_dir = Path("out") if raw.get("output") is None else base_dir / raw["output"]
    if (overrides or {}).get("output") is not None:
        out_dir = Path(overrides["output"])
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value

    data_raw = raw.get("data") or {}
    _check_keys(data_raw, _DATA_KEYS, "data")

    def path(key):
        value = data_raw.get(key)
        return None if value is None else (base_dir / value)

    try:
        data = DataConfig(
            train_csv=path("train_csv"),
            stream_csv=path("stream_csv"),
            train_synthetic=(spec_from_dict(data_raw["train_synthetic"])
                             if "train_synthetic" in data_raw else None),
            stream_synthetic=(spec_from_dict(data_raw["stream_synthetic"])
                              if "stream_synthetic" in data_raw else None),
            label_column=data_raw.get("label_column"),
        )
    except SpecError as exc:
        raise ConfigError(f"invalid synthetic data spec: {exc}") from None
    if data.train_csv is not None and data.train_synthetic is not None:
        raise ConfigError("give either data.train_csv or data.train_synthetic, not both")
    if data.stream_csv is not None and data.stream_synthetic is not None:
        raise ConfigError("give either data.stream_csv or data.stream_synthetic, not both")

    ctrl_raw = raw.get("controller") or {}
    _check_keys(ctrl_raw, _CONTROLLER_KEYS, "controller")
    try:
        controller = ControllerConfig(
            chi0=int(ctrl_raw.get("chi0", 100)),
            chi_min=int(ctrl_raw.get("chi_min", 10)),
            chi_max=int(ctrl_raw.get("chi_max", 5000)),
            lam=float(ctrl_raw.get("lambda", 0.9)),
            delta=int(ctrl_raw.get("delta", 100)),
            ema_high=float(ctrl_raw.get("ema_high", 0.2)),
            ema_low=float(ctrl_raw.get("ema_low", 0.05)),
            window=None if ctrl_raw.get("window") is None else int(ctrl_raw["window"]),
        )
        sim = SimConfig(
            strategy=str(raw.get("strategy", "approx_cce")),
            alpha=float(raw.get("alpha", 0.05)),
            k=int(raw.get("k", 5)),
            ice_split=float(raw.get("ice_split", 0.8)),
            rho=float(raw.get("rho", 0.10)),
            chunking=parse_chunking(raw.get("chunking", "adaptive")),
            controller=controller,
            buffer_capacity=int(raw.get("buffer_capacity", 20000)),
            seed=int(raw.get("seed", 0)),
            fnn=_train_config(raw.get("fnn") or {}, "fnn"),
            ce=_train_config(raw.get("ce_mlp") or {}, "ce_mlp"),
            n_jobs=int(raw.get("n_jobs", 1)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None

    artifacts = raw.get("artifacts")
    return RunConfig(sim=sim, data=data, out_dir=out_dir,
                     artifacts=None if artifacts is None else base_dir / artifacts,
                     auto_train=bool(raw.get("auto_train", True)),
                     verbosity=int(raw.get("verbosity", 0)))


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return build_config(raw, path.parent, overrides)
