"""Flow CSV ingestion, label binarization and feature standardization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

LABEL_COLUMNS = ("Label", "BinLabel")
STD_FLOOR = 1e-12


class IngestionError(ValueError):
    """Raised when a flow table cannot be built from the input."""


@dataclass(frozen=True)
class FlowTable:
    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple
    row_order: np.ndarray
    n_dropped: int = 0
    source: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.features.ndim != 2:
            raise IngestionError("features must be a 2-D matrix")
        if len(self.labels) != self.features.shape[0]:
            raise IngestionError("labels length must equal feature row count")
        if len(self.feature_names) != self.features.shape[1]:
            raise IngestionError("feature_names must match feature column count")
        if len(self.row_order) > 1 and not np.all(np.diff(self.row_order) > 0):
            raise IngestionError("row_order must be strictly increasing")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def select(self, names: Sequence[str]) -> "FlowTable":
        """Return a table restricted to ``names`` (in that order)."""
        index = {n: i for i, n in enumerate(self.feature_names)}
        missing = [n for n in names if n not in index]
        if missing:
            raise IngestionError(f"unknown feature columns: {missing}")
        cols = [index[n] for n in names]
        return FlowTable(self.features[:, cols], self.labels, tuple(names),
                         self.row_order, self.n_dropped, self.source, dict(self.metadata))

    def slice(self, start: int, stop: int) -> "FlowTable":
        return FlowTable(self.features[start:stop], self.labels[start:stop],
                         self.feature_names, self.row_order[start:stop], 0,
                         self.source, dict(self.metadata))


def map_label(raw) -> int:
    """Binarize a raw label: ``benign`` (any case) is 0, everything else 1."""
    text = "" if raw is None else str(raw).strip()
    if not text:
        logger.warning("empty label treated as attack")
        return 1
    return 0 if text.lower() == "benign" else 1


def _parse_numeric(col: pd.Series) -> Optional[np.ndarray]:
    # numeric iff every non-empty cell parses as a real number
    stripped = col.str.strip()
    empty = stripped == ""
    try:
        # numpy's str -> float64 cast rounds correctly, so written reprs round-trip
        values = stripped[~empty].to_numpy(dtype=str).astype(np.float64)
    except (ValueError, TypeError):
        return None
    out = np.full(len(col), np.nan)
    out[~empty.to_numpy()] = values
    return out


def _binarize_labels(col: pd.Series) -> np.ndarray:
    stripped = col.str.strip()
    if stripped.isin(["0", "1"]).all():
        return stripped.astype(int).to_numpy()
    return np.fromiter((map_label(v) for v in stripped), dtype=np.int64, count=len(col))


def load_flow_csv(path, label_column: Optional[str] = None) -> FlowTable:
    """Load a CICFlowMeter-style CSV into a :class:`FlowTable`.

    Non-numeric columns are excluded, labels are binarized with
    :func:`map_label` (a column already holding only 0/1 is used as is) and
    rows with any non-finite feature are dropped. When ``label_column`` is
    None, ``Label`` then ``BinLabel`` are tried.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"flow CSV not found: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    df.columns = [c.strip() for c in df.columns]

    if label_column is None:
        label_column = next((c for c in LABEL_COLUMNS if c in df.columns), None)
        if label_column is None:
            raise IngestionError(f"no label column found (tried {', '.join(LABEL_COLUMNS)})")
    elif label_column not in df.columns:
        raise IngestionError(f"label column {label_column!r} not found in {path}")

    labels = _binarize_labels(df[label_column])
    excluded = set(LABEL_COLUMNS) | {label_column}
    names, columns = [], []
    for name in df.columns:
        if name in excluded:
            continue
        parsed = _parse_numeric(df[name])
        if parsed is None:
            logger.debug("dropping non-numeric column %s", name)
            continue
        names.append(name)
        columns.append(parsed)
    if not names:
        raise IngestionError(f"no numeric feature columns in {path}")

    features = np.column_stack(columns)
    finite = np.isfinite(features).all(axis=1)
    n_dropped = int((~finite).sum())
    if n_dropped:
        logger.info("dropped %d rows with non-finite values from %s", n_dropped, path)
    if not finite.any():
        raise IngestionError(f"no rows survive cleaning in {path}")

    return FlowTable(
        features=np.ascontiguousarray(features[finite]),
        labels=labels[finite].astype(np.int64),
        feature_names=tuple(names),
        row_order=np.flatnonzero(finite).astype(np.int64),
        n_dropped=n_dropped,
        source=str(path),
    )


def align_features(train: FlowTable, stream: FlowTable) -> tuple:
    """Restrict both tables to their shared feature columns, in training order."""
    shared = [n for n in train.feature_names if n in set(stream.feature_names)]
    if not shared:
        raise IngestionError("training and stream tables share no feature columns")
    if len(shared) < train.n_features:
        logger.warning("keeping %d of %d training features present in stream",
                       len(shared), train.n_features)
    return train.select(shared), stream.select(shared)


@dataclass(frozen=True)
class Standardizer:
    means: np.ndarray
    stddevs: np.ndarray

    def apply(self, features: np.ndarray) -> np.ndarray:
        return apply_standardizer(self, features)

    def invert(self, standardized: np.ndarray) -> np.ndarray:
        standardized = np.asarray(standardized, dtype=np.float64)
        return standardized * self.stddevs + self.means


def fit_standardizer(features: np.ndarray) -> Standardizer:
    """Per-column mean and population stddev; constant columns get stddev 1."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0 or features.shape[1] == 0:
        raise IngestionError("cannot fit a standardizer on an empty matrix")
    means = features.mean(axis=0)
    stddevs = features.std(axis=0)
    stddevs = np.where(stddevs <= STD_FLOOR, 1.0, stddevs)
    return Standardizer(means, stddevs)


def apply_standardizer(std: Standardizer, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != std.means.shape[0]:
        raise IngestionError(
            f"expected {std.means.shape[0]} feature columns, got shape {features.shape}")
    return (features - std.means) / std.stddevs
