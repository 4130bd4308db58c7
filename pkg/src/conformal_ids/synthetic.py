"""Seeded Gaussian-mixture flow streams with piecewise-stationary drift."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np

from .ingest import FlowTable

DEFAULT_N_FEATURES = 20


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    length: int
    benign_mean: np.ndarray
    attack_mean: np.ndarray
    scale: float = 1.0
    attack_prior: float = 0.5


@dataclass(frozen=True)
class DriftSpec:
    n_features: int = DEFAULT_N_FEATURES
    segments: tuple = ()
    seed: int = 0

    @property
    def boundaries(self) -> List[int]:
        """Start index of every segment after the first."""
        return [int(b) for b in np.cumsum([s.length for s in self.segments])[:-1]]

    @property
    def length(self) -> int:
        return int(sum(s.length for s in self.segments))


def _vector(value, n_features, what):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(n_features, float(arr))
    if arr.shape != (n_features,):
        raise SpecError(f"{what} must be a scalar or a length-{n_features} vector")
    return arr


def make_spec(segments, n_features: int = DEFAULT_N_FEATURES, seed: int = 0) -> DriftSpec:
    """Build and validate a :class:`DriftSpec` from plain mappings or tuples.

    Each segment is ``(length, benign_mean, attack_mean, scale, attack_prior)``
    or a dict with those keys; means may be scalars (broadcast) or vectors.
    """
    if n_features < 1:
        raise SpecError("n_features must be >= 1")
    if not segments:
        raise SpecError("at least one segment is required")
    built = []
    for i, seg in enumerate(segments):
        if isinstance(seg, Segment):
            seg = (seg.length, seg.benign_mean, seg.attack_mean, seg.scale, seg.attack_prior)
        if isinstance(seg, dict):
            unknown = set(seg) - {"length", "benign_mean", "attack_mean", "scale", "attack_prior"}
            if unknown:
                raise SpecError(f"segment {i}: unknown keys {sorted(unknown)}")
            try:
                seg = (seg["length"], seg["benign_mean"], seg["attack_mean"],
                       seg.get("scale", 1.0), seg.get("attack_prior", 0.5))
            except KeyError as exc:
                raise SpecError(f"segment {i}: missing key {exc}") from None
        length, benign, attack, scale, prior = seg
        if int(length) != length or length < 1:
            raise SpecError(f"segment {i}: length must be a positive integer")
        if not scale > 0:
            raise SpecError(f"segment {i}: scale must be > 0")
        if not 0.0 < prior < 1.0:
            raise SpecError(f"segment {i}: attack_prior must be in (0, 1)")
        built.append(Segment(int(length), _vector(benign, n_features, "benign_mean"),
                             _vector(attack, n_features, "attack_mean"),
                             float(scale), float(prior)))
    return DriftSpec(int(n_features), tuple(built), int(seed))


def spec_from_dict(data: dict) -> DriftSpec:
    if not isinstance(data, dict):
        raise SpecError("drift spec must be a mapping")
    unknown = set(data) - {"n_features", "segments", "seed"}
    if unknown:
        raise SpecError(f"unknown drift spec keys {sorted(unknown)}")
    return make_spec(data.get("segments") or [], int(data.get("n_features", DEFAULT_N_FEATURES)),
                     int(data.get("seed", 0)))


def feature_names(n_features: int) -> tuple:
    width = max(2, len(str(n_features - 1)))
    return tuple(f"f{j:0{width}d}" for j in range(n_features))


def generate_stream(spec: DriftSpec) -> FlowTable:
    if not spec.segments:
        raise SpecError("at least one segment is required")
    rng = np.random.default_rng(spec.seed)
    blocks, labels = [], []
    for seg in spec.segments:
        y = (rng.random(seg.length) < seg.attack_prior).astype(np.int64)
        means = np.where(y[:, None] == 1, seg.attack_mean, seg.benign_mean)
        blocks.append(means + seg.scale * rng.standard_normal((seg.length, spec.n_features)))
        labels.append(y)
    n = spec.length
    return FlowTable(
        features=np.vstack(blocks),
        labels=np.concatenate(labels),
        feature_names=feature_names(spec.n_features),
        row_order=np.arange(n, dtype=np.int64),
        source=f"synthetic(seed={spec.seed})",
        metadata={"boundaries": spec.boundaries},
    )


def write_stream_csv(table: FlowTable, path) -> Path:
    """Write ``table`` in the flow CSV schema plus a ``.boundaries.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(table.feature_names) + ["Label"])
        for row, label in zip(table.features, table.labels):
            writer.writerow([repr(float(v)) for v in row] + ["Attack" if label else "Benign"])
    sidecar = path.with_suffix(".boundaries.json")
    sidecar.write_text(json.dumps({"boundaries": table.metadata.get("boundaries", []),
                                   "n_rows": len(table)}, indent=2) + "\n")
    return sidecar


def shifted_stream_spec(n_train: int = 4000, n_stream: int = 10000, shift_at: int = 5000,
                        shift_sigmas: float = 4.0, separation: float = 6.0,
                        n_features: int = DEFAULT_N_FEATURES, seed: int = 0):
    """Training and stream specs for an abrupt benign-mean shift.

    Benign and attack means sit ``separation`` sigmas apart along the all-ones
    direction; at ``shift_at`` the benign mean moves ``shift_sigmas`` sigmas
    toward the attack mean. ``shift_sigmas=0`` gives a stationary stream.
    """
    direction = np.ones(n_features) / np.sqrt(n_features)
    benign = -0.5 * separation * direction
    attack = 0.5 * separation * direction
    shifted = benign + shift_sigmas * direction
    train = make_spec([(n_train, benign, attack, 1.0, 0.5)], n_features, seed)
    segments = [(shift_at, benign, attack, 1.0, 0.5)]
    if n_stream > shift_at:
        segments.append((n_stream - shift_at, shifted, attack, 1.0, 0.5))
    stream = make_spec(segments, n_features, seed + 1)
    return train, stream
