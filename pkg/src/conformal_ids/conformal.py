"""Conformal evaluators: per-class score buffers, thresholds and p-values.

All four strategies produce a :class:`Calibration` holding sorted per-class
nonconformity scores ``1 - P(true class)`` and per-class rejection
thresholds. They differ only in how the scoring model(s) are trained and
which samples get scored:

* ``ice``        one model on a proper-training split, held-out split scored
* ``cce``        k models, model j trained without fold j and scoring fold j;
                 at test time model j's score is ranked against fold j only
* ``approx_tce`` one model on all data, all data scored at once (cached)
* ``approx_cce`` one model on all data, scored fold by fold (optionally threaded)
"""

from __future__ import annotations

import bisect
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from .neural import MLPModel, fit_temperature, load_model, save_model

logger = logging.getLogger(__name__)

STRATEGIES = ("ice", "cce", "approx_tce", "approx_cce")
CLASSES = (0, 1)

TrainFn = Callable[[np.ndarray, np.ndarray, int], MLPModel]


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    predicted_class: int
    p_value: float
    score: float

    @property
    def decision(self) -> str:
        return "Accept" if self.accepted else "Reject"


@dataclass
class Calibration:
    strategy: str
    alpha: float
    score_buffers: dict
    thresholds: dict
    models: List[MLPModel] = field(default_factory=list)
    seed: int = 0
    k: Optional[int] = None
    fold_buffers: Optional[list] = None

    def predict_proba(self, X, batch_size: int = 1024) -> np.ndarray:
        """Class probabilities; multi-model calibrations average their members."""
        return self.member_proba(X, batch_size).mean(axis=0)

    def member_proba(self, X, batch_size: int = 1024) -> np.ndarray:
        """Per-model probabilities, shape ``(n_models, N, 2)``."""
        return np.stack([m.predict_proba(X, batch_size) for m in self.models])

    def exceedance_counts(self, member_scores: np.ndarray, classes: np.ndarray) -> np.ndarray:
        """Number of calibration scores of ``classes[i]`` at or above each test score.

        ``member_scores`` has one row per model. With one model this is the
        plain count against the pooled buffer; with fold models, row ``j`` is
        counted against fold ``j``'s scores and the counts are summed.
        """
        member_scores = np.atleast_2d(member_scores)
        counts = np.zeros(member_scores.shape[1], dtype=np.int64)
        for c in CLASSES:
            sel = classes == c
            if not sel.any():
                continue
            if len(self.score_buffers[c]) == 0:
                raise CalibrationError(f"no calibration scores for class {c}")
            if self.fold_buffers is None:
                buf = self.score_buffers[c]
                counts[sel] = len(buf) - np.searchsorted(buf, member_scores[0, sel], side="left")
            else:
                for j, folds in enumerate(self.fold_buffers):
                    buf = folds[c]
                    counts[sel] += len(buf) - np.searchsorted(buf, member_scores[j, sel],
                                                              side="left")
        return counts

    def reject_limit(self, c: int) -> int:
        """Largest exceedance count that still rejects: ``n_c - rank`` of the threshold."""
        n = len(self.score_buffers[c])
        return n - threshold_rank(n, self.alpha)

    def nonconforming(self, X, classes, batch_size: int = 1024) -> np.ndarray:
        """Whether each row is nonconforming for the given class (true-class check)."""
        classes = np.asarray(classes, dtype=np.int64)
        member = self.member_proba(X, batch_size)
        scores = member[:, np.arange(len(classes)), 1 - classes]
        counts = self.exceedance_counts(scores, classes)
        limits = np.array([self.reject_limit(c) for c in CLASSES])
        return counts <= limits[classes]


def nonconformity(probs, cls: int) -> float:
    """``1 - probs[cls]``, read off the complementary entry of a binary row."""
    return float(probs[1 - cls])


def threshold_rank(n: int, alpha: float) -> int:
    """1-based order statistic ``ceil((1 - alpha)(n + 1))`` clamped to ``[1, n]``."""
    if not 0.0 < alpha < 1.0:
        raise CalibrationError("alpha must be in (0, 1)")
    if n < 1:
        raise CalibrationError("cannot take a quantile of an empty score list")
    # guard against e.g. 0.95 * 20 evaluating to 19.000000000000004
    rank = math.ceil((1.0 - alpha) * (n + 1) - 1e-9)
    return min(max(rank, 1), n)


def quantile_threshold(scores, alpha: float) -> float:
    ordered = np.sort(np.asarray(scores, dtype=np.float64))
    return float(ordered[threshold_rank(len(ordered), alpha) - 1])


def p_value(score: float, buffer) -> float:
    """Smoothed ECDF: ``(1 + #{s' >= score}) / (len(buffer) + 1)`` for a sorted buffer."""
    n = len(buffer)
    if n == 0:
        logger.warning("p-value against an empty calibration buffer")
        return 1.0
    at_least = n - bisect.bisect_left(buffer, score)
    return (1 + at_least) / (n + 1)


def p_values(scores: np.ndarray, buffer: np.ndarray) -> np.ndarray:
    """Vectorized :func:`p_value` for many scores against one sorted buffer."""
    n = len(buffer)
    at_least = n - np.searchsorted(buffer, scores, side="left")
    return (1 + at_least) / (n + 1)


def _check_data(X, y, min_per_class: int = 1):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64).ravel()
    if len(X) != len(y):
        raise CalibrationError(f"{len(X)} rows but {len(y)} labels")
    counts = np.bincount(y, minlength=2)
    if len(counts) > 2:
        raise CalibrationError("labels must be binary")
    if counts.min() == 0:
        raise CalibrationError("both classes must be present for calibration")
    if counts.min() < min_per_class:
        raise CalibrationError(
            f"fold count {min_per_class} exceeds smallest class count {counts.min()}")
    return X, y


def stratified_folds(y: np.ndarray, k: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Disjoint shuffled folds covering every index, each class split evenly."""
    if k < 2:
        raise CalibrationError("k must be >= 2")
    folds = [[] for _ in range(k)]
    for c in CLASSES:
        idx = rng.permutation(np.flatnonzero(y == c))
        for j, part in enumerate(np.array_split(idx, k)):
            folds[j].append(part)
    return [np.sort(np.concatenate(parts)) for parts in folds]


def stratified_split(y: np.ndarray, fraction: float, rng: np.random.Generator):
    """Split indices into (proper training, calibration) with ``fraction`` kept for training."""
    if not 0.0 < fraction < 1.0:
        raise CalibrationError("split_fraction must be in (0, 1)")
    train_parts, cal_parts = [], []
    for c in CLASSES:
        idx = rng.permutation(np.flatnonzero(y == c))
        n_train = int(round(fraction * len(idx)))
        if n_train == 0 or n_train == len(idx):
            raise CalibrationError(f"split leaves class {c} absent from one partition")
        train_parts.append(idx[:n_train])
        cal_parts.append(idx[n_train:])
    return np.sort(np.concatenate(train_parts)), np.sort(np.concatenate(cal_parts))


def true_class_scores(probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    return probs[np.arange(len(y)), 1 - y]


def _finish(strategy, alpha, scores, labels, models, seed, k=None, fold_buffers=None):
    buffers = {c: np.sort(scores[labels == c]) for c in CLASSES}
    thresholds = {c: quantile_threshold(buffers[c], alpha) for c in CLASSES}
    return Calibration(strategy, alpha, buffers, thresholds, models, seed, k, fold_buffers)


def _seeds(seed: int, n: int) -> List[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def calibrate_ice(train_fn: TrainFn, X, y, split_fraction: float = 0.8,
                  alpha: float = 0.05, seed: int = 0) -> Calibration:
    X, y = _check_data(X, y)
    split_seed, model_seed = _seeds(seed, 2)
    train_idx, cal_idx = stratified_split(y, split_fraction, np.random.default_rng(split_seed))
    model = train_fn(X[train_idx], y[train_idx], model_seed)
    fit_temperature(model, X[cal_idx], y[cal_idx])
    scores = true_class_scores(model.predict_proba(X[cal_idx]), y[cal_idx])
    return _finish("ice", alpha, scores, y[cal_idx], [model], seed)


def calibrate_cce(train_fn: TrainFn, X, y, k: int = 5,
                  alpha: float = 0.05, seed: int = 0) -> Calibration:
    X, y = _check_data(X, y, min_per_class=k)
    fold_seed, *model_seeds = _seeds(seed, k + 1)
    folds = stratified_folds(y, k, np.random.default_rng(fold_seed))
    scores = np.empty(len(y))
    models, fold_buffers = [], []
    for j, held_out in enumerate(folds):
        mask = np.ones(len(y), dtype=bool)
        mask[held_out] = False
        model = train_fn(X[mask], y[mask], model_seeds[j])
        fit_temperature(model, X[held_out], y[held_out])
        fold_scores = true_class_scores(model.predict_proba(X[held_out]), y[held_out])
        scores[held_out] = fold_scores
        fold_buffers.append({c: np.sort(fold_scores[y[held_out] == c]) for c in CLASSES})
        models.append(model)
    return _finish("cce", alpha, scores, y, models, seed, k, fold_buffers)


def calibrate_approx_tce(train_fn: TrainFn, X, y, alpha: float = 0.05,
                         seed: int = 0) -> Calibration:
    X, y = _check_data(X, y)
    _, model_seed = _seeds(seed, 2)
    model = train_fn(X, y, model_seed)
    fit_temperature(model, X, y)
    probs = model.predict_proba(X)
    return _finish("approx_tce", alpha, true_class_scores(probs, y), y, [model], seed)


def calibrate_approx_cce(train_fn: TrainFn, X, y, k: int = 5, alpha: float = 0.05,
                         seed: int = 0, n_jobs: int = 1) -> Calibration:
    """Train one shared model on all data, then score stratified folds with it.

    Folds are scored concurrently when ``n_jobs > 1``; inference is read-only
    so the pooled buffers do not depend on scheduling.
    """
    X, y = _check_data(X, y, min_per_class=k)
    fold_seed, model_seed = _seeds(seed, 2)
    model = train_fn(X, y, model_seed)
    fit_temperature(model, X, y)
    folds = stratified_folds(y, k, np.random.default_rng(fold_seed))

    def score_fold(idx):
        return true_class_scores(model.predict_proba(X[idx]), y[idx])

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            fold_scores = list(pool.map(score_fold, folds))
    else:
        fold_scores = [score_fold(idx) for idx in folds]

    buffers = {c: [] for c in CLASSES}
    for idx, s in zip(folds, fold_scores):
        for c in CLASSES:
            buffers[c].append(s[y[idx] == c])
    scores = np.concatenate([np.concatenate(buffers[c]) for c in CLASSES])
    labels = np.concatenate([np.full(sum(len(b) for b in buffers[c]), c) for c in CLASSES])
    return _finish("approx_cce", alpha, scores, labels, [model], seed, k)


def calibrate(strategy: str, train_fn: TrainFn, X, y, *, alpha: float = 0.05, k: int = 5,
              split_fraction: float = 0.8, seed: int = 0, n_jobs: int = 1) -> Calibration:
    if strategy == "ice":
        return calibrate_ice(train_fn, X, y, split_fraction, alpha, seed)
    if strategy == "cce":
        return calibrate_cce(train_fn, X, y, k, alpha, seed)
    if strategy == "approx_tce":
        return calibrate_approx_tce(train_fn, X, y, alpha, seed)
    if strategy == "approx_cce":
        return calibrate_approx_cce(train_fn, X, y, k, alpha, seed, n_jobs)
    raise CalibrationError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def verdicts_from_member_probs(cal: Calibration, member: np.ndarray):
    """Vectorized verdict arrays ``(accepted, predicted_class, p_value, score)``.

    ``member`` holds per-model probabilities, shape ``(n_models, N, 2)``. The
    predicted class is the argmax of the averaged probabilities and the
    reported score is ``1 - mean P[predicted]``. Acceptance and p-values use
    the exceedance count of the predicted class: for a single model,
    rejecting when the count is at most ``n - rank`` is exactly
    ``score > threshold``.
    """
    member = np.asarray(member)
    if member.ndim == 2:
        member = member[None]
    rows = np.arange(member.shape[1])
    probs = member.mean(axis=0)
    pred = np.argmax(probs, axis=1)
    score = probs[rows, 1 - pred]
    counts = cal.exceedance_counts(member[:, rows, 1 - pred], pred)
    sizes = np.array([len(cal.score_buffers[c]) for c in CLASSES])
    limits = np.array([cal.reject_limit(c) for c in CLASSES])
    pvals = (1 + counts) / (sizes[pred] + 1)
    accepted = counts > limits[pred]
    return accepted, pred, pvals, score


def evaluate_many(cal: Calibration, X, batch_size: int = 1024):
    return verdicts_from_member_probs(cal, cal.member_proba(X, batch_size))


def evaluate(cal: Calibration, x) -> Verdict:
    """Accept or reject a single flow."""
    accepted, pred, pvals, score = evaluate_many(cal, x)
    return Verdict(bool(accepted[0]), int(pred[0]), float(pvals[0]), float(score[0]))


def save_calibration(cal: Calibration, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "strategy": cal.strategy,
        "alpha": cal.alpha,
        "seed": cal.seed,
        "k": cal.k,
        "thresholds": {str(c): t for c, t in cal.thresholds.items()},
        "n_models": len(cal.models),
    }
    arrays = {f"scores_{c}": np.asarray(b, dtype=np.float64) for c, b in cal.score_buffers.items()}
    meta["n_folds"] = 0 if cal.fold_buffers is None else len(cal.fold_buffers)
    for j, folds in enumerate(cal.fold_buffers or []):
        for c in CLASSES:
            arrays[f"fold{j}_scores_{c}"] = np.asarray(folds[c], dtype=np.float64)
    with open(directory / "calibration.npz", "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)
    for j, model in enumerate(cal.models):
        save_model(model, directory / f"ce_model_{j}.npz")


def load_calibration(directory) -> Calibration:
    directory = Path(directory)
    with np.load(directory / "calibration.npz", allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        buffers = {c: data[f"scores_{c}"].copy() for c in CLASSES}
        fold_buffers = [{c: data[f"fold{j}_scores_{c}"].copy() for c in CLASSES}
                        for j in range(meta["n_folds"])] or None
    models = [load_model(directory / f"ce_model_{j}.npz") for j in range(meta["n_models"])]
    return Calibration(meta["strategy"], meta["alpha"], buffers,
                       {int(c): float(t) for c, t in meta["thresholds"].items()},
                       models, meta["seed"], meta["k"], fold_buffers)
