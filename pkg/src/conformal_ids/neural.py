"""Dense single-logit feedforward networks with Adam/BCE training.

Two architectures are used by the pipeline: the flow classifier
(64, 32 ReLU units with dropout 0.3) and the conformal evaluator's internal
MLP (256, 128, 64 GELU units with LayerNorm and dropout 0.2). Both emit one
logit per row; ``predict_proba`` turns it into ``[P(benign), P(attack)]``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf, expit

logger = logging.getLogger(__name__)

LN_EPS = 1e-5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
TEMPERATURE_GRID = np.geomspace(0.05, 20.0, 101)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    width: int
    activation: str = "relu"
    layer_norm: bool = False
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("layer width must be >= 1")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


FNN_LAYERS = (
    LayerSpec(64, "relu", False, 0.3),
    LayerSpec(32, "relu", False, 0.3),
)
CE_MLP_LAYERS = (
    LayerSpec(256, "gelu", True, 0.2),
    LayerSpec(128, "gelu", True, 0.2),
    LayerSpec(64, "gelu", True, 0.2),
)


def _activate(kind, u):
    """Return the activation and the GELU normal CDF (None for ReLU) for reuse in backward."""
    if kind == "relu":
        return np.maximum(u, 0.0), None
    cdf = 0.5 * (1.0 + erf(u / _SQRT2))
    return u * cdf, cdf


def _activate_grad(kind, u, cdf):
    if kind == "relu":
        return (u > 0).astype(u.dtype)
    return cdf + u * _INV_SQRT_2PI * np.exp(-0.5 * u * u)


def layer_norm(a: np.ndarray) -> np.ndarray:
    """Row-wise normalization without the affine part."""
    mu = a.mean(axis=1, keepdims=True)
    var = a.var(axis=1, keepdims=True)
    return (a - mu) / np.sqrt(var + LN_EPS)


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy on logits, in the overflow-safe form."""
    return float(np.mean(np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0) - z * y))


@dataclass
class MLPModel:
    input_dim: int
    layers: tuple
    params: dict = field(default_factory=dict)
    temperature: float = 1.0
    seed: int = 0

    @property
    def widths(self) -> tuple:
        return tuple(spec.width for spec in self.layers)

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "MLPModel":
        return MLPModel(self.input_dim, self.layers,
                        {k: v.copy() for k, v in self.params.items()},
                        self.temperature, self.seed)

    def init_params(self, seed: int) -> None:
        """He-uniform for ReLU layers, Xavier-uniform for GELU and the output; zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        fan_in = self.input_dim
        for i, spec in enumerate(self.layers):
            if spec.activation == "relu":
                bound = math.sqrt(6.0 / fan_in)
            else:
                bound = math.sqrt(6.0 / (fan_in + spec.width))
            params[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, spec.width))
            params[f"b{i}"] = np.zeros(spec.width)
            if spec.layer_norm:
                params[f"gamma{i}"] = np.ones(spec.width)
                params[f"beta{i}"] = np.zeros(spec.width)
            fan_in = spec.width
        bound = math.sqrt(6.0 / (fan_in + 1))
        params["W_out"] = rng.uniform(-bound, bound, size=(fan_in, 1))
        params["b_out"] = np.zeros(1)
        self.params = params
        self.seed = seed

    # -- forward / backward -------------------------------------------------

    def forward(self, X: np.ndarray, rng=None, cache: list = None) -> np.ndarray:
        """Raw logits for a 2-D batch. Dropout is active only when ``rng`` is given."""
        h = X
        p = self.params
        for i, spec in enumerate(self.layers):
            a = h @ p[f"W{i}"] + p[f"b{i}"]
            if spec.layer_norm:
                mu = a.mean(axis=1, keepdims=True)
                inv_std = 1.0 / np.sqrt(a.var(axis=1, keepdims=True) + LN_EPS)
                normed = (a - mu) * inv_std
                u = normed * p[f"gamma{i}"] + p[f"beta{i}"]
            else:
                normed = inv_std = None
                u = a
            g, cdf = _activate(spec.activation, u)
            mask = None
            if rng is not None and spec.dropout_p > 0.0:
                mask = (rng.random(g.shape) >= spec.dropout_p) / (1.0 - spec.dropout_p)
                g = g * mask
            if cache is not None:
                cache.append((h, u, cdf, normed, inv_std, mask))
            h = g
        if cache is not None:
            cache.append(h)
        return (h @ p["W_out"] + p["b_out"])[:, 0]

    def backward(self, cache: list, dz: np.ndarray) -> dict:
        p = self.params
        grads = {}
        h_last = cache[-1]
        dz = dz[:, None]
        grads["W_out"] = h_last.T @ dz
        grads["b_out"] = dz.sum(axis=0)
        dh = dz @ p["W_out"].T
        for i in range(len(self.layers) - 1, -1, -1):
            spec = self.layers[i]
            h_prev, u, cdf, normed, inv_std, mask = cache[i]
            dg = dh * mask if mask is not None else dh
            du = dg * _activate_grad(spec.activation, u, cdf)
            if spec.layer_norm:
                grads[f"gamma{i}"] = (du * normed).sum(axis=0)
                grads[f"beta{i}"] = du.sum(axis=0)
                dn = du * p[f"gamma{i}"]
                da = inv_std * (dn - dn.mean(axis=1, keepdims=True)
                                - normed * (dn * normed).mean(axis=1, keepdims=True))
            else:
                da = du
            grads[f"W{i}"] = h_prev.T @ da
            grads[f"b{i}"] = da.sum(axis=0)
            if i > 0:
                dh = da @ p[f"W{i}"].T
        return grads

    def loss_and_grads(self, X, y, rng=None):
        cache = []
        z = self.forward(X, rng=rng, cache=cache)
        loss = bce_with_logits(z, y)
        dz = (expit(z) - y) / len(y)
        return loss, self.backward(cache, dz)

    # -- inference ----------------------------------------------------------

    def _check_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} columns, got shape {X.shape}")
        return np.ascontiguousarray(X)

    def logits(self, X, batch_size: int = 1024) -> np.ndarray:
        X = self._check_input(X)
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(X) == 0:
            return np.zeros(0)
        return np.concatenate([self.forward(X[s:s + batch_size])
                               for s in range(0, len(X), batch_size)])

    def predict_proba(self, X, batch_size: int = 1024) -> np.ndarray:
        return predict_proba(self, X, batch_size)


def build_mlp(input_dim: int, layers, seed: int) -> MLPModel:
    if input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    model = MLPModel(int(input_dim), tuple(layers))
    model.init_params(seed)
    return model


def build_fnn_classifier(input_dim: int, seed: int) -> MLPModel:
    return build_mlp(input_dim, FNN_LAYERS, seed)


def build_ce_mlp(input_dim: int, seed: int) -> MLPModel:
    return build_mlp(input_dim, CE_MLP_LAYERS, seed)


def train(model: MLPModel, X, y, cfg: TrainConfig) -> MLPModel:
    """Train ``model`` in place with Adam on mean BCE-with-logits and return it.

    Each epoch draws its permutation (and all dropout masks) from a host-side
    generator seeded with ``cfg.seed``, so identical inputs give identical
    weights.
    """
    X = model._check_input(X)
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(X) == 0:
        raise TrainingError("cannot train on empty data")
    if len(y) != len(X):
        raise TrainingError(f"{len(X)} rows but {len(y)} labels")

    rng = np.random.default_rng(cfg.seed)
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(w) for k, w in model.params.items()}
    step = 0
    history = []
    n = len(X)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss, grads = model.loss_and_grads(X[idx], y[idx], rng)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            step += 1
            c1 = 1.0 - ADAM_BETA1 ** step
            c2 = 1.0 - ADAM_BETA2 ** step
            for name, g in grads.items():
                m[name] *= ADAM_BETA1
                m[name] += (1 - ADAM_BETA1) * g
                v[name] *= ADAM_BETA2
                v[name] += (1 - ADAM_BETA2) * g * g
                model.params[name] -= (cfg.learning_rate * (m[name] / c1)
                                       / (np.sqrt(v[name] / c2) + ADAM_EPS))
            total += loss * len(idx)
        history.append(total / n)
        logger.debug("epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, history[-1])
    if history:
        logger.info("trained %s for %d epochs, final loss %.5f",
                    model.widths, cfg.epochs, history[-1])
    return model


def predict_proba(model: MLPModel, X, batch_size: int = 1024) -> np.ndarray:
    """Return an ``N x 2`` matrix of ``[1 - p, p]`` with ``p = sigmoid(logit / T)``.

    ``1 - p`` is evaluated as ``sigmoid(-logit / T)`` so confident rows keep
    their tiny complementary probability instead of rounding it to zero.
    """
    z = model.logits(X, batch_size) / model.temperature
    return np.column_stack([expit(-z), expit(z)])


def fit_temperature(model: MLPModel, X_val, y_val, batch_size: int = 1024) -> float:
    """Pick the temperature minimizing validation BCE on a fixed log grid.

    Falls back to 1 when the validation set is empty or single-class.
    """
    y_val = np.asarray(y_val, dtype=np.float64).ravel()
    if len(y_val) == 0 or len(np.unique(y_val)) < 2:
        logger.warning("degenerate validation set for temperature scaling; using T=1")
        model.temperature = 1.0
        return 1.0
    z = model.logits(X_val, batch_size)
    losses = [bce_with_logits(z / t, y_val) for t in TEMPERATURE_GRID]
    model.temperature = float(TEMPERATURE_GRID[int(np.argmin(losses))])
    return model.temperature


def save_model(model: MLPModel, path) -> None:
    arch = {
        "input_dim": model.input_dim,
        "layers": [asdict(s) for s in model.layers],
        "temperature": model.temperature,
        "seed": model.seed,
        "param_order": list(model.params),
    }
    arrays = {f"param__{k}": np.asarray(v, dtype=np.float64) for k, v in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, arch=np.array(json.dumps(arch)), **arrays)


def load_model(path) -> MLPModel:
    with np.load(Path(path), allow_pickle=False) as data:
        arch = json.loads(str(data["arch"]))
        params = {k: data[f"param__{k}"].copy() for k in arch["param_order"]}
    return MLPModel(arch["input_dim"], tuple(LayerSpec(**s) for s in arch["layers"]),
                    params, float(arch["temperature"]), int(arch["seed"]))
