"""Regression surrogates for drag: a linear baseline and a ReLU MLP.

The MLP is trained with plain full-batch gradient descent on the mean
squared error. Inputs and targets are standardized with statistics taken
from the training split; those statistics live on the model so that
prediction and input gradients are expressed in raw units.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataset import Dataset
from .errors import DivergenceError, SingularFitError
from .geometry import ShapeParams

__all__ = [
    "N_INPUTS",
    "HIDDEN_UNITS",
    "HIDDEN_LAYERS",
    "DEFAULT_INIT_SCALE",
    "LinearModel",
    "CvReport",
    "MlpModel",
    "TrainConfig",
    "TrainTrace",
    "fit_linear",
    "predict_linear",
    "linear_mse",
    "kfold_cv",
    "train_test_split",
    "mlp_init",
    "mlp_forward",
    "mlp_predict",
    "mlp_param_gradient",
    "mlp_input_gradient",
    "mlp_mse",
    "train",
]

N_INPUTS = 5
HIDDEN_UNITS = 32
HIDDEN_LAYERS = 6
#: sqrt(6) turns the uniform fan-in init into He-uniform, which keeps the
#: activation scale roughly constant through a deep ReLU stack.
DEFAULT_INIT_SCALE = math.sqrt(6.0)


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, ShapeParams):
        return x.as_vector()[None, :]
    arr = np.asarray(x, dtype=float)
    return arr[None, :] if arr.ndim == 1 else arr


# --------------------------------------------------------------------------
# Linear baseline
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LinearModel:
    intercept: float
    coefficients: np.ndarray  # (5,) over theta1..theta4, width

    def __post_init__(self):
        coef = np.array(self.coefficients, dtype=float)
        if coef.shape != (N_INPUTS,):
            raise ValueError(f"expected {N_INPUTS} coefficients, got {coef.shape}")
        if not (np.isfinite(coef).all() and math.isfinite(self.intercept)):
            raise ValueError("linear model has non-finite parameters")
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "intercept", float(self.intercept))


def _fit_linear_xy(X: np.ndarray, y: np.ndarray) -> LinearModel:
    """Least squares with intercept via the (centered) normal equations.

    A feature column that is constant *and* is the width column is dropped
    with coefficient 0: every dataset holds a single case width, so that
    column is always collinear with the intercept. Any other rank
    deficiency is an error.
    """
    xm = X.mean(axis=0)
    Xc = X - xm
    cols = list(range(N_INPUTS))
    if np.ptp(X[:, 4]) == 0.0:
        cols.remove(4)
    A = Xc[:, cols]
    if np.linalg.matrix_rank(A) < len(cols):
        raise SingularFitError("design matrix is rank deficient")
    ym = y.mean()
    beta = np.linalg.solve(A.T @ A, A.T @ (y - ym))
    coef = np.zeros(N_INPUTS)
    coef[cols] = beta
    return LinearModel(float(ym - xm @ coef), coef)


def fit_linear(ds: Dataset) -> LinearModel:
    """Exact residual-sum-of-squares minimizer with intercept."""
    return _fit_linear_xy(ds.features(), ds.targets())


def predict_linear(m: LinearModel, p) -> float | np.ndarray:
    """``intercept + coefficients . x`` for a ShapeParams or a feature array."""
    if isinstance(p, ShapeParams):
        return float(m.intercept + m.coefficients @ p.as_vector())
    return m.intercept + _as_matrix(p) @ m.coefficients


def linear_mse(m: LinearModel, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((predict_linear(m, X) - y) ** 2))


@dataclass(frozen=True)
class CvReport:
    fold_mse: tuple[float, ...]
    folds: tuple[tuple[int, ...], ...]

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.fold_mse))


def kfold_cv(ds: Dataset, k: int, seed: int) -> CvReport:
    """k-fold cross-validation of the linear model.

    Sample order is shuffled with ``seed``; fold sizes differ by at most one.
    """
    n = len(ds)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > n:
        raise ValueError(f"k = {k} exceeds the dataset size {n}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    X, y = ds.features(), ds.targets()
    mses = []
    for test in folds:
        mask = np.ones(n, dtype=bool)
        mask[test] = False
        model = _fit_linear_xy(X[mask], y[mask])
        mses.append(linear_mse(model, X[test], y[test]))
    return CvReport(tuple(mses), tuple(tuple(int(i) for i in f) for f in folds))


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MlpModel:
    """Fully connected ReLU regressor.

    ``weights[k]`` has shape ``(units_k, units_{k-1})``. Hidden layers use
    ReLU, the output layer is linear. Inputs are mapped through
    ``(x - x_mean) / x_scale`` and the raw output through
    ``y_mean + y_scale * out``.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    x_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_INPUTS))
    x_scale: np.ndarray = field(default_factory=lambda: np.ones(N_INPUTS))
    y_mean: float = 0.0
    y_scale: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=float) for w in self.weights)
        bs = tuple(np.array(b, dtype=float) for b in self.biases)
        if len(ws) != len(bs) or not ws:
            raise ValueError("need one bias vector per weight matrix")
        if ws[0].shape[1] != N_INPUTS or ws[-1].shape[0] != 1:
            raise ValueError("first layer must take 5 inputs and last must emit 1")
        for k, (w, b) in enumerate(zip(ws, bs)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: bias shape {b.shape} vs weight {w.shape}")
            if k and w.shape[1] != ws[k - 1].shape[0]:
                raise ValueError(f"layer {k}: expects {w.shape[1]} inputs, "
                                 f"previous layer emits {ws[k - 1].shape[0]}")
        for arr in ws + bs:
            arr.setflags(write=False)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "x_mean", np.array(self.x_mean, dtype=float))
        object.__setattr__(self, "x_scale", np.array(self.x_scale, dtype=float))
        object.__setattr__(self, "y_mean", float(self.y_mean))
        object.__setattr__(self, "y_scale", float(self.y_scale))

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.weights, self.biases))

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def hidden_layers(self) -> int:
        return len(self.weights) - 1

    def same_as(self, other: MlpModel) -> bool:
        """Bit-exact equality of every parameter and statistic."""
        return (
            self.dims == other.dims
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
            and np.array_equal(self.x_mean, other.x_mean)
            and np.array_equal(self.x_scale, other.x_scale)
            and self.y_mean == other.y_mean
            and self.y_scale == other.y_scale
        )

    def to_json(self) -> str:
        return json.dumps({
            "version": "mlp-v1",
            "dims": self.dims,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
            "seed": self.seed,
        })

    @classmethod
    def from_json(cls, text: str) -> MlpModel:
        obj = json.loads(text)
        if obj.get("version") != "mlp-v1":
            raise ValueError(f"unsupported model version {obj.get('version')!r}")
        dims = obj["dims"]
        weights = [np.array(w).reshape(dims[k + 1], dims[k]) for k, w in enumerate(obj["weights"])]
        return cls(tuple(weights), tuple(np.array(b) for b in obj["biases"]),
                   np.array(obj["x_mean"]), np.array(obj["x_scale"]),
                   obj["y_mean"], obj["y_scale"], obj.get("seed"))


@dataclass(frozen=True)
class TrainConfig:
    step_size: float = 1e-2
    epochs: int = 10000
    checkpoint_interval: int = 1000
    test_fraction: float = 0.2
    seed: int = 0
    init_scale: float = DEFAULT_INIT_SCALE

    def __post_init__(self):
        if not self.step_size >= 0:
            raise ValueError(f"step_size must be non-negative, got {self.step_size}")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        if self.epochs < self.checkpoint_interval:
            raise ValueError("epochs must be >= checkpoint_interval")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must lie in [0, 1), got {self.test_fraction}")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be positive")


@dataclass(frozen=True)
class TrainTrace:
    """Training record; MSE values are in standardized target units.

    ``loss_checkpoints`` holds measured losses only. The leading 0 that the
    step-size score compares against is added by ``scoring_losses``.
    """

    loss_checkpoints: tuple[tuple[int, float], ...]
    final_train_mse: float
    final_test_mse: float
    grad_norm_at_init: float
    seed: int
    initial_mse: float = math.nan

    def __post_init__(self):
        epochs = [e for e, _ in self.loss_checkpoints]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("checkpoint epochs must be strictly increasing")

    @property
    def losses(self) -> list[float]:
        return [loss for _, loss in self.loss_checkpoints]

    @property
    def scoring_losses(self) -> list[float]:
        return [0.0] + self.losses


def train_test_split(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle; the last ``ceil(test_fraction * n)`` indices are the test set."""
    perm = np.random.default_rng(seed).permutation(n)
    n_test = math.ceil(test_fraction * n) if test_fraction > 0 else 0
    if n_test >= n:
        n_test = n - 1
    return perm[: n - n_test], perm[n - n_test:]


def mlp_init(seed: int, init_scale: float = DEFAULT_INIT_SCALE, *,
             hidden_layers: int = HIDDEN_LAYERS, hidden_units: int = HIDDEN_UNITS) -> MlpModel:
    """Uniform fan-in initialization, zero biases, deterministic per seed."""
    if not init_scale > 0:
        raise ValueError("init_scale must be positive")
    rng = np.random.default_rng(seed)
    dims = [N_INPUTS] + [hidden_units] * hidden_layers + [1]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = init_scale * math.sqrt(1.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(tuple(weights), tuple(biases), seed=seed)


def _forward_std(weights, biases, Z: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass on standardized inputs ``Z`` of shape ``(n, 5)``.

    Returns the standardized output ``(n,)`` and the hidden pre-activations.
    """
    pre = []
    a = Z
    last = len(weights) - 1
    for k, (w, b) in enumerate(zip(weights, biases)):
        s = a @ w.T + b
        if k == last:
            return s[:, 0], pre
        pre.append(s)
        a = np.maximum(s, 0.0)
    raise AssertionError("unreachable")


def _backward_std(weights, Z, pre, dout):
    """Parameter gradients given ``dout = dL/d(output)`` of shape ``(n,)``.

    Also returns ``dL/dZ``.
    """
    n_layers = len(weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    delta = dout[:, None]
    for k in range(n_layers - 1, -1, -1):
        a_prev = Z if k == 0 else np.maximum(pre[k - 1], 0.0)
        gw[k] = delta.T @ a_prev
        gb[k] = delta.sum(axis=0)
        delta = delta @ weights[k]
        if k > 0:
            delta = delta * (pre[k - 1] > 0.0)
    return gw, gb, delta


def mlp_forward(m: MlpModel, p) -> float | np.ndarray:
    """Predicted drag for a ShapeParams (float) or an ``(n, 5)`` array."""
    X = _as_matrix(p)
    out, _ = _forward_std(m.weights, m.biases, (X - m.x_mean) / m.x_scale)
    y = m.y_mean + m.y_scale * out
    return float(y[0]) if isinstance(p, ShapeParams) else y


mlp_predict = mlp_forward


def mlp_mse(m: MlpModel, X: np.ndarray, y: np.ndarray) -> float:
    """MSE in standardized target units."""
    if len(y) == 0:
        return math.nan
    out, _ = _forward_std(m.weights, m.biases, (X - m.x_mean) / m.x_scale)
    return float(np.mean((out - (y - m.y_mean) / m.y_scale) ** 2))


def mlp_param_gradient(m: MlpModel, X: np.ndarray, y: np.ndarray):
    """Standardized MSE and its gradient w.r.t. every weight and bias."""
    Z = (np.asarray(X, dtype=float) - m.x_mean) / m.x_scale
    t = (np.asarray(y, dtype=float) - m.y_mean) / m.y_scale
    out, pre = _forward_std(m.weights, m.biases, Z)
    r = out - t
    gw, gb, _ = _backward_std(m.weights, Z, pre, 2.0 * r / len(t))
    return float(np.mean(r * r)), gw, gb


def mlp_input_gradient(m: MlpModel, p) -> np.ndarray:
    """Exact d(prediction)/d(theta1..theta4, width).

    For an ``(n, 5)`` array the result has shape ``(n, 5)``. ReLU
    derivatives are taken as 0 at and below the kink.
    """
    X = _as_matrix(p)
    Z = (X - m.x_mean) / m.x_scale
    out, pre = _forward_std(m.weights, m.biases, Z)
    _, _, dz = _backward_std(m.weights, Z, pre, np.ones(len(out)))
    grad = dz * (m.y_scale / m.x_scale)
    return grad[0] if isinstance(p, ShapeParams) else grad


def _standardization(X: np.ndarray, y: np.ndarray):
    x_mean = X.mean(axis=0)
    x_scale = X.std(axis=0)
    x_scale[x_scale == 0.0] = 1.0
    y_mean = float(y.mean())
    y_scale = float(y.std()) or 1.0
    return x_mean, x_scale, y_mean, y_scale


def train(m: MlpModel, ds: Dataset, cfg: TrainConfig) -> tuple[MlpModel, TrainTrace]:
    """Full-batch gradient descent on the standardized MSE.

    Standardization statistics are recomputed from the training split and
    stored on the returned model. The test split is never used for
    gradients. With ``test_fraction == 0`` the reported test MSE equals the
    train MSE.

    Raises
    ------
    DivergenceError
        The loss became non-finite; ``exc.trace`` holds checkpoints so far.
    """
    X, y = ds.features(), ds.targets()
    if len(y) == 0:
        raise ValueError("cannot train on an empty dataset")
    tr, te = train_test_split(len(y), cfg.test_fraction, cfg.seed)
    x_mean, x_scale, y_mean, y_scale = _standardization(X[tr], y[tr])
    Ztr = (X[tr] - x_mean) / x_scale
    ttr = (y[tr] - y_mean) / y_scale
    weights = [w.copy() for w in m.weights]
    biases = [b.copy() for b in m.biases]
    n = len(ttr)
    lr = cfg.step_size

    def snapshot():
        return replace(m, weights=tuple(weights), biases=tuple(biases), x_mean=x_mean,
                       x_scale=x_scale, y_mean=y_mean, y_scale=y_scale)

    checkpoints = []
    grad_norm0 = math.nan
    initial_mse = math.nan
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, cfg.epochs + 1):
            out, pre = _forward_std(weights, biases, Ztr)
            r = out - ttr
            loss = float(np.mean(r * r))
            gw, gb, _ = _backward_std(weights, Ztr, pre, (2.0 / n) * r)
            if epoch == 1:
                initial_mse = loss
                grad_norm0 = math.sqrt(sum(float(np.sum(g * g)) for g in gw + gb))
            if not math.isfinite(loss):
                trace = TrainTrace(tuple(checkpoints), math.nan, math.nan,
                                   grad_norm0, cfg.seed, initial_mse)
                raise DivergenceError(f"loss became non-finite at epoch {epoch}", trace=trace)
            if lr:
                for k in range(len(weights)):
                    weights[k] -= lr * gw[k]
                    biases[k] -= lr * gb[k]
            if epoch % cfg.checkpoint_interval == 0:
                ck = mlp_mse(snapshot(), X[tr], y[tr])
                if not math.isfinite(ck):
                    trace = TrainTrace(tuple(checkpoints), math.nan, math.nan,
                                       grad_norm0, cfg.seed, initial_mse)
                    raise DivergenceError(f"loss became non-finite at epoch {epoch}",
                                          trace=trace)
                checkpoints.append((epoch, ck))

    model = snapshot()
    train_mse = mlp_mse(model, X[tr], y[tr])
    test_mse = mlp_mse(model, X[te], y[te]) if len(te) else train_mse
    trace = TrainTrace(tuple(checkpoints), train_mse, test_mse, grad_norm0, cfg.seed, initial_mse)
    return model, trace
