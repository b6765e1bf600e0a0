"""services/neural_service.py

Minimal fully-connected network engine: ReLU hidden layers, linear output,
mean-squared-error loss with an L2 penalty on weights (not biases),
backpropagation and mini-batch Adam. Everything runs in float64.
"""

import json
import logging
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.config import settings
from app.exceptions import ConfigurationError, PreconditionError, ShapeError, TrainingError
from app.schemas import ArrayModel, FloatArray

logger = logging.getLogger(__name__)


class Fcnn(ArrayModel):
    layer_sizes: list[int]
    weights: list[FloatArray]  # layer l: (layer_sizes[l], layer_sizes[l + 1])
    biases: list[FloatArray]  # layer l: (layer_sizes[l + 1],)
    l2_factor: float = Field(default=0.0, ge=0.0)

    @model_validator(mode="after")
    def validate_shapes(self) -> "Fcnn":
        n_layers = len(self.layer_sizes) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ValueError(
                f"{len(self.layer_sizes)} layer sizes need {n_layers} weight/bias pairs"
            )
        for i, (w, b) in enumerate(zip(self.weights, self.biases, strict=True)):
            expected = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise ValueError(
                    f"Layer {i} has weight {w.shape} / bias {b.shape}, expected {expected}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"Layer {i} has non-finite parameters")
        return self

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    def parameters(self) -> list[np.ndarray]:
        """Weights and biases interleaved: [W0, b0, W1, b1, ...]."""
        params = []
        for w, b in zip(self.weights, self.biases, strict=True):
            params.extend([w, b])
        return params

    def with_parameters(self, params: list[np.ndarray]) -> "Fcnn":
        return Fcnn(
            layer_sizes=list(self.layer_sizes),
            weights=[p.copy() for p in params[0::2]],
            biases=[p.copy() for p in params[1::2]],
            l2_factor=self.l2_factor,
        )


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=64, ge=1)
    learning_rate: float = Field(default=1e-3, ge=0.0)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0


class TrainReport(BaseModel):
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int


def fcnn_init(layer_sizes: list[int], l2_factor: float = 0.0, seed: int = 0) -> Fcnn:
    """He-uniform weights, zero biases; deterministic for a given seed."""
    if len(layer_sizes) < 2:
        raise ConfigurationError(f"An FCNN needs at least 2 layers, got {layer_sizes}")
    if any(size < 1 for size in layer_sizes):
        raise ConfigurationError(f"Layer sizes must be positive, got {layer_sizes}")

    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:], strict=True):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Fcnn(
        layer_sizes=list(layer_sizes), weights=weights, biases=biases, l2_factor=l2_factor
    )


def parameter_count(net: Fcnn) -> int:
    return sum(p.size for p in net.parameters())


def _forward_cache(net: Fcnn, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Forward pass keeping every layer input and pre-activation for backprop."""
    activations = [x]
    pre_activations = []
    a = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases, strict=True)):
        z = a @ w + b
        pre_activations.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        activations.append(a)
    return activations, pre_activations


def forward_batch(net: Fcnn, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.n_inputs:
        raise ShapeError(f"Expected input (n, {net.n_inputs}), got {x.shape}")
    activations, _ = _forward_cache(net, x)
    return activations[-1]


def forward(net: Fcnn, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != net.n_inputs:
        raise ShapeError(f"Expected input of length {net.n_inputs}, got shape {x.shape}")
    return forward_batch(net, x[None, :])[0]


def _as_batch(net: Fcnn, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] == 0:
        raise PreconditionError("Batch must not be empty")
    if x.shape[0] != y.shape[0] or y.shape[1] != net.layer_sizes[-1]:
        raise ShapeError(f"Inputs {x.shape} and targets {y.shape} do not match")
    return x, y


def l2_penalty(net: Fcnn) -> float:
    return net.l2_factor * float(sum(np.sum(w * w) for w in net.weights))


def loss(net: Fcnn, x: np.ndarray, y: np.ndarray) -> float:
    """Mean squared error over the batch plus l2_factor * sum of squared weights."""
    x, y = _as_batch(net, x, y)
    residual = forward_batch(net, x) - y
    data_term = float(np.mean(np.sum(residual * residual, axis=1)))
    return data_term + l2_penalty(net)


def backward(net: Fcnn, x: np.ndarray, y: np.ndarray) -> list[np.ndarray]:
    """Exact gradient of `loss`, shaped like `net.parameters()`.

    The ReLU subgradient at 0 is taken as 0.
    """
    x, y = _as_batch(net, x, y)
    activations, pre_activations = _forward_cache(net, x)
    n = x.shape[0]

    delta = 2.0 * (activations[-1] - y) / n
    grads: list[np.ndarray] = []
    for i in range(len(net.weights) - 1, -1, -1):
        grad_w = activations[i].T @ delta + 2.0 * net.l2_factor * net.weights[i]
        grad_b = delta.sum(axis=0)
        grads = [grad_w, grad_b, *grads]
        if i > 0:
            delta = (delta @ net.weights[i].T) * (pre_activations[i - 1] > 0.0)
    return grads


def train(
    net: Fcnn,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    cfg: TrainConfig,
) -> tuple[Fcnn, TrainReport]:
    """Mini-batch Adam with seeded per-epoch shuffling.

    Returns the parameters of the epoch with the lowest validation loss.

    Raises:
        TrainingError: If a loss becomes non-finite.
    """
    x_train, y_train = _as_batch(net, x_train, y_train)
    x_val, y_val = _as_batch(net, x_val, y_val)

    rng = np.random.default_rng(cfg.seed)
    params = [p.copy() for p in net.parameters()]
    first_moment = [np.zeros_like(p) for p in params]
    second_moment = [np.zeros_like(p) for p in params]
    step = 0

    # view over `params`, which the optimizer updates in place
    current = Fcnn.model_construct(
        layer_sizes=list(net.layer_sizes),
        weights=params[0::2],
        biases=params[1::2],
        l2_factor=net.l2_factor,
    )
    best = net.with_parameters(params)
    best_val = np.inf
    best_epoch = 0
    train_history, val_history = [], []

    n = x_train.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            grads = backward(current, x_train[batch], y_train[batch])
            step += 1
            correction1 = 1.0 - cfg.beta1**step
            correction2 = 1.0 - cfg.beta2**step
            for p, g, m, v in zip(params, grads, first_moment, second_moment, strict=True):
                m *= cfg.beta1
                m += (1.0 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1.0 - cfg.beta2) * g * g
                p -= (
                    cfg.learning_rate
                    * (m / correction1)
                    / (np.sqrt(v / correction2) + cfg.adam_eps)
                )

        train_loss = loss(current, x_train, y_train)
        val_loss = loss(current, x_val, y_val)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingError(
                epoch, f"non-finite loss (train {train_loss}, validation {val_loss})"
            )
        train_history.append(train_loss)
        val_history.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best = net.with_parameters(params)
        logger.debug(
            f"Epoch {epoch + 1}/{cfg.epochs}: train {train_loss:.6g}, val {val_loss:.6g}"
        )

    logger.info(
        f"Trained {net.layer_sizes} for {cfg.epochs} epochs; "
        f"best validation loss {best_val:.6g} at epoch {best_epoch + 1}"
    )
    return best, TrainReport(
        train_loss=train_history, val_loss=val_history, best_epoch=best_epoch
    )


def fcnn_to_dict(net: Fcnn) -> dict:
    return {"format_version": settings.MODEL_FORMAT_VERSION, **net.model_dump()}


def fcnn_from_dict(data: dict) -> Fcnn:
    data = dict(data)
    version = data.pop("format_version", settings.MODEL_FORMAT_VERSION)
    if version != settings.MODEL_FORMAT_VERSION:
        raise ConfigurationError(f"Unsupported FCNN format version {version}")
    return Fcnn.model_validate(data)


def save_fcnn(net: Fcnn, path: str | Path) -> None:
    Path(path).write_text(json.dumps(fcnn_to_dict(net), sort_keys=True), encoding="utf-8")
    logger.info(f"Saved FCNN {net.layer_sizes} to '{path}'")


def load_fcnn(path: str | Path) -> Fcnn:
    return fcnn_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
