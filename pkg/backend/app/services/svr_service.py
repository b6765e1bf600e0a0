"""services/svr_service.py

epsilon-support vector regression trained by SMO on the standard dual.

The dual is solved in the 2n-variable form beta = [alpha; alpha*] with
labels s = [+1..., -1...]:

    min  1/2 beta' Q beta + p' beta
    s.t. s' beta = 0,  0 <= beta <= C,
    Q = [[K, -K], [-K, K]],  p = [eps - z; eps + z]

Working pairs are chosen by maximal violation with second-order
selection of the partner. Features and targets are standardized with
training statistics, so epsilon and C act on standardized targets.
"""

import json
import logging
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial.distance import cdist

from app.config import settings
from app.exceptions import ConfigurationError, InvalidDataError, ShapeError
from app.schemas import ArrayModel, FloatArray, Standardizer

logger = logging.getLogger(__name__)

TAU = 1e-12  # floor for non-positive curvature


class SvrConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    C: float = Field(default=150.0, gt=0.0)
    epsilon: float = Field(default=0.1, ge=0.0)
    kernel: Literal["rbf", "linear"] = "rbf"
    gamma: float | None = Field(default=None, gt=0.0)  # None: 1 / (d * var(X))
    tolerance: float = Field(default=1e-3, gt=0.0)
    max_passes: int = Field(default=200_000, ge=1)
    debug: bool = False  # assert the objective never worsens between iterations


class SvrModel(ArrayModel):
    n_features: int = Field(ge=1)
    support_vectors: FloatArray  # standardized features, (n_sv, n_features)
    coefficients: FloatArray  # alpha - alpha*, in [-C, C]
    support_indices: list[int]  # rows of the training set
    bias: float
    kernel: Literal["rbf", "linear"]
    gamma: float
    C: float
    epsilon: float
    epsilon_scale: str = "standardized-target"
    feature_scaler: Standardizer
    target_scaler: Standardizer
    converged: bool
    iterations: int
    dual_objective: float  # maximization form

    @model_validator(mode="after")
    def validate_support(self) -> "SvrModel":
        if self.support_vectors.size == 0:
            self.support_vectors = self.support_vectors.reshape(0, self.n_features)
        if self.support_vectors.shape != (self.coefficients.size, self.n_features):
            raise ValueError(
                f"{self.coefficients.size} coefficients do not match support "
                f"vectors of shape {self.support_vectors.shape}"
            )
        if np.any(np.abs(self.coefficients) > self.C * (1 + 1e-12)):
            raise ValueError("Dual coefficients must lie in [-C, C]")
        return self


def kernel_matrix(
    a: np.ndarray, b: np.ndarray, kernel: str, gamma: float
) -> np.ndarray:
    if kernel == "linear":
        return a @ b.T
    return np.exp(-gamma * cdist(a, b, metric="sqeuclidean"))


def _labels(n: int) -> np.ndarray:
    return np.concatenate([np.ones(n), -np.ones(n)])


def _violation_gap(beta: np.ndarray, grad: np.ndarray, s: np.ndarray, c: float) -> float:
    """max over I_up of -s*G minus min over I_low of -s*G, clamped at 0."""
    up = ((s > 0) & (beta < c)) | ((s < 0) & (beta > 0))
    low = ((s > 0) & (beta > 0)) | ((s < 0) & (beta < c))
    if not up.any() or not low.any():
        return 0.0
    minus_sg = -s * grad
    return max(0.0, float(minus_sg[up].max() - minus_sg[low].min()))


def _bias(beta: np.ndarray, grad: np.ndarray, s: np.ndarray, c: float) -> float:
    """b = -rho, rho averaged over free variables (or mid-bracket if none)."""
    sg = s * grad
    at_upper = beta >= c
    at_lower = beta <= 0
    free = ~(at_upper | at_lower)
    if free.any():
        return -float(sg[free].mean())
    upper_bound = np.concatenate(
        [sg[at_upper & (s < 0)], sg[at_lower & (s > 0)], [np.inf]]
    ).min()
    lower_bound = np.concatenate(
        [sg[at_upper & (s > 0)], sg[at_lower & (s < 0)], [-np.inf]]
    ).max()
    return -float((upper_bound + lower_bound) / 2.0)


def _solve_dual(
    k: np.ndarray, z: np.ndarray, cfg: SvrConfig
) -> tuple[np.ndarray, np.ndarray, int, bool]:
    n = z.size
    s = _labels(n)
    p = np.concatenate([cfg.epsilon - z, cfg.epsilon + z])
    beta = np.zeros(2 * n)
    grad = p.copy()
    diag = np.concatenate([np.diag(k), np.diag(k)])
    c = cfg.C

    def column(i: int) -> np.ndarray:
        kk = k[:, i % n]
        return s[i] * s * np.concatenate([kk, kk])

    objective = 0.0
    converged = False
    iteration = 0
    for iteration in range(cfg.max_passes):
        up = ((s > 0) & (beta < c)) | ((s < 0) & (beta > 0))
        low = ((s > 0) & (beta > 0)) | ((s < 0) & (beta < c))
        minus_sg = -s * grad
        i = int(np.argmax(np.where(up, minus_sg, -np.inf)))
        g_max = minus_sg[i]
        g_min = np.where(low, minus_sg, np.inf).min()
        if not up.any() or g_max - g_min < cfg.tolerance:
            converged = True
            break

        q_i = column(i)
        # second-order choice of the partner among violating I_low members
        kk = np.concatenate([k[:, i % n], k[:, i % n]])
        grad_diff = g_max - minus_sg
        curvature = diag[i] + diag - 2.0 * kk
        curvature = np.where(curvature > 0, curvature, TAU)
        candidates = low & (minus_sg < g_max)
        gain = np.where(candidates, -(grad_diff**2) / curvature, np.inf)
        j = int(np.argmin(gain))
        q_j = column(j)

        old_i, old_j = beta[i], beta[j]
        if s[i] != s[j]:
            quad = diag[i] + diag[j] + 2.0 * q_i[j]
            delta = (-grad[i] - grad[j]) / (quad if quad > 0 else TAU)
            diff = beta[i] - beta[j]
            beta[i] += delta
            beta[j] += delta
            if diff > 0:
                if beta[j] < 0:
                    beta[j] = 0.0
                    beta[i] = diff
            elif beta[i] < 0:
                beta[i] = 0.0
                beta[j] = -diff
            if diff > 0:
                if beta[i] > c:
                    beta[i] = c
                    beta[j] = c - diff
            elif beta[j] > c:
                beta[j] = c
                beta[i] = c + diff
        else:
            quad = diag[i] + diag[j] - 2.0 * q_i[j]
            delta = (grad[i] - grad[j]) / (quad if quad > 0 else TAU)
            total = beta[i] + beta[j]
            beta[i] -= delta
            beta[j] += delta
            if total > c:
                if beta[i] > c:
                    beta[i] = c
                    beta[j] = total - c
                if beta[j] > c:
                    beta[j] = c
                    beta[i] = total - c
            else:
                if beta[j] < 0:
                    beta[j] = 0.0
                    beta[i] = total
                if beta[i] < 0:
                    beta[i] = 0.0
                    beta[j] = total

        grad += q_i * (beta[i] - old_i) + q_j * (beta[j] - old_j)

        if cfg.debug:
            updated = 0.5 * float(beta @ (grad + p))
            if updated > objective + 1e-12 * max(1.0, abs(objective)):
                raise AssertionError(
                    f"SMO objective rose from {objective} to {updated} "
                    f"at iteration {iteration}"
                )
            objective = updated
    else:
        iteration = cfg.max_passes

    return beta, grad, iteration, converged


def _validate_training_data(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise ShapeError(f"Features {x.shape} do not match {y.size} targets")
    if y.size < 2:
        raise InvalidDataError(f"SVR needs at least 2 samples, got {y.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidDataError("SVR training data contains non-finite values")
    return x, y


def svr_train(x: np.ndarray, y: np.ndarray, cfg: SvrConfig) -> SvrModel:
    """Fit an epsilon-SVR; only vectors with nonzero coefficients are kept.

    Non-convergence within `cfg.max_passes` is flagged on the model, not raised.

    Raises:
        ShapeError: If X and y disagree in length.
        InvalidDataError: If the data is non-finite or has fewer than 2 rows.
    """
    x, y = _validate_training_data(x, y)
    feature_scaler = Standardizer.fit(x)
    target_scaler = Standardizer.fit(y)
    xs = feature_scaler.transform(x)
    zs = target_scaler.transform(y[:, None])[:, 0]

    if cfg.gamma is not None:
        gamma = cfg.gamma
    else:
        variance = float(xs.var())
        gamma = 1.0 / (xs.shape[1] * (variance if variance > 0 else 1.0))

    k = kernel_matrix(xs, xs, cfg.kernel, gamma)
    beta, grad, iterations, converged = _solve_dual(k, zs, cfg)
    s = _labels(zs.size)
    p = np.concatenate([cfg.epsilon - zs, cfg.epsilon + zs])

    n = zs.size
    coefficients = beta[:n] - beta[n:]
    support = np.flatnonzero(coefficients != 0.0)
    if not converged:
        logger.warning(
            f"SMO stopped after {iterations} iterations without reaching "
            f"tolerance {cfg.tolerance}"
        )
    logger.info(
        f"Trained epsilon-SVR on {n} samples x {xs.shape[1]} features: "
        f"{support.size} support vectors, {iterations} iterations"
    )
    return SvrModel(
        n_features=xs.shape[1],
        support_vectors=xs[support],
        coefficients=coefficients[support],
        support_indices=support.tolist(),
        bias=_bias(beta, grad, s, cfg.C),
        kernel=cfg.kernel,
        gamma=gamma,
        C=cfg.C,
        epsilon=cfg.epsilon,
        feature_scaler=feature_scaler,
        target_scaler=target_scaler,
        converged=converged,
        iterations=iterations,
        dual_objective=-0.5 * float(beta @ (grad + p)),
    )


def decision_function(model: SvrModel, x: np.ndarray) -> np.ndarray:
    """Standardized-target output: sum_i c_i K(sv_i, x) + b, for rows of x."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise ShapeError(f"Expected features (n, {model.n_features}), got {x.shape}")
    if model.coefficients.size == 0:
        return np.full(x.shape[0], model.bias)
    xs = model.feature_scaler.transform(x)
    k = kernel_matrix(xs, model.support_vectors, model.kernel, model.gamma)
    return k @ model.coefficients + model.bias


def svr_predict_batch(model: SvrModel, x: np.ndarray) -> np.ndarray:
    standardized = decision_function(model, x)
    return model.target_scaler.inverse_transform(standardized[:, None])[:, 0]


def svr_predict(model: SvrModel, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"Expected a feature vector, got shape {x.shape}")
    return float(svr_predict_batch(model, x[None, :])[0])


def kkt_violation(model: SvrModel, x: np.ndarray, y: np.ndarray, cfg: SvrConfig) -> float:
    """Maximal-violating-pair gap of the model's dual on its training data."""
    x, y = _validate_training_data(x, y)
    xs = model.feature_scaler.transform(x)
    zs = model.target_scaler.transform(y[:, None])[:, 0]
    n = zs.size

    coefficients = np.zeros(n)
    coefficients[model.support_indices] = model.coefficients
    beta = np.concatenate([np.maximum(coefficients, 0.0), np.maximum(-coefficients, 0.0)])
    k_c = kernel_matrix(xs, xs, model.kernel, model.gamma) @ coefficients
    p = np.concatenate([cfg.epsilon - zs, cfg.epsilon + zs])
    grad = np.concatenate([k_c, -k_c]) + p
    return _violation_gap(beta, grad, _labels(n), cfg.C)


def save_svr_model(model: SvrModel, path: str | Path) -> None:
    payload = {"format_version": settings.MODEL_FORMAT_VERSION, **model.model_dump()}
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    logger.info(f"Saved SVR model to '{path}'")


def load_svr_model(path: str | Path) -> SvrModel:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    version = data.pop("format_version", None)
    if version != settings.MODEL_FORMAT_VERSION:
        raise ConfigurationError(f"'{path}' has SVR model format {version}")
    return SvrModel.model_validate(data)
