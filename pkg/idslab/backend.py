"""
Score Backends for IDS Lab
Conditional noise predictors eps(z_t, y, t) with exact vector-Jacobian products:
an analytic Gaussian-mixture oracle and a tiny trainable MLP denoiser
"""

import abc
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .core import (
    Latent,
    NoiseSchedule,
    Rng,
    alpha_at,
    alpha_values,
    check_same_shape,
    check_time,
)
from .errors import ConditionError, DataError, DomainError, ShapeError

logger = logging.getLogger(__name__)

BACKEND_SCHEMA = 1

# Denoiser time embedding: 8 geometric frequencies, sin and cos of each.
TIME_FREQUENCIES = np.geomspace(1.0, 128.0, 8)


@dataclass(frozen=True)
class Condition:
    """Discrete prompt stand-in: Null is the unconditional token, otherwise a label id"""
    label: Optional[int] = None

    @classmethod
    def null(cls) -> "Condition":
        return cls(None)

    @classmethod
    def of(cls, label: int) -> "Condition":
        if int(label) < 0:
            raise ConditionError(f"Label ids are non-negative, got {label}")
        return cls(int(label))

    @property
    def is_null(self) -> bool:
        return self.label is None

    def __str__(self) -> str:
        return "null" if self.is_null else f"label:{self.label}"


NULL = Condition.null()


class ScoreBackend(abc.ABC):
    """Noise predictor with its own schedule and latent shape"""

    shape: Tuple[int, ...]
    schedule: NoiseSchedule

    @property
    @abc.abstractmethod
    def labels(self) -> List[int]:
        ...

    @abc.abstractmethod
    def score(self, z_t: Latent, cond: Condition, t: float) -> Latent:
        ...

    @abc.abstractmethod
    def score_vjp(self, z_t: Latent, cond: Condition, t: float, u: Latent) -> Latent:
        ...

    @abc.abstractmethod
    def to_dict(self) -> Dict[str, Any]:
        ...

    def check_condition(self, cond: Condition) -> None:
        if not cond.is_null and cond.label not in self.labels:
            raise ConditionError(f"Unknown label {cond.label}; backend labels are {self.labels}")

    def check_latent(self, z: Latent, what: str = "z_t") -> None:
        if tuple(np.shape(z)) != self.shape:
            raise ShapeError(f"{what} has shape {np.shape(z)}, backend expects {self.shape}")


def score(backend: ScoreBackend, z_t: Latent, cond: Condition, t: float) -> Latent:
    return backend.score(z_t, cond, t)


def score_vjp(backend: ScoreBackend, z_t: Latent, cond: Condition, t: float, u: Latent) -> Latent:
    return backend.score_vjp(z_t, cond, t, u)


class GaussianMixtureBackend(ScoreBackend):
    """
    Isotropic Gaussian mixture data distribution, diffused analytically.

    Component k of the data has mean mu_k and std sigma_k; at time t its
    marginal is N(sqrt(a) mu_k, (a sigma_k^2 + 1 - a) I). A label selects a
    subset of components with weights renormalized inside the subset; the
    Null condition uses the whole mixture.
    """

    def __init__(self, means: np.ndarray, sigmas: Sequence[float], weights: Sequence[float],
                 label_map: Dict[int, Sequence[int]], schedule: NoiseSchedule):
        means = np.asarray(means, dtype=np.float64)
        if means.ndim < 2:
            raise ShapeError("Means need a leading component axis")
        n_components = means.shape[0]
        sigmas = np.asarray(sigmas, dtype=np.float64).reshape(-1)
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if sigmas.size != n_components or weights.size != n_components:
            raise ShapeError(f"Expected {n_components} sigmas and weights")
        if np.any(sigmas <= 0) or not np.all(np.isfinite(sigmas)):
            raise DomainError("Component sigmas must be positive")
        if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
            raise DomainError("Component weights must be positive")
        if not np.all(np.isfinite(means)):
            raise DomainError("Component means must be finite")

        self.shape = tuple(means.shape[1:])
        self.schedule = schedule
        self.means = means
        self.sigmas = sigmas
        self.weights = weights / weights.sum()
        self._flat_means = means.reshape(n_components, -1)

        self.label_map: Dict[int, np.ndarray] = {}
        for label, members in label_map.items():
            idx = np.array(sorted({int(m) for m in members}), dtype=np.int64)
            if idx.size == 0 or idx.min() < 0 or idx.max() >= n_components:
                raise ConditionError(f"Label {label} selects invalid components {list(members)}")
            self.label_map[int(label)] = idx
        self._all = np.arange(n_components, dtype=np.int64)

    @property
    def labels(self) -> List[int]:
        return sorted(self.label_map)

    @property
    def n_components(self) -> int:
        return self._flat_means.shape[0]

    def _members(self, cond: Condition) -> np.ndarray:
        self.check_condition(cond)
        return self._all if cond.is_null else self.label_map[cond.label]

    def _diffused(self, z_t: Latent, cond: Condition, t: float):
        """Responsibilities and per-component score terms at z_t"""
        self.check_latent(z_t)
        idx = self._members(cond)
        alpha = alpha_at(self.schedule, t)
        x = np.asarray(z_t, dtype=np.float64).reshape(-1)
        n = x.size
        centers = math.sqrt(alpha) * self._flat_means[idx]
        variances = alpha * self.sigmas[idx] ** 2 + (1.0 - alpha)
        diff = centers - x
        sub_weights = self.weights[idx] / self.weights[idx].sum()
        logits = (np.log(sub_weights) - 0.5 * n * np.log(2.0 * np.pi * variances)
                  - np.sum(diff ** 2, axis=1) / (2.0 * variances))
        log_norm = logsumexp(logits)
        gamma = np.exp(logits - log_norm)
        terms = diff / variances[:, None]
        return alpha, idx, gamma, terms, variances, log_norm

    def log_density(self, z_t: Latent, cond: Condition, t: float) -> float:
        """log p_t(z_t | y) of the diffused mixture"""
        return float(self._diffused(z_t, cond, t)[5])

    def data_score(self, z_t: Latent, cond: Condition, t: float) -> Latent:
        """grad log p_t(z_t | y)"""
        _, _, gamma, terms, _, _ = self._diffused(z_t, cond, t)
        return (gamma @ terms).reshape(self.shape)

    def score(self, z_t: Latent, cond: Condition, t: float) -> Latent:
        alpha, _, gamma, terms, _, _ = self._diffused(z_t, cond, t)
        s = gamma @ terms
        return (-math.sqrt(1.0 - alpha) * s).reshape(self.shape)

    def score_vjp(self, z_t: Latent, cond: Condition, t: float, u: Latent) -> Latent:
        check_same_shape(z_t, u, "z_t and u")
        alpha, _, gamma, terms, variances, _ = self._diffused(z_t, cond, t)
        u_flat = np.asarray(u, dtype=np.float64).reshape(-1)
        s = gamma @ terms
        # Hessian of log p_t: -(sum g/v) I + sum g a a^T - s s^T (symmetric)
        hess_u = (-np.sum(gamma / variances) * u_flat
                  + terms.T @ (gamma * (terms @ u_flat))
                  - s * (s @ u_flat))
        return (-math.sqrt(1.0 - alpha) * hess_u).reshape(self.shape)

    def posterior_mean_exact(self, z_t: Latent, cond: Condition, t: float) -> Latent:
        """Closed-form E[z0 | z_t, y]"""
        alpha, idx, gamma, _, variances, _ = self._diffused(z_t, cond, t)
        x = np.asarray(z_t, dtype=np.float64).reshape(-1)
        mu = self._flat_means[idx]
        gain = math.sqrt(alpha) * self.sigmas[idx] ** 2 / variances
        component_means = mu + gain[:, None] * (x - math.sqrt(alpha) * mu)
        return (gamma @ component_means).reshape(self.shape)

    def sample(self, cond: Condition, rng: Rng, count: int) -> np.ndarray:
        """Draw clean data points from the (label-restricted) mixture"""
        idx = self._members(cond)
        probs = self.weights[idx] / self.weights[idx].sum()
        cdf = np.cumsum(probs)
        out = np.empty((count,) + self.shape)
        for i in range(count):
            k = idx[min(int(np.searchsorted(cdf, rng.random(), side="right")), idx.size - 1)]
            out[i] = self.means[k] + self.sigmas[k] * rng.normal(self.shape)
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema": BACKEND_SCHEMA,
            "kind": "gmm",
            "shape": list(self.shape),
            "schedule": self.schedule.to_dict(),
            "means": self._flat_means.reshape(-1).tolist(),
            "sigmas": self.sigmas.tolist(),
            "weights": self.weights.tolist(),
            "label_map": {str(k): v.tolist() for k, v in sorted(self.label_map.items())},
        }

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "GaussianMixtureBackend":
        shape = tuple(doc["shape"])
        sigmas = doc["sigmas"]
        means = np.asarray(doc["means"], dtype=np.float64).reshape((len(sigmas),) + shape)
        return cls(means, sigmas, doc["weights"],
                   {int(k): v for k, v in doc["label_map"].items()},
                   NoiseSchedule(**doc["schedule"]))


class MlpDenoiserBackend(ScoreBackend):
    """
    Dense tanh network eps(z_t, y, t).

    Input row: [flattened z_t, sin/cos time embedding, one-hot condition]
    where one-hot slot 0 is the Null token and slot k + 1 is label k.
    """

    def __init__(self, shape: Sequence[int], n_labels: int, layers: List[Tuple[np.ndarray, np.ndarray]],
                 schedule: NoiseSchedule):
        self.shape = tuple(int(s) for s in shape)
        self.n_labels = int(n_labels)
        self.schedule = schedule
        self.layers = [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)) for w, b in layers]
        if self.layers[0][0].shape[0] != self.input_dim:
            raise ShapeError(f"First layer expects {self.layers[0][0].shape[0]} inputs, layout needs {self.input_dim}")
        if self.layers[-1][0].shape[1] != self.latent_size:
            raise ShapeError("Output layer width must equal the latent size")

    @classmethod
    def initialize(cls, shape: Sequence[int], n_labels: int, hidden: Sequence[int],
                   schedule: NoiseSchedule, rng: Rng) -> "MlpDenoiserBackend":
        latent_size = int(np.prod(shape))
        widths = [latent_size + 2 * TIME_FREQUENCIES.size + n_labels + 1] + list(hidden) + [latent_size]
        layers = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            weight = rng.normal((fan_in, fan_out)) / math.sqrt(fan_in)
            layers.append((weight, np.zeros(fan_out)))
        return cls(shape, n_labels, layers, schedule)

    @property
    def labels(self) -> List[int]:
        return list(range(self.n_labels))

    @property
    def latent_size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def input_dim(self) -> int:
        return self.latent_size + 2 * TIME_FREQUENCIES.size + self.n_labels + 1

    @property
    def widths(self) -> List[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    def _inputs(self, z_flat: np.ndarray, ts: np.ndarray, slots: np.ndarray) -> np.ndarray:
        phases = ts[:, None] * TIME_FREQUENCIES[None, :]
        one_hot = np.zeros((z_flat.shape[0], self.n_labels + 1))
        one_hot[np.arange(z_flat.shape[0]), slots] = 1.0
        return np.concatenate([z_flat, np.sin(phases), np.cos(phases), one_hot], axis=1)

    def _slot(self, cond: Condition) -> int:
        self.check_condition(cond)
        return 0 if cond.is_null else cond.label + 1

    def _forward(self, inputs: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        activations = [inputs]
        h = inputs
        for weight, bias in self.layers[:-1]:
            h = np.tanh(h @ weight + bias)
            activations.append(h)
        weight, bias = self.layers[-1]
        return h @ weight + bias, activations

    def _backward(self, grad_out: np.ndarray, activations: List[np.ndarray], want_params: bool):
        """Reverse pass; returns (grad wrt inputs, per-layer (dW, db) or None)"""
        param_grads = []
        grad = grad_out
        for layer in range(len(self.layers) - 1, -1, -1):
            weight, _ = self.layers[layer]
            h_in = activations[layer]
            if want_params:
                param_grads.append((h_in.T @ grad, grad.sum(axis=0)))
            grad = grad @ weight.T
            if layer > 0:
                grad = grad * (1.0 - h_in ** 2)
        param_grads.reverse()
        return grad, (param_grads if want_params else None)

    def _single_input(self, z_t: Latent, cond: Condition, t: float) -> np.ndarray:
        self.check_latent(z_t)
        t = check_time(t)
        z_flat = np.asarray(z_t, dtype=np.float64).reshape(1, -1)
        return self._inputs(z_flat, np.array([t]), np.array([self._slot(cond)]))

    def score(self, z_t: Latent, cond: Condition, t: float) -> Latent:
        out, _ = self._forward(self._single_input(z_t, cond, t))
        return out.reshape(self.shape)

    def score_vjp(self, z_t: Latent, cond: Condition, t: float, u: Latent) -> Latent:
        check_same_shape(z_t, u, "z_t and u")
        _, activations = self._forward(self._single_input(z_t, cond, t))
        grad_in, _ = self._backward(np.asarray(u, dtype=np.float64).reshape(1, -1), activations, want_params=False)
        return grad_in[0, :self.latent_size].reshape(self.shape)

    def copy(self) -> "MlpDenoiserBackend":
        return MlpDenoiserBackend(self.shape, self.n_labels,
                                  [(w.copy(), b.copy()) for w, b in self.layers], self.schedule)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema": BACKEND_SCHEMA,
            "kind": "mlp",
            "shape": list(self.shape),
            "n_labels": self.n_labels,
            "schedule": self.schedule.to_dict(),
            "time_frequencies": TIME_FREQUENCIES.tolist(),
            "layers": [
                {"weight_shape": list(w.shape), "weight": w.reshape(-1).tolist(), "bias": b.tolist()}
                for w, b in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "MlpDenoiserBackend":
        layers = [
            (np.asarray(layer["weight"], dtype=np.float64).reshape(layer["weight_shape"]),
             np.asarray(layer["bias"], dtype=np.float64))
            for layer in doc["layers"]
        ]
        return cls(doc["shape"], doc["n_labels"], layers, NoiseSchedule(**doc["schedule"]))


def backend_from_dict(doc: Dict[str, Any]) -> ScoreBackend:
    """Rebuild a backend from its JSON document"""
    if doc.get("schema") != BACKEND_SCHEMA:
        raise DataError(f"Unsupported backend schema: {doc.get('schema')}")
    kind = doc.get("kind")
    if kind == "gmm":
        return GaussianMixtureBackend.from_dict(doc)
    if kind == "mlp":
        return MlpDenoiserBackend.from_dict(doc)
    raise DataError(f"Unknown backend kind: {kind}")


def train_denoiser(backend: MlpDenoiserBackend, dataset: Sequence[Tuple[Latent, Condition]],
                   schedule: NoiseSchedule, rng: Rng, epochs: int, lr: float,
                   cond_drop_prob: float = 0.2, batch_size: int = 32) -> Tuple[MlpDenoiserBackend, List[float]]:
    """
    Minibatch SGD on E||eps(z_t, y, t) - eps||^2 with t ~ U(0, 1).

    With probability cond_drop_prob a sample's condition is replaced by Null
    (classifier-free training). Returns a trained copy and the per-epoch mean loss.
    """
    if not dataset:
        raise DataError("Training dataset is empty")
    if lr <= 0:
        raise DomainError(f"Learning rate must be positive, got {lr}")
    if epochs < 0:
        raise DomainError(f"Epoch count must be non-negative, got {epochs}")
    if not 0.0 <= cond_drop_prob <= 1.0:
        raise DomainError(f"cond_drop_prob must lie in [0, 1], got {cond_drop_prob}")

    model = backend.copy()
    model.schedule = schedule
    for latent, cond in dataset:
        model.check_latent(latent, "training latent")
        model.check_condition(cond)
    data = np.stack([np.asarray(z, dtype=np.float64).reshape(-1) for z, _ in dataset])
    slots = np.array([model._slot(c) for _, c in dataset])
    n_samples = data.shape[0]

    losses: List[float] = []
    for epoch in range(epochs):
        order = rng.permutation(n_samples)
        total = 0.0
        for start in range(0, n_samples, batch_size):
            batch = order[start:start + batch_size]
            size = batch.size
            ts = rng.uniform_array(0.0, 1.0, size)
            eps = rng.normal((size, model.latent_size))
            alphas = alpha_values(schedule, ts)
            z_t = np.sqrt(alphas)[:, None] * data[batch] + np.sqrt(1.0 - alphas)[:, None] * eps
            batch_slots = np.where(rng.random_array(size) < cond_drop_prob, 0, slots[batch])

            out, activations = model._forward(model._inputs(z_t, ts, batch_slots))
            residual = out - eps
            total += float(np.sum(residual ** 2))
            _, grads = model._backward(2.0 * residual / size, activations, want_params=True)
            model.layers = [(w - lr * dw, b - lr * db) for (w, b), (dw, db) in zip(model.layers, grads)]

        epoch_loss = total / n_samples
        if not math.isfinite(epoch_loss):
            raise DataError(f"Training loss became non-finite at epoch {epoch}")
        losses.append(epoch_loss)
        logger.debug(f"Denoiser epoch {epoch}: loss {epoch_loss:.6f}")

    if losses:
        logger.info(f"Trained denoiser for {epochs} epochs: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return model, losses
