"""Maximum-likelihood training.

The trainer minimises the negated penalised conditional log-likelihood::

    J(w) = -sum_i c_i log p(y_i | x_i, x*_i; w) + ||w||^2 / (2 sigma^2)

where ``c_i = 1 / lambda_i`` in fixed mode and the self-adaptive coefficient
``alpha_i(w)`` in adaptive mode.  Adaptive coefficients are refreshed at the
start of every quasi-Newton iteration and treated as constants inside it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidInputError
from .inference import (SampleBatch, batch_forward_backward, batch_posteriors,
                        expected_features, make_batch)
from .model import FeatureDims, ModelParams, SequenceSample, init_params, params_as_vector, \
    vector_as_params
from .optim import lbfgs

ALPHA_MIN = 1e-4
ALPHA_MAX = 1e4


@dataclass(frozen=True)
class MlConfig:
    sigma: float = 1.0
    lambda_mode: str = "fixed"
    lambdas: Union[float, Sequence[float]] = 1.0
    max_iters: int = 400
    grad_tol: float = 1e-5
    history: int = 10
    seed: int = 0
    init_scale: float = 0.1

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidInputError("sigma must be positive")
        if self.max_iters < 1:
            raise InvalidInputError("max_iters must be at least 1")
        if self.lambda_mode not in ("fixed", "adaptive"):
            raise InvalidInputError(f"unknown lambda mode {self.lambda_mode!r}")


@dataclass
class TrainReport:
    objective_trace: list
    iterations: int
    final_grad_norm: float
    converged: bool
    message: str
    lambda_mode: str
    method: str
    final_coefficients: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "objective_trace": [float(v) for v in self.objective_trace],
            "iterations": int(self.iterations),
            "final_grad_norm": float(self.final_grad_norm),
            "converged": bool(self.converged),
            "message": self.message,
            "lambda_mode": self.lambda_mode,
            "method": self.method,
        }


def _samples(data) -> list:
    return list(getattr(data, "samples", data))


def _training_batch(data, dims: FeatureDims) -> SampleBatch:
    samples = _samples(data)
    if dims.m_xstar > 0:
        for s in samples:
            if s.privileged is None:
                raise InvalidInputError(f"sample {s.id!r} has no privileged channel")
    return make_batch(samples, use_privileged=dims.m_xstar > 0)


def _coefficients(weights, n: int) -> np.ndarray:
    c = np.broadcast_to(np.asarray(weights, dtype=float), (n,)).copy()
    if not np.all(np.isfinite(c)):
        raise InvalidInputError("non-finite sample coefficient")
    return c


def batch_ml_value_and_grad(batch: SampleBatch, params: ModelParams, coeffs: np.ndarray,
                            sigma: float) -> tuple[float, np.ndarray]:
    dims = params.dims
    logz, unary, pair_sum = batch_forward_backward(batch, params)
    logp = logz - logsumexp(logz, axis=1, keepdims=True)
    n = batch.size
    true_logp = logp[np.arange(n), batch.labels]
    w = params_as_vector(params)
    value = -float(coeffs @ true_logp) + float(w @ w) / (2.0 * sigma**2)
    onehot = np.zeros_like(logp)
    onehot[np.arange(n), batch.labels] = 1.0
    weights = coeffs[:, None] * (np.exp(logp) - onehot)
    grad = expected_features(batch, dims, weights, unary, pair_sum) + w / sigma**2
    return value, grad


def ml_objective(dataset, params: ModelParams, weights, sigma: float) -> float:
    batch = _training_batch(dataset, params.dims)
    return batch_ml_value_and_grad(batch, params, _coefficients(weights, batch.size), sigma)[0]


def ml_gradient(dataset, params: ModelParams, weights, sigma: float) -> np.ndarray:
    """Exact gradient of :func:`ml_objective` with the coefficients held fixed."""
    batch = _training_batch(dataset, params.dims)
    return batch_ml_value_and_grad(batch, params, _coefficients(weights, batch.size), sigma)[1]


def _clamp_alpha(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = num / den
    alpha = np.where(np.isnan(alpha), 1.0, alpha)
    return np.clip(alpha, ALPHA_MIN, ALPHA_MAX)


def batch_adaptive_alpha_ml(batch: SampleBatch, params: ModelParams) -> np.ndarray:
    n = batch.size
    idx = (np.arange(n), batch.labels)
    with_priv = batch_posteriors(batch, params)[idx]
    regular = SampleBatch(batch.frames, None, batch.lengths, batch.labels)
    without_priv = batch_posteriors(regular, params)[idx]
    return _clamp_alpha(with_priv, without_priv + params.squared_norm())


def adaptive_alpha_ml(sample: SequenceSample, params: ModelParams) -> float:
    """Self-adaptive coefficient of one sample::

        alpha = log p(y | x, x*) / (log p(y | x) + ||w||^2)

    clamped to ``[1e-4, 1e4]`` (0/0 maps to 1).
    """
    if sample.privileged is None:
        raise InvalidInputError(f"sample {sample.id!r} has no privileged channel")
    return float(batch_adaptive_alpha_ml(make_batch([sample]), params)[0])


def train_ml(dataset, dims: FeatureDims, config: MlConfig = MlConfig(),
             init: Optional[ModelParams] = None) -> tuple[ModelParams, TrainReport]:
    """Fit model parameters by L-BFGS on the penalised negative log-likelihood."""
    batch = _training_batch(dataset, dims)
    if len(np.unique(batch.labels)) < 2:
        raise InvalidInputError("training labels must cover at least two classes")
    if np.any(batch.labels >= dims.n_labels):
        raise InvalidInputError("training label outside the model's label set")
    n = batch.size
    if config.lambda_mode == "adaptive" and dims.m_xstar == 0:
        raise InvalidInputError("adaptive coefficients need a privileged channel")
    coeffs = 1.0 / _coefficients(config.lambdas, n)
    params0 = init if init is not None else init_params(dims, config.seed, config.init_scale)
    state = {"coeffs": coeffs}

    def fun(v):
        return batch_ml_value_and_grad(batch, vector_as_params(v, dims), state["coeffs"],
                                       config.sigma)

    def refresh(v):
        state["coeffs"] = batch_adaptive_alpha_ml(batch, vector_as_params(v, dims))
        return True

    res = lbfgs(fun, params_as_vector(params0), max_iters=config.max_iters,
                grad_tol=config.grad_tol, history=config.history,
                refresh=refresh if config.lambda_mode == "adaptive" else None)
    report = TrainReport(
        objective_trace=res.trace,
        iterations=res.iterations,
        final_grad_norm=float(np.max(np.abs(res.grad))),
        converged=res.converged,
        message=res.message,
        lambda_mode=config.lambda_mode,
        method="lbfgs",
        final_coefficients=[float(c) for c in state["coeffs"]],
    )
    return vector_as_params(res.x, dims), report
