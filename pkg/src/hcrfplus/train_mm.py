"""Max-margin training with the structured hinge loss.

Objective::

    J(w) = sum_i c_i l_i(w) + ||w||^2 / (2 sigma^2)
    l_i(w) = max(0, 1 + max_{y' != y_i, h} E(y', h) - max_h E(y_i, h))

The default optimiser is a bundle method.  Because the true-label maximum
makes ``l_i`` non-convex, each outer round fixes the true-label Viterbi path
(a convex upper bound that is tight at the current point) and minimises the
bound with cutting planes and an exact dual quadratic subproblem.  With
``bundle_size=0`` a projected subgradient method is used instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import InvalidInputError, NumericalFailureError
from .inference import SampleBatch, batch_viterbi, expected_features, make_batch, \
    path_statistics
from .model import FeatureDims, ModelParams, SequenceSample, init_params, params_as_vector, \
    vector_as_params
from .optim import simplex_qp
from .train_ml import ALPHA_MAX, ALPHA_MIN, TrainReport, _coefficients, _training_batch

STEP_RULES = ("constant", "diminishing")


@dataclass(frozen=True)
class MmConfig:
    sigma: float = 1.0
    lambda_mode: str = "fixed"
    lambdas: Union[float, Sequence[float]] = 1.0
    max_iters: int = 400
    step_rule: str = "diminishing"
    eta0: float = 0.1
    bundle_size: int = 20
    grad_tol: float = 1e-4
    seed: int = 0
    init_scale: float = 0.1

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidInputError("sigma must be positive")
        if not self.eta0 > 0:
            raise InvalidInputError("eta0 must be positive")
        if self.step_rule not in STEP_RULES:
            raise InvalidInputError(f"unknown step rule {self.step_rule!r}")
        if self.lambda_mode not in ("fixed", "adaptive"):
            raise InvalidInputError(f"unknown lambda mode {self.lambda_mode!r}")
        if self.bundle_size < 0 or self.max_iters < 1:
            raise InvalidInputError("bundle_size must be >= 0 and max_iters >= 1")


@dataclass
class _Margins:
    hinge: np.ndarray      # (N,)
    rival: np.ndarray      # (N,) best competing label
    best: np.ndarray       # (N, L) Viterbi energies
    paths: np.ndarray      # (N, L, Tmax)


def _margins(batch: SampleBatch, params: ModelParams) -> _Margins:
    if params.dims.n_labels < 2:
        raise InvalidInputError("the hinge loss needs at least two labels")
    best, paths = batch_viterbi(batch, params)
    n = batch.size
    idx = np.arange(n)
    rivals = best.copy()
    rivals[idx, batch.labels] = -np.inf
    rival = np.argmax(rivals, axis=1)
    hinge = np.maximum(0.0, 1.0 + rivals[idx, rival] - best[idx, batch.labels])
    return _Margins(hinge, rival, best, paths)


def _hinge_subgradient(batch, params, coeffs, m: _Margins) -> np.ndarray:
    """Subgradient of ``sum_i c_i l_i`` along the deterministic argmax paths."""
    dims = params.dims
    unary, counts = path_statistics(batch, m.paths, dims.n_hidden)
    weights = np.zeros((batch.size, dims.n_labels))
    active = m.hinge > 0
    idx = np.flatnonzero(active)
    weights[idx, m.rival[idx]] += coeffs[idx]
    weights[idx, batch.labels[idx]] -= coeffs[idx]
    return expected_features(batch, dims, weights, unary, counts)


def hinge_loss(sample: SequenceSample, params: ModelParams) -> float:
    batch = _training_batch([sample], params.dims)
    return float(_margins(batch, params).hinge[0])


def mm_objective(dataset, params: ModelParams, weights, sigma: float) -> float:
    batch = _training_batch(dataset, params.dims)
    coeffs = _coefficients(weights, batch.size)
    w = params_as_vector(params)
    return float(coeffs @ _margins(batch, params).hinge) + float(w @ w) / (2.0 * sigma**2)


def mm_subgradient(dataset, params: ModelParams, weights, sigma: float) -> np.ndarray:
    batch = _training_batch(dataset, params.dims)
    coeffs = _coefficients(weights, batch.size)
    m = _margins(batch, params)
    return _hinge_subgradient(batch, params, coeffs, m) + params_as_vector(params) / sigma**2


def batch_adaptive_alpha_mm(batch: SampleBatch, params: ModelParams) -> np.ndarray:
    with_priv = _margins(batch, params).hinge
    regular = SampleBatch(batch.frames, None, batch.lengths, batch.labels)
    without_priv = _margins(regular, params).hinge
    num, den = with_priv, without_priv + params.squared_norm()
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = num / den
    alpha = np.where((num == 0) & (den == 0), 1.0, alpha)
    return np.clip(alpha, ALPHA_MIN, ALPHA_MAX)


def adaptive_alpha_mm(sample: SequenceSample, params: ModelParams) -> float:
    """Hinge on both channels over (hinge on regular data + ||w||^2), clamped
    to ``[1e-4, 1e4]``; 0/0 is defined as 1."""
    if sample.privileged is None:
        raise InvalidInputError(f"sample {sample.id!r} has no privileged channel")
    return float(batch_adaptive_alpha_mm(make_batch([sample]), params)[0])


class _Tracker:
    def __init__(self):
        self.raw = []
        self.best_trace = []
        self.best_value = np.inf
        self.best_v = None

    def record(self, value, v, it):
        if not np.isfinite(value):
            raise NumericalFailureError("non-finite max-margin objective", iteration=it)
        self.raw.append(float(value))
        if value < self.best_value:
            self.best_value = float(value)
            self.best_v = v.copy()
        self.best_trace.append(self.best_value)


def _objective(batch, params, coeffs, sigma):
    m = _margins(batch, params)
    w = params_as_vector(params)
    return float(coeffs @ m.hinge) + float(w @ w) / (2.0 * sigma**2), m


def _train_subgradient(batch, dims, config, v, base_coeffs):
    tracker = _Tracker()
    coeffs = base_coeffs
    sigma = config.sigma
    grad_norm = np.inf
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        params = vector_as_params(v, dims)
        if config.lambda_mode == "adaptive":
            coeffs = batch_adaptive_alpha_mm(batch, params)
        value, m = _objective(batch, params, coeffs, sigma)
        tracker.record(value, v, it)
        g = _hinge_subgradient(batch, params, coeffs, m) + v / sigma**2
        grad_norm = float(np.max(np.abs(g)))
        if grad_norm <= config.grad_tol:
            converged = True
            break
        eta = config.eta0 if config.step_rule == "constant" else config.eta0 / np.sqrt(it)
        v = v - eta * g
        # The minimiser lies in the ball where the regulariser alone does not
        # exceed the objective at w = 0.
        radius = sigma * np.sqrt(2.0 * float(np.sum(coeffs)))
        norm = np.linalg.norm(v)
        if norm > radius:
            v = v * (radius / norm)
    return tracker, it, grad_norm, converged, coeffs, "subgradient"


def _train_bundle(batch, dims, config, v, base_coeffs):
    tracker = _Tracker()
    sigma2 = config.sigma**2
    coeffs = base_coeffs
    n = batch.size
    idx = np.arange(n)
    total = 0
    converged = False
    gap = np.inf
    rounds = 0
    while total < config.max_iters:
        # Early rounds solve the convex bound loosely; the bound moves anyway.
        inner_tol = max(config.grad_tol, 0.1 * 0.5**rounds)
        rounds += 1
        params = vector_as_params(v, dims)
        if config.lambda_mode == "adaptive":
            coeffs = batch_adaptive_alpha_mm(batch, params)
        m0 = _margins(batch, params)
        # Linearise the true-label maximum at its current Viterbi path.
        true_paths = m0.paths[idx, batch.labels][:, None, :]
        F_true = _path_features(batch, dims, true_paths)
        planes_a, planes_b = [], []
        beta = None
        upper = np.inf
        outer_start = tracker.best_value
        while total < config.max_iters:
            total += 1
            params = vector_as_params(v, dims)
            value, m = _objective(batch, params, coeffs, config.sigma)
            tracker.record(value, v, total)
            true_energy = F_true @ v
            rival_energy = m.best[idx, m.rival]
            sur = np.maximum(0.0, 1.0 + rival_energy - true_energy)
            unary, counts = path_statistics(batch, m.paths, dims.n_hidden)
            weights = np.zeros((n, dims.n_labels))
            act = np.flatnonzero(sur > 0)
            weights[act, m.rival[act]] = coeffs[act]
            a = expected_features(batch, dims, weights, unary, counts) - coeffs[act] @ F_true[act]
            risk = float(coeffs @ sur)
            b = risk - float(a @ v)
            if len(planes_a) >= config.bundle_size and beta is not None:
                # Fold the oldest planes into one aggregate cutting plane.
                keep = config.bundle_size - 1
                old = len(planes_a) - keep + 1
                wts = beta[:old]
                s = wts.sum()
                wts = wts / s if s > 0 else np.full(old, 1.0 / old)
                agg_a = np.tensordot(wts, np.array(planes_a[:old]), axes=1)
                agg_b = float(wts @ np.array(planes_b[:old]))
                planes_a = [agg_a] + planes_a[old:]
                planes_b = [agg_b] + planes_b[old:]
            planes_a.append(a)
            planes_b.append(b)
            A = np.array(planes_a)
            B = np.array(planes_b)
            beta = simplex_qp(sigma2 * (A @ A.T), B)
            v_next = -sigma2 * (beta @ A)
            lower = float(B @ beta) - 0.5 * sigma2 * float(beta @ (A @ A.T) @ beta)
            upper = min(upper, risk + float(v @ v) / (2.0 * sigma2))
            gap = upper - lower
            if gap <= inner_tol * max(1.0, abs(upper)):
                break
            v = v_next
        v = tracker.best_v.copy()
        improvement = outer_start - tracker.best_value
        tight = gap <= config.grad_tol * max(1.0, abs(upper))
        if tight and improvement <= config.grad_tol * max(1.0, tracker.best_value):
            converged = True
            break
    return tracker, total, float(gap), converged, coeffs, "bundle"


def _path_features(batch: SampleBatch, dims: FeatureDims, paths: np.ndarray) -> np.ndarray:
    """Per-sample sufficient statistics ``(N, n_params)`` of one hidden path
    per sample, placed at that sample's label."""
    unary, counts = path_statistics(batch, paths, dims.n_hidden)
    occ, cnt = unary[:, 0], counts[:, 0]
    n = batch.size
    idx = np.arange(n)
    g1 = np.zeros((n, dims.n_labels, dims.n_hidden))
    g1[idx, batch.labels] = occ.sum(axis=1)
    g2 = np.einsum("nta,ntd->nad", occ, batch.frames)
    if dims.m_xstar > 0 and batch.privileged is not None:
        g3 = np.einsum("nta,ntd->nad", occ, batch.privileged)
    else:
        g3 = np.zeros((n, dims.n_hidden, dims.m_xstar))
    gw = np.zeros((n, dims.n_labels, dims.n_hidden, dims.n_hidden))
    gw[idx, batch.labels] = cnt
    return np.concatenate([g.reshape(n, -1) for g in (g1, g2, g3, gw)], axis=1)


def train_mm(dataset, dims: FeatureDims, config: MmConfig = MmConfig(),
             init: Optional[ModelParams] = None) -> tuple[ModelParams, TrainReport]:
    batch = _training_batch(dataset, dims)
    if dims.n_labels < 2 or len(np.unique(batch.labels)) < 2:
        raise InvalidInputError("training labels must cover at least two classes")
    if np.any(batch.labels >= dims.n_labels):
        raise InvalidInputError("training label outside the model's label set")
    if config.lambda_mode == "adaptive" and dims.m_xstar == 0:
        raise InvalidInputError("adaptive coefficients need a privileged channel")
    coeffs = 1.0 / _coefficients(config.lambdas, batch.size)
    params0 = init if init is not None else init_params(dims, config.seed, config.init_scale)
    v0 = params_as_vector(params0)
    runner = _train_bundle if config.bundle_size > 0 else _train_subgradient
    tracker, iters, final_norm, converged, coeffs, method = runner(batch, dims, config, v0, coeffs)
    report = TrainReport(
        objective_trace=tracker.best_trace,
        iterations=iters,
        final_grad_norm=final_norm,
        converged=converged,
        message="raw objective trace in raw_trace",
        lambda_mode=config.lambda_mode,
        method=method,
        final_coefficients=[float(c) for c in coeffs],
    )
    report.raw_trace = tracker.raw
    return vector_as_params(tracker.best_v, dims), report
