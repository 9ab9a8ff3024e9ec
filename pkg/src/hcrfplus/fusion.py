"""Ridge-regression calibration from regular to privileged features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .errors import InvalidInputError, NumericalFailureError

DEFAULT_ETA_GRID = tuple(np.logspace(-4, 0, 9))


@dataclass(frozen=True, eq=False)
class FusionModel:
    gamma: np.ndarray  # (d, p)
    eta: float

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        if not np.all(np.isfinite(g)):
            raise InvalidInputError("non-finite fusion weights")
        object.__setattr__(self, "gamma", g)


def fit_fusion(X, Xstar, eta: float) -> FusionModel:
    """Solve ``(X'X + eta I) gamma = X' X*`` by Cholesky."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Xs = np.atleast_2d(np.asarray(Xstar, dtype=float))
    if X.shape[0] < 1 or X.shape[0] != Xs.shape[0]:
        raise InvalidInputError(
            f"regular and privileged matrices need the same positive row count, "
            f"got {X.shape[0]} and {Xs.shape[0]}")
    if eta < 0:
        raise InvalidInputError("eta must be non-negative")
    gram = X.T @ X + eta * np.eye(X.shape[1])
    try:
        factor = linalg.cho_factor(gram, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalFailureError(
            f"ridge system is singular at eta={eta}; use eta > 0") from exc
    gamma = linalg.cho_solve(factor, X.T @ Xs)
    return FusionModel(gamma, float(eta))


def predict_privileged(model: FusionModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.gamma.shape[0]:
        raise InvalidInputError(
            f"input has {x.shape[-1]} features, fusion model expects {model.gamma.shape[0]}")
    return x @ model.gamma


def select_eta_cv(X, Xstar, folds: int = 5, grid: Optional[Sequence[float]] = None,
                  seed: int = 0) -> float:
    """Grid value of ``eta`` with the lowest mean held-out squared error.

    Rows are shuffled with ``seed`` and split into ``folds`` contiguous
    folds; ties go to the smallest ``eta``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Xs = np.atleast_2d(np.asarray(Xstar, dtype=float))
    grid = sorted(DEFAULT_ETA_GRID if grid is None else grid)
    if not grid:
        raise InvalidInputError("eta grid is empty")
    if folds < 2:
        raise InvalidInputError("need at least two folds")
    n = X.shape[0]
    if n < folds:
        raise InvalidInputError(f"{n} rows cannot fill {folds} folds")
    order = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(order, folds)
    errors = []
    for eta in grid:
        total = 0.0
        for k in range(folds):
            test = parts[k]
            train = np.concatenate([parts[j] for j in range(folds) if j != k])
            model = fit_fusion(X[train], Xs[train], eta)
            resid = X[test] @ model.gamma - Xs[test]
            total += float(np.mean(resid**2))
        errors.append(total / folds)
    return float(grid[int(np.argmin(errors))])
