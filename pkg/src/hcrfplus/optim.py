"""Small optimisation routines: L-BFGS with Armijo backtracking and the
simplex-constrained quadratic program solved inside the bundle method."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NumericalFailureError


@dataclass
class LbfgsResult:
    x: np.ndarray
    value: float
    grad: np.ndarray
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    message: str = ""


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def lbfgs(fun: Callable[[np.ndarray], tuple], x0, max_iters: int = 400, grad_tol: float = 1e-5,
          history: int = 10, c1: float = 1e-4, max_backtracks: int = 60,
          refresh: Optional[Callable[[np.ndarray], bool]] = None) -> LbfgsResult:
    """Minimise ``fun`` (returning ``(value, gradient)``) from ``x0``.

    ``refresh(x)``, when given, is called at the start of every iteration; a
    true return value means the objective changed and is re-evaluated at
    ``x`` before the step.  Every accepted step satisfies the Armijo
    condition for the objective in force during that iteration.
    """
    x = np.array(x0, dtype=float)
    if refresh is not None:
        refresh(x)
    f, g = fun(x)
    if not np.isfinite(f):
        raise NumericalFailureError("non-finite objective at the starting point", iteration=0)
    s_hist: deque = deque(maxlen=history)
    y_hist: deque = deque(maxlen=history)
    trace = [float(f)]
    for it in range(1, max_iters + 1):
        if refresh is not None and refresh(x):
            f, g = fun(x)
            if not np.isfinite(f):
                raise NumericalFailureError("non-finite objective", iteration=it)
        if np.max(np.abs(g)) <= grad_tol:
            return LbfgsResult(x, f, g, it - 1, True, trace, "gradient tolerance reached")
        d = -_two_loop(g, list(s_hist), list(y_hist))
        slope = g @ d
        if not slope < 0:
            s_hist.clear()
            y_hist.clear()
            d = -g
            slope = g @ d
        step = 1.0 if s_hist else min(1.0, 1.0 / np.max(np.abs(g)))
        for _ in range(max_backtracks):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + c1 * step * slope:
                break
            step *= 0.5
        else:
            return LbfgsResult(x, f, g, it - 1, False, trace, "line search failed")
        s, y = x_new - x, g_new - g
        if s @ y > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            s_hist.append(s)
            y_hist.append(y)
        x, f, g = x_new, f_new, g_new
        trace.append(float(f))
    converged = bool(np.max(np.abs(g)) <= grad_tol)
    return LbfgsResult(x, f, g, max_iters, converged, trace, "iteration limit reached")


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


def _simplex_kkt(G, b, free):
    m = free.size
    kkt = np.zeros((m + 1, m + 1))
    kkt[:m, :m] = G[np.ix_(free, free)]
    kkt[:m, m] = 1.0
    kkt[m, :m] = 1.0
    rhs = np.append(b[free], 1.0)
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:m]


def simplex_qp(G: np.ndarray, b: np.ndarray, max_iters: int = 500) -> np.ndarray:
    """Minimise ``0.5 * beta' G beta - b' beta`` over the probability simplex.

    Primal active-set method, exact up to round-off for the small dense
    problems met in cutting-plane training.  A ridge of ``1e-12 * trace``
    keeps the equality-constrained subproblems nonsingular.
    """
    G = np.asarray(G, dtype=float)
    b = np.asarray(b, dtype=float)
    k = b.size
    if k == 1:
        return np.ones(1)
    G = 0.5 * (G + G.T) + 1e-12 * max(np.trace(G) / k, 1e-300) * np.eye(k)
    # start at the best vertex
    vertex = int(np.argmin(0.5 * np.diag(G) - b))
    beta = np.zeros(k)
    beta[vertex] = 1.0
    free = np.zeros(k, dtype=bool)
    free[vertex] = True
    scale = max(float(np.max(np.abs(G))), float(np.max(np.abs(b))), 1.0)
    for _ in range(max_iters):
        idx = np.flatnonzero(free)
        cand = _simplex_kkt(G, b, idx)
        if np.all(cand >= 0):
            beta = np.zeros(k)
            beta[idx] = cand
            grad = G @ beta - b
            mu = float(np.mean(grad[idx]))
            slack = grad - mu
            slack[free] = 0.0
            j = int(np.argmin(slack))
            if slack[j] >= -1e-13 * scale:
                break
            free[j] = True
        else:
            cur = beta[idx]
            step_dir = cand - cur
            neg = step_dir < 0
            ratios = np.full(idx.size, np.inf)
            ratios[neg] = cur[neg] / -step_dir[neg]
            r = int(np.argmin(ratios))
            beta[idx] = np.maximum(cur + ratios[r] * step_dir, 0.0)
            beta[idx[r]] = 0.0
            free[idx[r]] = False
            beta /= beta.sum()
    return beta
