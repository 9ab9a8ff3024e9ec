"""Multivariate Student-t model of the stacked (privileged, regular) frames.

The joint t is fitted by EM over per-frame vectors ``(x*, x)`` (privileged
block first).  At test time only ``x`` is observed; the conditional
``p(x* | x)`` is again a Student t, and the privileged space is quantised to a
codebook so that expectations under the conditional become finite sums.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import linalg
from scipy.special import digamma, gammaln, logsumexp

from .errors import InvalidInputError, NumericalFailureError

log = logging.getLogger(__name__)

NU_MIN = 0.5
NU_MAX = 1e6
DOF_CONVENTIONS = ("printed", "standard")


@dataclass(frozen=True, eq=False)
class StudentTParams:
    mu: np.ndarray
    sigma: np.ndarray
    nu: float

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).ravel()
        sigma = np.array(self.sigma, dtype=float)
        if sigma.shape != (mu.size, mu.size):
            raise InvalidInputError(f"scale matrix shape {sigma.shape} does not match mean")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise InvalidInputError("non-finite Student-t parameter")
        if not self.nu > 0:
            raise InvalidInputError("degrees of freedom must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", 0.5 * (sigma + sigma.T))
        object.__setattr__(self, "nu", float(self.nu))

    @property
    def dim(self) -> int:
        return self.mu.size


@dataclass(frozen=True, eq=False)
class ConditionalTParams:
    mu_star: np.ndarray
    sigma_star: np.ndarray
    nu_star: float


@dataclass(frozen=True, eq=False)
class PrivCodebook:
    codewords: np.ndarray

    def __post_init__(self):
        c = np.array(self.codewords, dtype=float)
        if c.ndim != 2 or c.shape[0] < 1:
            raise InvalidInputError("codebook needs at least one codeword")
        if not np.all(np.isfinite(c)):
            raise InvalidInputError("non-finite codeword")
        if np.unique(c, axis=0).shape[0] != c.shape[0]:
            raise InvalidInputError("duplicate codewords")
        object.__setattr__(self, "codewords", c)

    @property
    def K(self) -> int:
        return self.codewords.shape[0]


def _spd_factor(a: np.ndarray):
    """Cholesky factor of ``a``, retried once with a trace-scaled jitter."""
    try:
        return linalg.cho_factor(a, lower=True)
    except linalg.LinAlgError:
        m = a.shape[0]
        jitter = 1e-9 * max(np.trace(a) / m, np.finfo(float).tiny)
        try:
            return linalg.cho_factor(a + jitter * np.eye(m), lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalFailureError("scale matrix is not positive definite") from exc


def _log_gamma_ratio(a: float, b: float) -> float:
    """``log Gamma(a + b) - log Gamma(a)``, accurate for very large ``a``."""
    if a > 1e6:
        return b * np.log(a) + b * (b - 1) / (2 * a) - b * (b - 1) * (2 * b - 1) / (12 * a * a)
    return float(gammaln(a + b) - gammaln(a))


def _t_parts(params):
    if isinstance(params, ConditionalTParams):
        return params.mu_star, params.sigma_star, params.nu_star
    return params.mu, params.sigma, params.nu


def _t_logpdf_rows(v, mu, factor, nu):
    m = mu.size
    diff = v - mu
    z = linalg.solve_triangular(factor[0], diff.T, lower=True)
    maha = np.sum(z * z, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    const = _log_gamma_ratio(nu / 2.0, m / 2.0) - 0.5 * m * np.log(nu * np.pi) - 0.5 * logdet
    return const - 0.5 * (nu + m) * np.log1p(maha / nu), maha


def t_log_density(params: Union[StudentTParams, ConditionalTParams], v) -> float:
    """Log density of a multivariate Student t at ``v``."""
    mu, sigma, nu = _t_parts(params)
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.shape != mu.shape:
        raise InvalidInputError(f"point has shape {v.shape}, distribution dimension is {mu.size}")
    try:
        factor = linalg.cho_factor(sigma, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalFailureError("scale matrix is not positive definite") from exc
    return float(_t_logpdf_rows(v[None, :], mu, factor, nu)[0][0])


def _log_likelihood(x, mu, sigma, nu):
    factor = _spd_factor(sigma)
    lp, maha = _t_logpdf_rows(x, mu, factor, nu)
    return float(np.sum(lp)), maha


def _solve_nu(mean_log_u_minus_u: float, nu_old: float, m: int) -> float:
    """Root of the degrees-of-freedom stationarity condition, clamped to
    ``[NU_MIN, NU_MAX]``; the left-hand side is decreasing in ``nu``."""
    c = 1.0 + mean_log_u_minus_u + digamma((nu_old + m) / 2.0) - np.log((nu_old + m) / 2.0)

    def f(nu):
        return -digamma(nu / 2.0) + np.log(nu / 2.0) + c

    if f(NU_MIN) <= 0:
        return NU_MIN
    if f(NU_MAX) >= 0:
        return NU_MAX
    lo, hi = np.log(NU_MIN), np.log(NU_MAX)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(np.exp(mid)) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    return float(np.exp(0.5 * (lo + hi)))


def fit_joint_t_em(frames, max_iters: int = 500, tol: float = 1e-10,
                   nu: Optional[float] = None, nu_init: float = 30.0,
                   return_trace: bool = False):
    """Fit a multivariate Student t by EM.

    Parameters
    ----------
    frames : array-like, shape (N, M)
        Stacked observations.
    max_iters : int
        Upper bound on EM iterations.
    tol : float
        Stop once the mean per-point log-likelihood improves by less than this.
    nu : float, optional
        Hold the degrees of freedom fixed at this value.  When omitted, ``nu``
        is re-estimated every iteration.
    nu_init : float
        Starting value when ``nu`` is estimated.
    return_trace : bool
        Also return the log-likelihood after every iteration.

    Returns
    -------
    StudentTParams, or ``(StudentTParams, list of float)`` with ``return_trace``.
    """
    x = np.asarray(frames, dtype=float)
    if x.ndim != 2:
        raise InvalidInputError("frames must be a 2-d array")
    n, m = x.shape
    if n < m + 1:
        raise InvalidInputError(f"need at least {m + 1} frames to fit a {m}-d Student t, got {n}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite frame")
    estimate = nu is None
    cur_nu = float(np.clip(nu_init if estimate else nu, NU_MIN, NU_MAX))
    mu = x.mean(axis=0)
    diff = x - mu
    sigma = diff.T @ diff / n
    ll, maha = _log_likelihood(x, mu, sigma, cur_nu)
    if not np.isfinite(ll):
        raise NumericalFailureError("non-finite log-likelihood at initialisation", iteration=0)
    trace = [ll]
    for it in range(1, max_iters + 1):
        u = (cur_nu + m) / (cur_nu + maha)
        mu = (u @ x) / u.sum()
        diff = x - mu
        sigma = (diff * u[:, None]).T @ diff / n
        sigma = 0.5 * (sigma + sigma.T)
        if estimate:
            cur_nu = _solve_nu(float(np.mean(np.log(u) - u)), cur_nu, m)
        new_ll, maha = _log_likelihood(x, mu, sigma, cur_nu)
        if not np.isfinite(new_ll):
            raise NumericalFailureError("non-finite log-likelihood", iteration=it)
        if new_ll < ll - 1e-8 * max(1.0, abs(ll)):
            raise NumericalFailureError(
                f"EM log-likelihood decreased from {ll!r} to {new_ll!r}", iteration=it)
        trace.append(new_ll)
        improvement = (new_ll - ll) / n
        ll = new_ll
        if improvement < tol:
            break
    params = StudentTParams(mu, sigma, cur_nu)
    return (params, trace) if return_trace else params


def _partition(joint: StudentTParams, m_x: int):
    p = joint.dim - m_x
    if p < 1 or m_x < 1:
        raise InvalidInputError(
            f"cannot split a {joint.dim}-d joint into {m_x} regular dimensions")
    mu_s, mu_x = joint.mu[:p], joint.mu[p:]
    s = joint.sigma
    return p, mu_s, mu_x, s[:p, :p], s[:p, p:], s[p:, p:]


def _added_dof(convention, p, m_x):
    if convention == "printed":
        return p
    if convention == "standard":
        return m_x
    raise InvalidInputError(f"unknown degrees-of-freedom convention {convention!r}")


class _Conditioner:
    """Pre-factorised conditioning of a joint t on its regular block."""

    def __init__(self, joint: StudentTParams, m_x: int, dof_convention: str = "printed"):
        p, self.mu_s, self.mu_x, s_ss, self.s_sx, s_xx = _partition(joint, m_x)
        self.p = p
        self.nu = joint.nu
        self.k = _added_dof(dof_convention, p, m_x)
        self.xx = _spd_factor(s_xx)
        schur = s_ss - self.s_sx @ linalg.cho_solve(self.xx, self.s_sx.T)
        self.schur = 0.5 * (schur + schur.T)
        self.schur_factor = _spd_factor(self.schur)

    def means(self, x: np.ndarray):
        """Conditional means ``(T, p)`` and scale multipliers ``(T,)`` for rows of ``x``."""
        d = x - self.mu_x
        sol = linalg.cho_solve(self.xx, d.T).T
        delta = np.sum(d * sol, axis=1)
        mu_star = self.mu_s + sol @ self.s_sx.T
        scale = (self.nu + delta) / (self.nu + self.k)
        return mu_star, scale

    @property
    def nu_star(self) -> float:
        return self.nu + self.k


def conditional_t(joint: StudentTParams, x, dof_convention: str = "printed") -> ConditionalTParams:
    """Student-t distribution of the privileged block given regular values ``x``.

    ``dof_convention="printed"`` adds the privileged dimension to the degrees
    of freedom and to the scale denominator; ``"standard"`` adds the
    dimension of the conditioning block instead.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite conditioning value")
    cond = _Conditioner(joint, x.size, dof_convention)
    mu_star, scale = cond.means(x[None, :])
    return ConditionalTParams(mu_star[0], scale[0] * cond.schur, cond.nu_star)


def codeword_weights(codebook: PrivCodebook, cond: ConditionalTParams) -> np.ndarray:
    """Normalised conditional densities of the codewords."""
    c = codebook.codewords
    if c.shape[1] != np.atleast_1d(cond.mu_star).size:
        raise InvalidInputError("codeword dimension does not match the conditional")
    logd = np.array([t_log_density(cond, ck) for ck in c])
    return _normalise_log_weights(logd[None, :])[0]


def _normalise_log_weights(logw: np.ndarray) -> np.ndarray:
    logw = np.where(np.isnan(logw), -np.inf, logw)
    total = logsumexp(logw, axis=1, keepdims=True)
    bad = ~np.isfinite(total[:, 0])
    w = np.exp(logw - np.where(np.isfinite(total), total, 0.0))
    if np.any(bad):
        log.warning("codeword densities underflowed for %d frame(s); using uniform weights",
                    int(bad.sum()))
        w[bad] = 1.0 / logw.shape[1]
    return w


def expected_privileged(joint: StudentTParams, codebook: PrivCodebook, frames,
                        dof_convention: str = "printed") -> np.ndarray:
    """Codebook estimate of ``E[x* | x_j]`` for every regular frame ``x_j``.

    Equivalent to ``codeword_weights(codebook, conditional_t(joint, x_j)) @ codewords``
    per frame, vectorised over frames.
    """
    frames = np.atleast_2d(np.asarray(frames, dtype=float))
    cond = _Conditioner(joint, frames.shape[1], dof_convention)
    c = codebook.codewords
    if c.shape[1] != cond.p:
        raise InvalidInputError("codeword dimension does not match the privileged block")
    mu_star, scale = cond.means(frames)
    diff = c[None, :, :] - mu_star[:, None, :]
    z = linalg.solve_triangular(cond.schur_factor[0], diff.reshape(-1, cond.p).T, lower=True)
    maha = np.sum(z * z, axis=0).reshape(frames.shape[0], c.shape[0]) / scale[:, None]
    nu_star = cond.nu_star
    # Normalising constants are shared by all codewords of a frame and cancel.
    logw = -0.5 * (nu_star + cond.p) * np.log1p(maha / nu_star)
    return _normalise_log_weights(logw) @ c


def montecarlo_privileged(joint: StudentTParams, frames, n_draws: int,
                          rng: np.random.Generator, dof_convention: str = "printed") -> np.ndarray:
    """Monte-Carlo estimate of ``E[x* | x_j]`` from ``n_draws`` conditional-t draws per frame."""
    frames = np.atleast_2d(np.asarray(frames, dtype=float))
    cond = _Conditioner(joint, frames.shape[1], dof_convention)
    mu_star, scale = cond.means(frames)
    chol = np.tril(cond.schur_factor[0])
    nu_star = cond.nu_star
    out = np.empty_like(mu_star)
    for j in range(frames.shape[0]):
        z = rng.standard_normal((n_draws, cond.p)) @ chol.T
        g = rng.chisquare(nu_star, size=n_draws)
        draws = mu_star[j] + z * np.sqrt(scale[j] * nu_star / g)[:, None]
        out[j] = draws.mean(axis=0)
    return out


def build_codebook(priv_frames, K: int = 256, seed: int = 0, max_iters: int = 100,
                   tol: float = 1e-6) -> PrivCodebook:
    """Quantise privileged frames into ``K`` codewords by Lloyd iterations.

    Initialisation is farthest-point from a seeded first centre; the
    iterations run on the distinct frames weighted by multiplicity.
    """
    x = np.asarray(priv_frames, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1:
        raise InvalidInputError("privileged frames must be a non-empty 2-d array")
    if K < 1:
        raise InvalidInputError("K must be at least 1")
    pts, counts = np.unique(x, axis=0, return_counts=True)
    n = pts.shape[0]
    if K > n:
        raise InvalidInputError(f"K={K} exceeds the {n} distinct privileged frames")
    w = counts.astype(float)
    rng = np.random.default_rng(seed)

    def sqdist(a, b):
        d = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
        return np.maximum(d, 0.0)

    centre_idx = [int(rng.integers(n))]
    mind = np.sum((pts - pts[centre_idx[0]]) ** 2, axis=1)
    for _ in range(1, K):
        nxt = int(np.argmax(mind))
        centre_idx.append(nxt)
        mind = np.minimum(mind, np.sum((pts - pts[nxt]) ** 2, axis=1))
    centres = pts[centre_idx].copy()

    prev_inertia = np.inf
    for _ in range(max_iters):
        d = sqdist(pts, centres)
        assign = np.argmin(d, axis=1)
        nearest = d[np.arange(n), assign]
        inertia = float(w @ nearest)
        sizes = np.bincount(assign, weights=w, minlength=K)
        members = np.bincount(assign, minlength=K)
        sums = np.zeros_like(centres)
        np.add.at(sums, assign, pts * w[:, None])
        new = centres.copy()
        filled = sizes > 0
        new[filled] = sums[filled] / sizes[filled, None]
        single = members == 1
        if np.any(single):
            # Keep singleton clusters exactly on their point.
            owner = np.full(K, -1)
            owner[assign] = np.arange(n)
            new[single] = pts[owner[single]]
        taken = set()
        for k in np.flatnonzero(~filled):
            order = np.argsort(-nearest, kind="stable")
            for i in order:
                if int(i) not in taken:
                    taken.add(int(i))
                    new[k] = pts[i]
                    nearest[i] = 0.0
                    break
        centres = new
        if np.all(filled) and abs(prev_inertia - inertia) <= tol * max(inertia, 1e-300):
            break
        prev_inertia = inertia
    uniq, first = np.unique(centres, axis=0, return_index=True)
    if uniq.shape[0] < K:
        log.warning("codebook collapsed from %d to %d distinct codewords", K, uniq.shape[0])
        centres = centres[np.sort(first)]
    return PrivCodebook(centres)
