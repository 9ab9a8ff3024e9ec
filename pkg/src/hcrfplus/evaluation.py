"""Metrics, stratified cross-validation and the gradient-check harness."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, normalize_fit
from .errors import ConfigurationError
from .inference import make_batch, map_energy
from .model import FeatureDims, SequenceSample, init_params, params_as_vector, vector_as_params
from .pipeline import TrainSettings, fit_pipeline, predict_with_bundle
from .train_ml import batch_adaptive_alpha_ml, ml_gradient, ml_objective
from .train_mm import mm_objective, mm_subgradient

log = logging.getLogger(__name__)

DEFAULT_HIDDEN_SWEEP = tuple(range(3, 21))
DEFAULT_SIGMA_GRID = tuple(10.0 ** k for k in range(-3, 4))


def stratified_folds(labels, n_folds: int, seed: int = 0, shuffle: bool = True) -> np.ndarray:
    """Fold index of every sample, balanced within each class.

    The members of each class are (optionally) permuted with a generator
    seeded by ``seed`` and dealt round-robin to the folds.  Without
    shuffling the dealing follows file order, so interleaved copies of a
    sample land in different folds.
    """
    labels = np.asarray(labels)
    if n_folds < 2:
        raise ConfigurationError("cross-validation needs at least 2 folds")
    rng = np.random.default_rng(seed)
    folds = np.empty(labels.size, dtype=np.int64)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < n_folds:
            raise ConfigurationError(
                f"class {int(c)} has {members.size} samples, fewer than {n_folds} folds")
        if shuffle:
            members = rng.permutation(members)
        folds[members] = np.arange(members.size) % n_folds
    return folds


def confusion_matrix(y_true, y_pred, n_labels: int) -> np.ndarray:
    """Counts with true labels on rows and predictions on columns."""
    cm = np.zeros((n_labels, n_labels), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


@dataclass
class Scores:
    accuracy: float
    recall: np.ndarray  # per class; nan for classes with no support
    confusion: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return self.confusion.sum(axis=1)


def score(y_true, y_pred, n_labels: int) -> Scores:
    cm = confusion_matrix(y_true, y_pred, n_labels)
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(support > 0, np.diag(cm) / support, np.nan)
    return Scores(float(np.trace(cm) / max(cm.sum(), 1)), recall, cm)


# --------------------------------------------------------------------------
# Cross-validation


@dataclass
class FoldAudit:
    """What one training fold fitted, so leakage can be checked afterwards."""

    fold: int
    train_ids: tuple
    test_ids: tuple
    x_mean: np.ndarray
    x_std: np.ndarray

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.x_mean.tobytes())
        h.update(self.x_std.tobytes())
        return h.hexdigest()[:16]


@dataclass
class CellResult:
    variant: str
    n_hidden: int
    sigma: float
    fold_accuracy: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracy))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_accuracy))


def crossval(dataset: Dataset, variants: Sequence[str], hidden_sweep: Sequence[int],
             sigma_grid: Sequence[float], n_folds: int = 5, seed: int = 0,
             base: Optional[TrainSettings] = None, mode: str = "codebook",
             n_draws: int = 10_000, shuffle: bool = True):
    """Cross-validated accuracy for every (variant, n_hidden, sigma) cell.

    Each training fold sees only its own samples: normalisation, fusion, the
    Student t and the codebook are fitted inside ``fit_pipeline`` on the
    training part.  Returns the cell results and one audit record per fold.
    """
    if not variants or not hidden_sweep or not sigma_grid:
        raise ConfigurationError("variant, hidden-state and sigma lists must be non-empty")
    base = base or TrainSettings(seed=seed)
    folds = stratified_folds(dataset.labels, n_folds, seed, shuffle)
    splits = [(np.flatnonzero(folds != k), np.flatnonzero(folds == k)) for k in range(n_folds)]
    audits = []
    for k, (tr, te) in enumerate(splits):
        train = dataset.subset(tr)
        stats = normalize_fit(train)
        audits.append(FoldAudit(k, tuple(dataset.samples[i].id for i in tr),
                                tuple(dataset.samples[i].id for i in te),
                                stats.x_mean, stats.x_std))
    cells = []
    for variant in variants:
        for h in hidden_sweep:
            for sigma in sigma_grid:
                settings = replace(base, variant=variant, n_hidden=int(h), sigma=float(sigma))
                cell = CellResult(variant, int(h), float(sigma))
                for k, (tr, te) in enumerate(splits):
                    bundle = fit_pipeline(dataset.subset(tr), settings)
                    # the fold audit must describe exactly what this bundle used
                    assert np.array_equal(bundle.norm.x_mean, audits[k].x_mean)
                    test = dataset.subset(te)
                    pred, _ = predict_with_bundle(bundle, test, mode, n_draws, seed)
                    cell.fold_accuracy.append(float(np.mean(pred == test.labels)))
                log.info("%s H=%d sigma=%g: %.4f +- %.4f", variant, h, sigma, cell.mean, cell.std)
                cells.append(cell)
    return cells, audits


# --------------------------------------------------------------------------
# Gradient checks


@dataclass
class GradCheckRow:
    instance: int
    check: str
    n_labels: int
    n_hidden: int
    length: int
    rel_error: float  # nan when the probe straddles a kink


def random_problem(seed: int, force_single_hidden: bool = False):
    """A small random dataset and parameter point for the gradient harness."""
    rng = np.random.default_rng(seed)
    n_labels = int(rng.integers(2, 4))
    n_hidden = 1 if force_single_hidden else int(rng.integers(1, 4))
    m_x, m_xs = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    samples = []
    for i in range(4):
        t = int(rng.integers(1, 6))
        samples.append(SequenceSample(f"g{i}", rng.normal(size=(t, m_x)), i % n_labels,
                                      rng.normal(size=(t, m_xs))))
    dims = FeatureDims(m_x, m_xs, n_labels, n_hidden)
    return dims, samples, init_params(dims, seed, 1.0)


def central_difference(f, v: np.ndarray, step: float) -> np.ndarray:
    g = np.empty_like(v)
    for k in range(v.size):
        e = np.zeros_like(v)
        e[k] = step
        g[k] = (f(v + e) - f(v - e)) / (2 * step)
    return g


def relative_error(g: np.ndarray, ref: np.ndarray) -> float:
    """Largest absolute deviation over the largest reference component."""
    return float(np.max(np.abs(g - ref)) / max(np.max(np.abs(ref)), 1e-12))


def _viterbi_signature(samples, params):
    # per-label best paths, best rival label, and whether the hinge is active
    sig = []
    for s in samples:
        best = [map_energy(y, s, params) for y in range(params.dims.n_labels)]
        rival = max((y for y in range(len(best)) if y != s.label), key=lambda y: best[y][0])
        active = 1.0 + best[rival][0] - best[s.label][0] > 0
        sig.append((tuple(tuple(b[1]) for b in best), rival, active))
    return sig


def gradcheck(n_instances: int = 20, seed: int = 0, step: float = 1e-5, sigma: float = 1.5,
              corrupt: bool = False) -> list:
    """Compare analytic gradients with central differences on seeded problems.

    Each instance yields three rows: the ML gradient with fixed coefficients,
    the ML gradient with adaptive coefficients frozen at the probe point, and
    a directional check of the MM subgradient, which is skipped (nan) when
    the probe interval crosses a change of Viterbi path.  ``corrupt`` scales
    one analytic component, to prove the harness can fail.
    """
    rows = []
    for i in range(n_instances):
        dims, samples, params = random_problem(seed + i, force_single_hidden=(i == 0))
        v = params_as_vector(params)
        meta = (dims.n_labels, dims.n_hidden, max(s.length for s in samples))
        alpha = batch_adaptive_alpha_ml(make_batch(samples), params)
        for name, coeffs in (("ml-fixed", np.ones(len(samples))), ("ml-adaptive", alpha)):
            def f(w, coeffs=coeffs):
                return ml_objective(samples, vector_as_params(w, dims), coeffs, sigma)
            g = ml_gradient(samples, params, coeffs, sigma)
            if corrupt:
                g = g.copy()
                g[0] = g[0] * 1.01 + 1e-2
            rows.append(GradCheckRow(i, name, *meta,
                                     relative_error(g, central_difference(f, v, step))))
        d = np.random.default_rng(seed + i).normal(size=v.size)
        d /= np.linalg.norm(d)
        plus, minus = vector_as_params(v + step * d, dims), vector_as_params(v - step * d, dims)
        base = _viterbi_signature(samples, params)
        if _viterbi_signature(samples, plus) != base or _viterbi_signature(samples, minus) != base:
            err = float("nan")
        else:
            fd = (mm_objective(samples, plus, 1.0, sigma)
                  - mm_objective(samples, minus, 1.0, sigma)) / (2 * step)
            an = mm_subgradient(samples, params, 1.0, sigma) @ d
            err = abs(fd - an) / max(abs(an), 1.0)
        rows.append(GradCheckRow(i, "mm-directional", *meta, err))
    return rows
