"""Exact inference on the label-conditioned hidden chain.

Conditioning on the label turns the model into a linear chain over the hidden
states, so partition functions, marginals and maximisers are computed exactly
with forward-backward and Viterbi in the log domain.  Batched variants operate
on zero-padded stacks of sequences and are what the trainers use.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from . import _chain
from .errors import CapacityError, ConfigurationError, InvalidInputError
from .model import FeatureDims, ModelParams, SequenceSample, energy

PREDICT_MODES = ("codebook", "montecarlo", "regular-only")


@dataclass(frozen=True, eq=False)
class ClassPosterior:
    log_probs: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    @property
    def label(self) -> int:
        # np.argmax returns the first maximiser: lowest label wins ties.
        return int(np.argmax(self.log_probs))


@dataclass(frozen=True, eq=False)
class HiddenMarginals:
    unary: np.ndarray
    pairwise: np.ndarray


def _check_sample(sample: SequenceSample, dims: FeatureDims, use_privileged: bool):
    if sample.frames.shape[1] != dims.m_x:
        raise InvalidInputError(
            f"sample {sample.id!r} has {sample.frames.shape[1]} regular dimensions, "
            f"model expects {dims.m_x}")
    if use_privileged and sample.privileged is not None and dims.m_xstar > 0:
        if sample.privileged.shape[1] != dims.m_xstar:
            raise InvalidInputError(
                f"sample {sample.id!r} has {sample.privileged.shape[1]} privileged "
                f"dimensions, model expects {dims.m_xstar}")


def unary_table(sample: SequenceSample, params: ModelParams, use_privileged: bool = True):
    """Unary potentials for every (label, frame, hidden state): ``(L, T, H)``."""
    dims = params.dims
    _check_sample(sample, dims, use_privileged)
    obs = sample.frames @ params.theta2.T
    if use_privileged and sample.privileged is not None and dims.m_xstar > 0:
        obs = obs + sample.privileged @ params.theta3.T
    return np.ascontiguousarray(params.theta1[:, None, :] + obs[None, :, :])


def class_log_partition(label: int, sample: SequenceSample, params: ModelParams,
                        use_privileged: bool = True) -> float:
    if not 0 <= label < params.dims.n_labels:
        raise InvalidInputError(f"label {label} out of range")
    dims = params.dims
    _check_sample(sample, dims, use_privileged)
    # only this label's unary table: theta1[label] + observation terms
    u = sample.frames @ params.theta2.T
    if use_privileged and sample.privileged is not None and dims.m_xstar > 0:
        u += sample.privileged @ params.theta3.T
    u += params.theta1[label]
    return float(_chain.log_partition(u, params.omega[label]))


def _class_log_partitions(sample, params, use_privileged):
    u = unary_table(sample, params, use_privileged)
    return np.array([_chain.log_partition(u[y], params.omega[y]) for y in range(u.shape[0])])


def log_partition(sample: SequenceSample, params: ModelParams, use_privileged: bool = True) -> float:
    return float(logsumexp(_class_log_partitions(sample, params, use_privileged)))


def posterior(sample: SequenceSample, params: ModelParams,
              use_privileged: bool = True) -> ClassPosterior:
    z = _class_log_partitions(sample, params, use_privileged)
    return ClassPosterior(z - logsumexp(z))


def marginals(label: int, sample: SequenceSample, params: ModelParams,
              use_privileged: bool = True) -> HiddenMarginals:
    if not 0 <= label < params.dims.n_labels:
        raise InvalidInputError(f"label {label} out of range")
    u = np.ascontiguousarray(unary_table(sample, params, use_privileged)[label])
    _, unary, pair = _chain.forward_backward(u, params.omega[label])
    return HiddenMarginals(unary, pair)


def map_energy(label: int, sample: SequenceSample, params: ModelParams,
               use_privileged: bool = True) -> tuple[float, np.ndarray]:
    """Maximum energy over hidden paths for ``label`` and one maximising path."""
    if not 0 <= label < params.dims.n_labels:
        raise InvalidInputError(f"label {label} out of range")
    u = unary_table(sample, params, use_privileged)[label][None]
    best, paths = _chain.viterbi_batch(np.ascontiguousarray(u), params.omega[label][None],
                                       np.zeros(1, dtype=np.int64),
                                       np.array([sample.length], dtype=np.int64))
    return float(best[0]), paths[0]


def brute_force_posterior(sample: SequenceSample, params: ModelParams,
                          use_privileged: bool = True, cap: int = 10**6) -> ClassPosterior:
    """Posterior by explicit enumeration of every (label, hidden path)."""
    dims = params.dims
    n_paths = dims.n_hidden ** sample.length
    if n_paths > cap:
        raise CapacityError(f"{n_paths} hidden paths exceed the enumeration cap {cap}")
    scores = np.empty((dims.n_labels, n_paths))
    for y in range(dims.n_labels):
        for k, path in enumerate(itertools.product(range(dims.n_hidden), repeat=sample.length)):
            scores[y, k] = energy(y, path, sample, params, use_privileged)
    z = logsumexp(scores, axis=1)
    return ClassPosterior(z - logsumexp(z))


# --------------------------------------------------------------------------
# Batched engine


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Zero-padded stack of sequences."""

    frames: np.ndarray          # (N, Tmax, m_x)
    privileged: Optional[np.ndarray]  # (N, Tmax, m_xstar) or None
    lengths: np.ndarray         # (N,)
    labels: np.ndarray          # (N,)

    @property
    def size(self) -> int:
        return self.frames.shape[0]


def make_batch(samples: Sequence[SequenceSample], use_privileged: bool = True) -> SampleBatch:
    """Stack ``samples``; the privileged block is kept only if every sample has one."""
    samples = list(samples)
    if not samples:
        raise InvalidInputError("empty batch")
    n = len(samples)
    tmax = max(s.length for s in samples)
    m_x = samples[0].frames.shape[1]
    frames = np.zeros((n, tmax, m_x))
    lengths = np.empty(n, dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    keep_priv = use_privileged and all(s.privileged is not None for s in samples)
    priv = None
    if keep_priv:
        priv = np.zeros((n, tmax, samples[0].privileged.shape[1]))
    for i, s in enumerate(samples):
        if s.frames.shape[1] != m_x:
            raise InvalidInputError(f"sample {s.id!r} has inconsistent regular dimension")
        frames[i, :s.length] = s.frames
        if keep_priv:
            if s.privileged.shape[1] != priv.shape[2]:
                raise InvalidInputError(f"sample {s.id!r} has inconsistent privileged dimension")
            priv[i, :s.length] = s.privileged
        lengths[i] = s.length
        labels[i] = s.label
    return SampleBatch(frames, priv, lengths, labels)


def batch_unary(batch: SampleBatch, params: ModelParams) -> np.ndarray:
    """Unary scores ``(N, L, Tmax, H)``; padded frames carry the label term only."""
    dims = params.dims
    if batch.frames.shape[2] != dims.m_x:
        raise InvalidInputError("batch regular dimension does not match the model")
    obs = batch.frames @ params.theta2.T
    if batch.privileged is not None and dims.m_xstar > 0:
        if batch.privileged.shape[2] != dims.m_xstar:
            raise InvalidInputError("batch privileged dimension does not match the model")
        obs = obs + batch.privileged @ params.theta3.T
    return obs[:, None, :, :] + params.theta1[None, :, None, :]


def _chain_args(batch, params):
    u = batch_unary(batch, params)
    n, L, tmax, H = u.shape
    flat = np.ascontiguousarray(u.reshape(n * L, tmax, H))
    chain_trans = np.tile(np.arange(L, dtype=np.int64), n)
    lengths = np.repeat(batch.lengths, L)
    return flat, chain_trans, lengths, (n, L, tmax, H)


def batch_forward_backward(batch: SampleBatch, params: ModelParams):
    """Per-(sample, label) log partitions ``(N, L)``, unary marginals
    ``(N, L, Tmax, H)`` and position-summed edge marginals ``(N, L, H, H)``."""
    flat, chain_trans, lengths, (n, L, tmax, H) = _chain_args(batch, params)
    logz, unary, pair_sum = _chain.forward_backward_batch(
        flat, np.ascontiguousarray(params.omega), chain_trans, lengths)
    return logz.reshape(n, L), unary.reshape(n, L, tmax, H), pair_sum.reshape(n, L, H, H)


def batch_log_partitions(batch: SampleBatch, params: ModelParams) -> np.ndarray:
    return batch_forward_backward(batch, params)[0]


def batch_posteriors(batch: SampleBatch, params: ModelParams) -> np.ndarray:
    """Class log-posteriors ``(N, L)``."""
    z = batch_log_partitions(batch, params)
    return z - logsumexp(z, axis=1, keepdims=True)


def batch_viterbi(batch: SampleBatch, params: ModelParams):
    """Viterbi energies ``(N, L)`` and paths ``(N, L, Tmax)`` (zero past each length)."""
    flat, chain_trans, lengths, (n, L, tmax, H) = _chain_args(batch, params)
    best, paths = _chain.viterbi_batch(flat, np.ascontiguousarray(params.omega),
                                       chain_trans, lengths)
    return best.reshape(n, L), paths.reshape(n, L, tmax)


def path_statistics(batch: SampleBatch, paths: np.ndarray, n_hidden: int):
    """One-hot unary occupancy ``(N, L, Tmax, H)`` and transition counts
    ``(N, L, H, H)`` of hidden paths, in the layout of the marginals."""
    n, L, tmax = paths.shape
    valid = np.arange(tmax)[None, :] < batch.lengths[:, None]  # (N, Tmax)
    onehot = (paths[..., None] == np.arange(n_hidden)) & valid[:, None, :, None]
    unary = onehot.astype(float)
    edges = valid[:, 1:]
    counts = np.zeros((n, L, n_hidden, n_hidden))
    src, dst = paths[:, :, :-1], paths[:, :, 1:]
    ni, li, ti = np.nonzero(np.broadcast_to(edges[:, None, :], src.shape))
    np.add.at(counts, (ni, li, src[ni, li, ti], dst[ni, li, ti]), 1.0)
    return unary, counts


def expected_features(batch: SampleBatch, dims: FeatureDims, weights: np.ndarray,
                      unary: np.ndarray, pair_sum: np.ndarray) -> np.ndarray:
    """Sum over samples and labels of ``weights[n, y]`` times the expected
    sufficient statistics of the chain (n, y), as a flat parameter vector."""
    g1 = np.einsum("nl,nlta->la", weights, unary)
    occ = np.einsum("nl,nlta->nta", weights, unary)
    g2 = np.einsum("nta,ntd->ad", occ, batch.frames)
    if dims.m_xstar > 0 and batch.privileged is not None:
        g3 = np.einsum("nta,ntd->ad", occ, batch.privileged)
    else:
        g3 = np.zeros((dims.n_hidden, dims.m_xstar))
    gw = np.einsum("nl,nlab->lab", weights, pair_sum)
    return np.concatenate([g1.ravel(), g2.ravel(), g3.ravel(), gw.ravel()])


# --------------------------------------------------------------------------
# Test-time prediction with the privileged channel marginalised out


def _expected_privileged(samples, priv, codebook, mode, n_draws, seed):
    from . import robust

    if priv is None:
        raise ConfigurationError(f"prediction mode {mode!r} needs fitted Student-t parameters")
    if mode == "codebook":
        if codebook is None:
            raise ConfigurationError("codebook prediction needs a privileged codebook")
        return [robust.expected_privileged(priv, codebook, s.frames) for s in samples]
    rng = np.random.default_rng(seed)
    return [robust.montecarlo_privileged(priv, s.frames, n_draws, rng) for s in samples]


def predict_batch(samples: Sequence[SequenceSample], params: ModelParams, priv=None,
                  codebook=None, mode: str = "codebook", n_draws: int = 10_000,
                  seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Labels ``(N,)`` and class log-posteriors ``(N, L)`` without using any
    privileged data carried by ``samples``."""
    if mode not in PREDICT_MODES:
        raise ConfigurationError(f"unknown prediction mode {mode!r}")
    samples = [s.without_privileged() for s in samples]
    for s in samples:
        _check_sample(s, params.dims, False)
    if mode != "regular-only" and params.dims.m_xstar > 0:
        expected = _expected_privileged(samples, priv, codebook, mode, n_draws, seed)
        samples = [s.with_privileged(e) for s, e in zip(samples, expected)]
    logp = batch_posteriors(make_batch(samples), params)
    return np.argmax(logp, axis=1), logp


def predict(sample: SequenceSample, params: ModelParams, priv=None, codebook=None,
            mode: str = "codebook", n_draws: int = 10_000,
            seed: int = 0) -> tuple[int, ClassPosterior]:
    """Label and class posterior of ``sample`` with the privileged channel
    replaced, frame by frame, by its conditional expectation given the
    regular frame (approximated over the codebook or by Monte-Carlo draws).

    Because the privileged term enters each unary potential linearly, the
    per-frame expectation marginalises it exactly; the approximation lies
    only in how that expectation is evaluated.
    """
    labels, logp = predict_batch([sample], params, priv, codebook, mode, n_draws, seed)
    return int(labels[0]), ClassPosterior(logp[0])

