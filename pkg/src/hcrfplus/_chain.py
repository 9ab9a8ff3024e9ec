"""Compiled log-domain dynamic programs over a single hidden chain.

All kernels take unary scores ``u`` of shape ``(T, H)`` (or a padded batch
``(C, Tmax, H)`` with per-chain lengths) and transition scores ``(H, H)``
indexed ``[from, to]``.  Loops are written out explicitly so the cost is
exactly ``O(T * H^2)`` per chain.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _lse_into(prev, trans, u_t, out):
    H = prev.shape[0]
    for b in range(H):
        m = -np.inf
        for a in range(H):
            s = prev[a] + trans[a, b]
            if s > m:
                m = s
        acc = 0.0
        for a in range(H):
            acc += math.exp(prev[a] + trans[a, b] - m)
        out[b] = m + math.log(acc) + u_t[b]


@njit(cache=True)
def _lse_vec(v):
    m = -np.inf
    for i in range(v.shape[0]):
        if v[i] > m:
            m = v[i]
    acc = 0.0
    for i in range(v.shape[0]):
        acc += math.exp(v[i] - m)
    return m + math.log(acc)


@njit(cache=True)
def log_partition(u, trans):
    T, H = u.shape
    alpha = u[0].copy()
    nxt = np.empty(H)
    for t in range(1, T):
        _lse_into(alpha, trans, u[t], nxt)
        alpha, nxt = nxt, alpha
    return _lse_vec(alpha)


@njit(cache=True)
def _forward(u, trans, T, alpha):
    H = u.shape[1]
    for b in range(H):
        alpha[0, b] = u[0, b]
    for t in range(1, T):
        _lse_into(alpha[t - 1], trans, u[t], alpha[t])


@njit(cache=True)
def _backward(u, trans, T, beta):
    H = u.shape[1]
    for a in range(H):
        beta[T - 1, a] = 0.0
    tmp = np.empty(H)
    for t in range(T - 2, -1, -1):
        for a in range(H):
            m = -np.inf
            for b in range(H):
                tmp[b] = trans[a, b] + u[t + 1, b] + beta[t + 1, b]
                if tmp[b] > m:
                    m = tmp[b]
            acc = 0.0
            for b in range(H):
                acc += math.exp(tmp[b] - m)
            beta[t, a] = m + math.log(acc)


@njit(cache=True)
def forward_backward(u, trans):
    """Log partition, unary marginals ``(T, H)`` and edge marginals ``(T-1, H, H)``."""
    T, H = u.shape
    alpha = np.empty((T, H))
    beta = np.empty((T, H))
    _forward(u, trans, T, alpha)
    _backward(u, trans, T, beta)
    logz = _lse_vec(alpha[T - 1])
    unary = np.empty((T, H))
    for t in range(T):
        for a in range(H):
            unary[t, a] = math.exp(alpha[t, a] + beta[t, a] - logz)
    pair = np.empty((max(T - 1, 0), H, H))
    for t in range(T - 1):
        for a in range(H):
            for b in range(H):
                pair[t, a, b] = math.exp(alpha[t, a] + trans[a, b] + u[t + 1, b]
                                         + beta[t + 1, b] - logz)
    return logz, unary, pair


@njit(cache=True)
def forward_backward_batch(u, trans, chain_trans, lengths):
    """Batched forward-backward.

    ``u`` is ``(C, Tmax, H)``; chain ``c`` uses ``trans[chain_trans[c]]`` and
    its first ``lengths[c]`` frames.  Returns the log partitions ``(C,)``,
    unary marginals ``(C, Tmax, H)`` (zero past each length) and edge
    marginals summed over positions ``(C, H, H)``.
    """
    C, Tmax, H = u.shape
    logz = np.empty(C)
    unary = np.zeros((C, Tmax, H))
    pair_sum = np.zeros((C, H, H))
    alpha = np.empty((Tmax, H))
    beta = np.empty((Tmax, H))
    for c in range(C):
        T = lengths[c]
        tr = trans[chain_trans[c]]
        uc = u[c]
        _forward(uc, tr, T, alpha)
        _backward(uc, tr, T, beta)
        z = _lse_vec(alpha[T - 1])
        logz[c] = z
        for t in range(T):
            for a in range(H):
                unary[c, t, a] = math.exp(alpha[t, a] + beta[t, a] - z)
        for t in range(T - 1):
            for a in range(H):
                base = alpha[t, a] - z
                for b in range(H):
                    pair_sum[c, a, b] += math.exp(base + tr[a, b] + uc[t + 1, b] + beta[t + 1, b])
    return logz, unary, pair_sum


@njit(cache=True)
def viterbi_batch(u, trans, chain_trans, lengths):
    """Best path score and path per chain; ties go to the lowest state index."""
    C, Tmax, H = u.shape
    best = np.empty(C)
    paths = np.zeros((C, Tmax), dtype=np.int64)
    delta = np.empty((Tmax, H))
    back = np.zeros((Tmax, H), dtype=np.int64)
    for c in range(C):
        T = lengths[c]
        tr = trans[chain_trans[c]]
        for b in range(H):
            delta[0, b] = u[c, 0, b]
        for t in range(1, T):
            for b in range(H):
                m = -np.inf
                arg = 0
                for a in range(H):
                    s = delta[t - 1, a] + tr[a, b]
                    if s > m:
                        m = s
                        arg = a
                delta[t, b] = m + u[c, t, b]
                back[t, b] = arg
        m = -np.inf
        arg = 0
        for b in range(H):
            if delta[T - 1, b] > m:
                m = delta[T - 1, b]
                arg = b
        best[c] = m
        paths[c, T - 1] = arg
        for t in range(T - 1, 0, -1):
            paths[c, t - 1] = back[t, paths[c, t]]
    return best, paths
