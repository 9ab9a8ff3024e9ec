import itertools

import numpy as np
import pytest

from hcrfplus.model import FeatureDims, SequenceSample, init_params


def random_instance(seed, n_labels=3, n_hidden=3, length=4, m_x=3, m_xstar=2, scale=1.0,
                    privileged=True):
    rng = np.random.default_rng(seed)
    dims = FeatureDims(m_x, m_xstar, n_labels, n_hidden)
    params = init_params(dims, seed + 1000, scale)
    sample = SequenceSample(
        f"r{seed}", rng.normal(size=(length, m_x)), int(rng.integers(n_labels)),
        rng.normal(size=(length, m_xstar)) if privileged else None)
    return dims, params, sample


def random_dataset(seed, n=10, n_labels=3, n_hidden=3, m_x=3, m_xstar=2, t_range=(2, 5)):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        T = int(rng.integers(t_range[0], t_range[1] + 1))
        samples.append(SequenceSample(f"d{i}", rng.normal(size=(T, m_x)), i % n_labels,
                                      rng.normal(size=(T, m_xstar))))
    return FeatureDims(m_x, m_xstar, n_labels, n_hidden), samples


def enumerate_scores(sample, params, use_privileged=True):
    """Energies of every (label, path), computed term by term from the raw arrays.

    Returns ``(scores[L, n_paths], paths)``.
    """
    L, H = params.theta1.shape
    T = sample.length
    paths = list(itertools.product(range(H), repeat=T))
    scores = np.empty((L, len(paths)))
    priv = sample.privileged if use_privileged else None
    for y in range(L):
        for k, path in enumerate(paths):
            e = 0.0
            for j, a in enumerate(path):
                e += params.theta1[y, a]
                e += sum(params.theta2[a, d] * sample.frames[j, d] for d in range(sample.frames.shape[1]))
                if priv is not None:
                    e += sum(params.theta3[a, d] * priv[j, d] for d in range(priv.shape[1]))
            for j in range(T - 1):
                e += params.omega[y, path[j], path[j + 1]]
            scores[y, k] = e
    return scores, paths


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# PASS/FAIL lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
