"""Domain types and the energy function of the privileged hidden CRF.

The energy of a label ``y`` and hidden path ``h`` is a sum of per-frame unary
potentials and per-edge transition potentials along a first-order chain::

    E(y, h | x, x*) = sum_j theta1[y, h_j] + theta2[h_j] . x_j + theta3[h_j] . x*_j
                    + sum_j omega[y, h_j, h_{j+1}]

Parameters are stored densely: ``theta1`` is ``(n_labels, n_hidden)``,
``theta2`` is ``(n_hidden, m_x)``, ``theta3`` is ``(n_hidden, m_xstar)`` and
``omega`` is ``(n_labels, n_hidden, n_hidden)``.  The flattened parameter
vector concatenates them in that order, each block row-major.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class FeatureDims:
    m_x: int
    m_xstar: int
    n_labels: int
    n_hidden: int

    def __post_init__(self):
        # m_xstar == 0 denotes a model without a privileged channel.
        if self.m_x < 1 or self.n_labels < 1 or self.n_hidden < 1 or self.m_xstar < 0:
            raise InvalidInputError(f"invalid feature dimensions {self}")

    @property
    def n_params(self) -> int:
        L, H = self.n_labels, self.n_hidden
        return L * H + H * self.m_x + H * self.m_xstar + L * H * H

    def to_dict(self) -> dict:
        return {
            "m_x": self.m_x,
            "m_xstar": self.m_xstar,
            "n_labels": self.n_labels,
            "n_hidden": self.n_hidden,
        }


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SequenceSample:
    """One labeled sequence: ``frames`` is ``(T, m_x)``, ``privileged`` is
    ``(T, m_xstar)`` or ``None`` when the channel is absent."""

    id: str
    frames: np.ndarray
    label: int
    privileged: Optional[np.ndarray] = None

    def __post_init__(self):
        frames = np.array(self.frames, dtype=float)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise InvalidInputError(
                f"sample {self.id!r}: frames must be a non-empty (T, m_x) array, "
                f"got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise InvalidInputError(f"sample {self.id!r}: non-finite regular feature")
        object.__setattr__(self, "frames", _readonly(frames))
        if self.privileged is not None:
            priv = np.array(self.privileged, dtype=float)
            if priv.ndim != 2 or priv.shape[0] != frames.shape[0]:
                raise InvalidInputError(
                    f"sample {self.id!r}: privileged must be (T, m_xstar) with "
                    f"T={frames.shape[0]}, got shape {priv.shape}")
            if not np.all(np.isfinite(priv)):
                raise InvalidInputError(f"sample {self.id!r}: non-finite privileged feature")
            object.__setattr__(self, "privileged", _readonly(priv))
        label = int(self.label)
        if label != self.label or label < 0:
            raise InvalidInputError(f"sample {self.id!r}: label must be a non-negative integer")
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "id", str(self.id))

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def has_privileged(self) -> bool:
        return self.privileged is not None

    def without_privileged(self) -> "SequenceSample":
        return SequenceSample(self.id, self.frames, self.label, None)

    def with_privileged(self, privileged) -> "SequenceSample":
        return SequenceSample(self.id, self.frames, self.label, privileged)


@dataclass(frozen=True, eq=False)
class ModelParams:
    theta1: np.ndarray
    theta2: np.ndarray
    theta3: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        t1 = np.array(self.theta1, dtype=float)
        t2 = np.array(self.theta2, dtype=float)
        t3 = np.array(self.theta3, dtype=float)
        om = np.array(self.omega, dtype=float)
        if t1.ndim != 2 or t2.ndim != 2 or om.ndim != 3:
            raise InvalidInputError("parameter blocks have the wrong rank")
        L, H = t1.shape
        if t3.size == 0:
            t3 = t3.reshape(H, 0)
        if t2.shape[0] != H or t3.ndim != 2 or t3.shape[0] != H or om.shape != (L, H, H):
            raise InvalidInputError(
                f"inconsistent parameter shapes {t1.shape}, {t2.shape}, {t3.shape}, {om.shape}")
        for block in (t1, t2, t3, om):
            if not np.all(np.isfinite(block)):
                raise InvalidInputError("non-finite model parameter")
        for name, block in (("theta1", t1), ("theta2", t2), ("theta3", t3), ("omega", om)):
            object.__setattr__(self, name, _readonly(block))

    @property
    def dims(self) -> FeatureDims:
        L, H = self.theta1.shape
        return FeatureDims(self.theta2.shape[1], self.theta3.shape[1], L, H)

    def squared_norm(self) -> float:
        v = params_as_vector(self)
        return float(v @ v)

    def equals(self, other: "ModelParams") -> bool:
        return all(
            np.array_equal(a, b)
            for a, b in zip(
                (self.theta1, self.theta2, self.theta3, self.omega),
                (other.theta1, other.theta2, other.theta3, other.omega),
            )
        )


def _check_label(label, dims):
    if not 0 <= label < dims.n_labels:
        raise InvalidInputError(f"label {label} outside [0, {dims.n_labels})")


def _check_hidden(a, dims):
    if not 0 <= a < dims.n_hidden:
        raise InvalidInputError(f"hidden state {a} outside [0, {dims.n_hidden})")


def unary_potential(label: int, hidden: int, frame, priv_frame, params: ModelParams) -> float:
    """Label, observation and (when given) privileged score of one frame.

    An absent ``priv_frame`` drops the privileged term; it is never imputed.
    """
    dims = params.dims
    _check_label(label, dims)
    _check_hidden(hidden, dims)
    frame = np.asarray(frame, dtype=float)
    if frame.shape != (dims.m_x,):
        raise InvalidInputError(f"frame has shape {frame.shape}, expected ({dims.m_x},)")
    value = params.theta1[label, hidden] + params.theta2[hidden] @ frame
    if priv_frame is not None:
        priv_frame = np.asarray(priv_frame, dtype=float)
        if priv_frame.shape != (dims.m_xstar,):
            raise InvalidInputError(
                f"privileged frame has shape {priv_frame.shape}, expected ({dims.m_xstar},)")
        value += params.theta3[hidden] @ priv_frame
    return float(value)


def pairwise_potential(label: int, hidden_j: int, hidden_k: int, params: ModelParams) -> float:
    dims = params.dims
    _check_label(label, dims)
    _check_hidden(hidden_j, dims)
    _check_hidden(hidden_k, dims)
    return float(params.omega[label, hidden_j, hidden_k])


def energy(label: int, hidden_path: Sequence[int], sample: SequenceSample,
           params: ModelParams, use_privileged: bool = True) -> float:
    """Energy of one (label, hidden path) configuration of ``sample``."""
    if len(hidden_path) != sample.length:
        raise InvalidInputError(
            f"hidden path has length {len(hidden_path)}, sample has T={sample.length}")
    priv = sample.privileged if use_privileged else None
    total = 0.0
    for j, a in enumerate(hidden_path):
        total += unary_potential(label, int(a), sample.frames[j],
                                 None if priv is None else priv[j], params)
    for j in range(len(hidden_path) - 1):
        total += pairwise_potential(label, int(hidden_path[j]), int(hidden_path[j + 1]), params)
    return total


def params_as_vector(params: ModelParams) -> np.ndarray:
    return np.concatenate([params.theta1.ravel(), params.theta2.ravel(),
                           params.theta3.ravel(), params.omega.ravel()])


def vector_as_params(v, dims: FeatureDims) -> ModelParams:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size != dims.n_params:
        raise InvalidInputError(
            f"parameter vector has length {v.size}, expected {dims.n_params}")
    L, H, mx, ms = dims.n_labels, dims.n_hidden, dims.m_x, dims.m_xstar
    sizes = np.cumsum([L * H, H * mx, H * ms])
    t1, t2, t3, om = np.split(v, sizes)
    return ModelParams(t1.reshape(L, H), t2.reshape(H, mx), t3.reshape(H, ms),
                       om.reshape(L, H, H))


def zero_params(dims: FeatureDims) -> ModelParams:
    return vector_as_params(np.zeros(dims.n_params), dims)


def init_params(dims: FeatureDims, seed: int, scale: float) -> ModelParams:
    """I.i.d. uniform entries in ``[-scale, scale]``, reproducible from ``seed``."""
    if scale < 0:
        raise InvalidInputError("scale must be non-negative")
    rng = np.random.default_rng(seed)
    v = rng.uniform(-1.0, 1.0, size=dims.n_params) * scale
    return vector_as_params(v, dims)
