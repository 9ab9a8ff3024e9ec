"""Datasets, normalisation, the synthetic generator and model bundles."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .errors import InvalidInputError, SchemaError, VersionError
from .fusion import FusionModel
from .model import FeatureDims, ModelParams, SequenceSample
from .robust import PrivCodebook, StudentTParams

FORMAT_VERSION = 1
STD_FLOOR = 1e-8


# --------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labeled sequences sharing regular (and, where present, privileged) dimensions.

    ``m_xstar`` is 0 when no sample carries a privileged channel.
    """

    samples: tuple
    label_names: Optional[tuple] = None
    n_labels: int = 0

    def __post_init__(self):
        samples = tuple(self.samples)
        if not samples:
            raise SchemaError("a dataset needs at least one sample")
        m_x = samples[0].frames.shape[1]
        priv_dims = {s.privileged.shape[1] for s in samples if s.privileged is not None}
        if len(priv_dims) > 1:
            raise SchemaError(f"inconsistent privileged dimensions {sorted(priv_dims)}")
        for s in samples:
            if s.frames.shape[1] != m_x:
                raise SchemaError(
                    f"sample {s.id!r} has {s.frames.shape[1]} regular dimensions, expected {m_x}")
        n_labels = max(self.n_labels, 1 + max(s.label for s in samples))
        if self.label_names is not None:
            names = tuple(str(n) for n in self.label_names)
            if len(names) < n_labels:
                raise SchemaError("fewer label names than labels")
            n_labels = len(names)
            object.__setattr__(self, "label_names", names)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "n_labels", n_labels)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def m_x(self) -> int:
        return self.samples[0].frames.shape[1]

    @property
    def m_xstar(self) -> int:
        for s in self.samples:
            if s.privileged is not None:
                return s.privileged.shape[1]
        return 0

    @property
    def fully_privileged(self) -> bool:
        return all(s.privileged is not None for s in self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def dims(self, n_hidden: int) -> FeatureDims:
        return FeatureDims(self.m_x, self.m_xstar, self.n_labels, n_hidden)

    def subset(self, indices) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in indices), self.label_names, self.n_labels)

    def replace_samples(self, samples) -> "Dataset":
        return Dataset(tuple(samples), self.label_names, self.n_labels)

    def without_privileged(self) -> "Dataset":
        return self.replace_samples(s.without_privileged() for s in self.samples)


def _sample_from_record(rec: dict, where: str) -> SequenceSample:
    if not isinstance(rec, dict):
        raise SchemaError(f"{where}: record must be an object")
    for key in ("id", "label", "frames"):
        if key not in rec:
            raise SchemaError(f"{where}: missing field {key!r}")
    sid = str(rec["id"])
    try:
        return SequenceSample(sid, np.asarray(rec["frames"], dtype=float), rec["label"],
                              None if rec.get("privileged") is None
                              else np.asarray(rec["privileged"], dtype=float))
    except (InvalidInputError, ValueError, TypeError) as exc:
        raise SchemaError(f"{where}: sample {sid!r}: {exc}") from exc


def _load_jsonl(path: Path) -> Dataset:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                rec = json.loads(text)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: cannot parse record: {exc}") from exc
            samples.append(_sample_from_record(rec, f"{path}:{lineno}"))
    return Dataset(tuple(samples))


def _load_csv(path: Path) -> Dataset:
    groups: dict[str, list] = {}
    labels: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if header[:3] != ["id", "t", "label"]:
            raise SchemaError(f"{path}: header must start with id,t,label")
        x_cols = [i for i, h in enumerate(header) if h.startswith("x_")]
        s_cols = [i for i, h in enumerate(header) if h.startswith("xs_")]
        if [header[i] for i in x_cols] != [f"x_{k}" for k in range(len(x_cols))] or \
                [header[i] for i in s_cols] != [f"xs_{k}" for k in range(len(s_cols))]:
            raise SchemaError(f"{path}: feature columns must be x_0.. and xs_0.. in order")
        if not x_cols:
            raise SchemaError(f"{path}: no regular feature columns")
        for rowno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}:{rowno}: expected {len(header)} columns, got {len(row)}")
            try:
                sid, t, label = row[0], int(row[1]), int(row[2])
                x = [float(row[i]) for i in x_cols]
                xs = [float(row[i]) for i in s_cols] if s_cols and row[s_cols[0]] != "" else None
            except ValueError as exc:
                raise SchemaError(f"{path}:{rowno}: {exc}") from exc
            if sid in labels and labels[sid] != label:
                raise SchemaError(f"{path}:{rowno}: sample {sid!r} changes label")
            labels[sid] = label
            groups.setdefault(sid, []).append((t, x, xs))
    samples = []
    for sid, rows in groups.items():
        rows.sort(key=lambda r: r[0])
        privs = [r[2] for r in rows]
        if any(p is None for p in privs) and not all(p is None for p in privs):
            raise SchemaError(f"{path}: sample {sid!r} has privileged values on some frames only")
        rec = {"id": sid, "label": labels[sid], "frames": [r[1] for r in rows],
               "privileged": None if privs[0] is None else privs}
        samples.append(_sample_from_record(rec, str(path)))
    if not samples:
        raise SchemaError(f"{path}: no samples")
    return Dataset(tuple(samples))


def _format_of(path, fmt):
    if fmt is not None:
        if fmt not in ("jsonl", "csv"):
            raise SchemaError(f"unknown dataset format {fmt!r}")
        return fmt
    return "csv" if str(path).endswith(".csv") else "jsonl"


def load_dataset(path, fmt: Optional[str] = None) -> Dataset:
    """Read a dataset from jsonl (one sequence per line) or csv (one frame per row)."""
    path = Path(path)
    fmt = _format_of(path, fmt)
    return _load_csv(path) if fmt == "csv" else _load_jsonl(path)


def save_dataset(dataset: Dataset, path, fmt: Optional[str] = None,
                 header: Optional[str] = None) -> None:
    path = Path(path)
    fmt = _format_of(path, fmt)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if fmt == "jsonl":
            if header is not None:
                fh.write(f"# {header}\n")
            for s in dataset.samples:
                rec = {"id": s.id, "label": s.label, "frames": s.frames.tolist()}
                if s.privileged is not None:
                    rec["privileged"] = s.privileged.tolist()
                fh.write(json.dumps(rec) + "\n")
            return
        writer = csv.writer(fh, lineterminator="\n")
        m_xs = dataset.m_xstar
        writer.writerow(["id", "t", "label"] + [f"x_{k}" for k in range(dataset.m_x)]
                        + [f"xs_{k}" for k in range(m_xs)])
        for s in dataset.samples:
            for t in range(s.length):
                xs = ([repr(float(v)) for v in s.privileged[t]] if s.privileged is not None
                      else [""] * m_xs)
                writer.writerow([s.id, t, s.label] + [repr(float(v)) for v in s.frames[t]] + xs)


# --------------------------------------------------------------------------
# Normalisation


@dataclass(frozen=True, eq=False)
class NormStats:
    x_mean: np.ndarray
    x_std: np.ndarray
    xs_mean: np.ndarray
    xs_std: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("x_mean", "x_std", "xs_mean", "xs_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        arrays = {k: np.asarray(d[k], dtype=float).ravel()
                  for k in ("x_mean", "x_std", "xs_mean", "xs_std")}
        if np.any(arrays["x_std"] <= 0) or np.any(arrays["xs_std"] <= 0):
            raise SchemaError("normalisation standard deviations must be positive")
        return cls(**arrays)


def normalize_fit(dataset: Dataset) -> NormStats:
    """Per-dimension mean and (floored) standard deviation over all frames."""
    X = np.concatenate([s.frames for s in dataset.samples])
    privs = [s.privileged for s in dataset.samples if s.privileged is not None]
    if privs:
        XS = np.concatenate(privs)
        xs_mean, xs_std = XS.mean(axis=0), np.maximum(XS.std(axis=0), STD_FLOOR)
    else:
        xs_mean, xs_std = np.zeros(0), np.ones(0)
    return NormStats(X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR), xs_mean, xs_std)


def normalize_sample(sample: SequenceSample, stats: NormStats) -> SequenceSample:
    priv = None
    if sample.privileged is not None and stats.xs_mean.size:
        priv = (sample.privileged - stats.xs_mean) / stats.xs_std
    return SequenceSample(sample.id, (sample.frames - stats.x_mean) / stats.x_std,
                          sample.label, priv)


def normalize_apply(dataset: Dataset, stats: NormStats) -> Dataset:
    if dataset.m_x != stats.x_mean.size:
        raise SchemaError(
            f"dataset has {dataset.m_x} regular dimensions, statistics cover {stats.x_mean.size}")
    if dataset.m_xstar and stats.xs_mean.size and dataset.m_xstar != stats.xs_mean.size:
        raise SchemaError("privileged dimension does not match the normalisation statistics")
    return dataset.replace_samples(normalize_sample(s, stats) for s in dataset.samples)


def denormalize_sample(sample: SequenceSample, stats: NormStats) -> SequenceSample:
    priv = None
    if sample.privileged is not None and stats.xs_mean.size:
        priv = sample.privileged * stats.xs_std + stats.xs_mean
    return SequenceSample(sample.id, sample.frames * stats.x_std + stats.x_mean,
                          sample.label, priv)


# --------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Controls for the synthetic generator.

    Each class owns a hidden-state Markov chain; regular frames are Gaussian
    emissions of the hidden state and privileged frames mix an encoding of the
    hidden state with noise in proportion ``rho``.  A fraction ``epsilon`` of
    privileged frames is replaced by outliers of scale ``outlier_scale``.
    """

    n_labels: int = 4
    n_hidden_true: int = 5
    t_min: int = 10
    t_max: int = 20
    m_x: int = 10
    m_xstar: int = 5
    samples_per_class: int = 80
    noise: float = 1.0
    rho: float = 0.9
    epsilon: float = 0.0
    outlier_scale: float = 20.0
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_labels, self.n_hidden_true, self.t_min, self.m_x, self.m_xstar,
                  self.samples_per_class)
        if min(counts) < 1 or self.t_max < self.t_min:
            raise InvalidInputError("synthetic counts must be >= 1 and t_min <= t_max")
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidInputError("rho must lie in [0, 1]")
        if not 0.0 <= self.epsilon < 1.0:
            raise InvalidInputError("epsilon must lie in [0, 1)")
        if self.noise < 0 or self.outlier_scale < 0:
            raise InvalidInputError("noise and outlier scales must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


# Probability of following the class-specific successor of a hidden state.
_SUCCESSOR_PROB = 0.8


def hidden_state_encoding(n_hidden: int, m_xstar: int, rng: np.random.Generator) -> np.ndarray:
    """Rows encode hidden states in the privileged space: one-hot when it fits,
    otherwise unit-norm random directions."""
    if m_xstar >= n_hidden:
        return np.eye(n_hidden, m_xstar)
    enc = rng.normal(size=(n_hidden, m_xstar))
    return enc / np.linalg.norm(enc, axis=1, keepdims=True)


def synth_generate(spec: SynthSpec, return_hidden: bool = False):
    """Generate a labeled LUPI dataset (and, optionally, the hidden paths).

    Clean data and outliers come from independent random streams, so two
    specs differing only in ``epsilon`` share every clean value.
    """
    main_seq, outlier_seq = np.random.SeedSequence(spec.seed).spawn(2)
    rng = np.random.default_rng(main_seq)
    H = spec.n_hidden_true
    means = rng.normal(size=(H, spec.m_x))
    enc = hidden_state_encoding(H, spec.m_xstar, rng)
    trans = []
    for _ in range(spec.n_labels):
        succ = rng.permutation(H)
        a = np.full((H, H), (1.0 - _SUCCESSOR_PROB) / H)
        a[np.arange(H), succ] += _SUCCESSOR_PROB
        trans.append(a)
    samples, hidden = [], []
    for y in range(spec.n_labels):
        for k in range(spec.samples_per_class):
            T = int(rng.integers(spec.t_min, spec.t_max + 1))
            h = np.empty(T, dtype=np.int64)
            h[0] = rng.integers(H)
            for t in range(1, T):
                h[t] = rng.choice(H, p=trans[y][h[t - 1]])
            x = means[h] + spec.noise * rng.normal(size=(T, spec.m_x))
            xs = spec.rho * enc[h] + (1.0 - spec.rho) * rng.normal(size=(T, spec.m_xstar))
            samples.append([f"s{y}_{k:04d}", x, y, xs])
            hidden.append(h)
    if spec.epsilon > 0:
        out_rng = np.random.default_rng(outlier_seq)
        for rec in samples:
            xs = rec[3]
            mask = out_rng.random(xs.shape[0]) < spec.epsilon
            draws = spec.outlier_scale * out_rng.normal(size=xs.shape)
            xs[mask] = draws[mask]
    ds = Dataset(tuple(SequenceSample(*rec) for rec in samples), n_labels=spec.n_labels)
    return (ds, hidden) if return_hidden else ds


# --------------------------------------------------------------------------
# Model bundles


@dataclass(frozen=True, eq=False)
class ModelBundle:
    variant: str
    params: ModelParams
    norm: NormStats
    t_params: Optional[StudentTParams] = None
    codebook: Optional[PrivCodebook] = None
    fusion: Optional[FusionModel] = None
    training_meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def dims(self) -> FeatureDims:
        return self.params.dims


def _arr(a) -> Any:
    return np.asarray(a, dtype=float).tolist()


def bundle_to_dict(bundle: ModelBundle) -> dict:
    p = bundle.params
    out = {
        "format_version": bundle.format_version,
        "variant": bundle.variant,
        "dims": bundle.dims.to_dict(),
        "params": {"theta1": _arr(p.theta1), "theta2": _arr(p.theta2),
                   "theta3": _arr(p.theta3), "omega": _arr(p.omega)},
        "norm": bundle.norm.to_dict(),
        "t_params": None,
        "codebook": None,
        "fusion": None,
        "training_meta": bundle.training_meta,
    }
    if bundle.t_params is not None:
        t = bundle.t_params
        out["t_params"] = {"mu": _arr(t.mu), "sigma": _arr(t.sigma), "nu": float(t.nu)}
    if bundle.codebook is not None:
        out["codebook"] = {"codewords": _arr(bundle.codebook.codewords)}
    if bundle.fusion is not None:
        out["fusion"] = {"gamma": _arr(bundle.fusion.gamma), "eta": float(bundle.fusion.eta)}
    return out


def _shaped(value, shape, name):
    a = np.asarray(value, dtype=float)
    if a.size == 0 and 0 in shape:
        return a.reshape(shape)
    if a.shape != shape:
        raise SchemaError(f"bundle field {name} has shape {a.shape}, expected {shape}")
    return a


def bundle_from_dict(d: dict) -> ModelBundle:
    if not isinstance(d, dict) or "format_version" not in d:
        raise SchemaError("bundle lacks a format_version")
    if d["format_version"] != FORMAT_VERSION:
        raise VersionError(
            f"bundle format version {d['format_version']} is not supported "
            f"(this library reads version {FORMAT_VERSION})")
    try:
        dims = FeatureDims(**d["dims"])
        L, H, mx, ms = dims.n_labels, dims.n_hidden, dims.m_x, dims.m_xstar
        pd = d["params"]
        params = ModelParams(_shaped(pd["theta1"], (L, H), "theta1"),
                             _shaped(pd["theta2"], (H, mx), "theta2"),
                             _shaped(pd["theta3"], (H, ms), "theta3"),
                             _shaped(pd["omega"], (L, H, H), "omega"))
        norm = NormStats.from_dict(d["norm"])
        t_params = None
        if d.get("t_params") is not None:
            t = d["t_params"]
            t_params = StudentTParams(t["mu"], t["sigma"], t["nu"])
        codebook = None
        if d.get("codebook") is not None:
            codebook = PrivCodebook(np.asarray(d["codebook"]["codewords"], dtype=float))
        fusion = None
        if d.get("fusion") is not None:
            fusion = FusionModel(np.asarray(d["fusion"]["gamma"], dtype=float),
                                 float(d["fusion"]["eta"]))
        variant = str(d["variant"])
        meta = d.get("training_meta") or {}
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError, InvalidInputError) as exc:
        raise SchemaError(f"corrupted bundle field: {exc!r}") from exc
    return ModelBundle(variant, params, norm, t_params, codebook, fusion, meta)


def save_bundle(bundle: ModelBundle, path) -> None:
    """Write ``bundle`` as JSON; floats use shortest round-trip decimals."""
    text = json.dumps(bundle_to_dict(bundle), indent=1, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_bundle(path) -> ModelBundle:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: unreadable bundle: {exc}") from exc
    return bundle_from_dict(d)


def mutual_information(a: Sequence[int], b: Sequence[int]) -> float:
    """Plug-in mutual information (nats) between two discrete sequences."""
    a = np.asarray(a)
    b = np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])))
