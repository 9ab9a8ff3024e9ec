"""End-to-end training and prediction for every model variant.

Training fits, in order: normalisation, optional fusion, the joint Student t
and the privileged codebook (privileged variants only), then the weights.
Every statistic is fitted on the data passed in, so callers control leakage
by what they pass.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .data import Dataset, ModelBundle, normalize_apply, normalize_fit
from .errors import ConfigurationError, SchemaError
from .fusion import fit_fusion, predict_privileged, select_eta_cv
from .inference import predict_batch
from .model import SequenceSample
from .robust import build_codebook, fit_joint_t_em
from .train_ml import MlConfig, train_ml
from .train_mm import MmConfig, train_mm

log = logging.getLogger(__name__)

VARIANTS = ("ml-hcrf+", "aml-hcrf+", "mm-hcrf+", "amm-hcrf+", "hcrf-regular",
            "hcrf-privileged-as-regular")
LUPI_VARIANTS = VARIANTS[:4]


@dataclass(frozen=True)
class TrainSettings:
    variant: str = "ml-hcrf+"
    n_hidden: int = 5
    sigma: float = 1.0
    max_iters: int = 400
    codebook_k: int = 256
    nu: Optional[float] = None
    fusion: bool = False
    seed: int = 0
    grad_tol: float = 1e-5
    bundle_size: int = 20
    em_max_iters: int = 500

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(
                f"unknown variant {self.variant!r}; choose one of {', '.join(VARIANTS)}")
        if self.n_hidden < 1:
            raise ConfigurationError("n_hidden must be at least 1")
        if not self.sigma > 0:
            raise ConfigurationError("sigma must be positive")
        if self.codebook_k < 1:
            raise ConfigurationError("codebook size must be at least 1")

    @property
    def lupi(self) -> bool:
        return self.variant in LUPI_VARIANTS


def model_view(dataset: Dataset, variant: str) -> Dataset:
    """Arrange a normalised dataset's channels the way ``variant`` consumes them."""
    if variant in LUPI_VARIANTS:
        return dataset
    if variant == "hcrf-regular":
        return dataset.without_privileged()
    if not dataset.fully_privileged:
        raise ConfigurationError(
            "hcrf-privileged-as-regular needs the privileged channel for every sample")
    return dataset.replace_samples(
        SequenceSample(s.id, np.hstack([s.frames, s.privileged]), s.label, None)
        for s in dataset.samples)


def _fill_with_fusion(ds: Dataset, seed: int):
    with_priv = [s for s in ds.samples if s.privileged is not None]
    if not with_priv:
        raise ConfigurationError("fusion needs some samples with a privileged channel")
    X = np.concatenate([s.frames for s in with_priv])
    XS = np.concatenate([s.privileged for s in with_priv])
    eta = select_eta_cv(X, XS, folds=min(5, X.shape[0]), seed=seed)
    model = fit_fusion(X, XS, eta)
    filled = ds.replace_samples(
        s if s.privileged is not None else s.with_privileged(predict_privileged(model, s.frames))
        for s in ds.samples)
    return filled, model


def fit_privileged_model(ds: Dataset, settings: TrainSettings):
    """Joint Student t over stacked (privileged, regular) frames, and the codebook."""
    joint_frames = np.concatenate([np.hstack([s.privileged, s.frames]) for s in ds.samples])
    t_params = fit_joint_t_em(joint_frames, max_iters=settings.em_max_iters, nu=settings.nu)
    priv = np.concatenate([s.privileged for s in ds.samples])
    distinct = np.unique(priv, axis=0).shape[0]
    k = min(settings.codebook_k, distinct)
    if k < settings.codebook_k:
        log.warning("codebook size reduced from %d to %d distinct privileged frames",
                    settings.codebook_k, k)
    return t_params, build_codebook(priv, k, settings.seed)


def fit_pipeline(train: Dataset, settings: TrainSettings) -> ModelBundle:
    if settings.variant != "hcrf-regular" and train.m_xstar == 0:
        raise ConfigurationError(f"variant {settings.variant} needs a privileged channel")
    if settings.variant != "hcrf-regular" and not train.fully_privileged and not settings.fusion:
        raise ConfigurationError(
            "some training samples lack the privileged channel; enable fusion to fill them")
    norm = normalize_fit(train)
    ds = normalize_apply(train, norm)
    fusion = None
    if settings.fusion and settings.variant != "hcrf-regular":
        ds, fusion = _fill_with_fusion(ds, settings.seed)
    t_params = codebook = None
    if settings.lupi:
        t_params, codebook = fit_privileged_model(ds, settings)
    view = model_view(ds, settings.variant)
    dims = view.dims(settings.n_hidden)
    adaptive = settings.variant.startswith("a")
    if settings.variant.startswith(("mm", "amm")):
        config = MmConfig(sigma=settings.sigma, lambda_mode="adaptive" if adaptive else "fixed",
                          max_iters=settings.max_iters, bundle_size=settings.bundle_size,
                          seed=settings.seed)
        params, report = train_mm(view, dims, config)
    else:
        config = MlConfig(sigma=settings.sigma, lambda_mode="adaptive" if adaptive else "fixed",
                          max_iters=settings.max_iters, grad_tol=settings.grad_tol,
                          seed=settings.seed)
        params, report = train_ml(view, dims, config)
    meta = {
        "settings": asdict(settings),
        "trainer_config": {k: v for k, v in asdict(config).items() if k != "lambdas"},
        "seed": settings.seed,
        "n_train": len(train),
        "report": report.to_dict(),
    }
    return ModelBundle(settings.variant, params, norm, t_params, codebook, fusion, meta)


def _check_compatible(bundle: ModelBundle, ds: Dataset):
    if ds.m_x != bundle.norm.x_mean.size:
        raise SchemaError(
            f"dataset has {ds.m_x} regular dimensions, model was trained on "
            f"{bundle.norm.x_mean.size}")
    if ds.m_xstar and bundle.norm.xs_mean.size and ds.m_xstar != bundle.norm.xs_mean.size:
        raise SchemaError("dataset privileged dimension does not match the model")
    if np.any(ds.labels >= bundle.dims.n_labels):
        raise SchemaError("dataset contains labels unknown to the model")


def predict_with_bundle(bundle: ModelBundle, dataset: Dataset, mode: str = "codebook",
                        n_draws: int = 10_000, seed: int = 0, t_params=None):
    """Predicted labels and class log-posteriors for ``dataset``.

    Privileged variants never read the dataset's privileged channel; the
    ``hcrf-privileged-as-regular`` baseline requires it.  ``t_params``
    overrides the bundle's Student t (used for ablations).
    """
    _check_compatible(bundle, dataset)
    ds = normalize_apply(dataset, bundle.norm)
    if bundle.variant == "hcrf-privileged-as-regular":
        ds = model_view(ds, bundle.variant)
    else:
        ds = ds.without_privileged()
    return predict_batch(ds.samples, bundle.params,
                         t_params if t_params is not None else bundle.t_params,
                         bundle.codebook, mode, n_draws, seed)
