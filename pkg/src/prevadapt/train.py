"""Training pipeline: per-site prevalence models, the shared ratio model
trained against frozen prevalences, vector-scaling calibration on held-out
data, and plain cross-entropy baselines.

All fits are deterministic given (config, seed). Knockout corruption is
resampled every epoch so the networks see both observed and missing
confounders.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .knockout import KnockoutCodec, knockout_corrupt
from .models import (
    CalibrationParams,
    PrevalenceModel,
    RatioModel,
    adjusted_posterior,
    apply_calibration,
)
from .nets import (
    LOG_CLAMP,
    AdamOptimizer,
    LossSpec,
    MLPParams,
    backward,
    init_mlp,
    lbfgs_minimize,
    mlp_forward,
    nll_loss,
    softmax,
)
from .semdata import SiteDataset


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    knockout_rate: float = 0.5
    patience: int = 10
    hidden: tuple[int, ...] = (100, 100)
    prevalence_hidden: tuple[int, ...] = (100, 100)
    n_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be at least 1")


@dataclass
class FittedModels:
    """Everything the pipeline produces for one seed."""

    ratio: RatioModel
    prevalences: dict[str, PrevalenceModel]
    codec: KnockoutCodec
    baselines: dict[str, MLPParams] = field(default_factory=dict)
    val_prevalence: PrevalenceModel | None = None


def f1_score(predictions: np.ndarray, truth: np.ndarray, positive: int = 1) -> float:
    """2TP / (2TP + FP + FN); 0 when the denominator is 0."""
    pred = np.asarray(predictions)
    true = np.asarray(truth)
    if pred.shape != true.shape:
        raise ValueError("predictions and truth must have equal length")
    if pred.size == 0:
        raise ValueError("f1_score of an empty batch")
    tp = np.sum((pred == positive) & (true == positive))
    fp = np.sum((pred == positive) & (true != positive))
    fn = np.sum((pred != positive) & (true == positive))
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom > 0 else 0.0


def _rng(seed: int, tag: str) -> np.random.Generator:
    import zlib

    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(tag.encode())]))


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _log_probs(probs: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(probs, LOG_CLAMP))


def fit_site_prevalence(
    site: SiteDataset,
    codec: KnockoutCodec,
    cfg: TrainConfig,
    history: list | None = None,
) -> PrevalenceModel:
    """Fit one site's prevalence network on its labeled (y, z) pairs, with
    knockout so the placeholder input learns the site marginal."""
    labeled = site.labeled
    if not np.any(labeled):
        raise ValueError(f"site {site.site_id!r} has no labels to fit a prevalence model")
    y = site.y[labeled]
    z = site.z[labeled]
    if np.unique(y).size < 2:
        warnings.warn(f"site {site.site_id!r} contains a single class; prevalence model is degenerate")

    rng = _rng(cfg.seed, f"prevalence:{site.site_id}")
    dims = [codec.encoded_dim, *cfg.prevalence_hidden, cfg.n_classes]
    params = init_mlp(dims, rng)
    opt = AdamOptimizer(lr=cfg.learning_rate)
    for epoch in range(cfg.epochs):
        z_corrupt = knockout_corrupt(z, cfg.knockout_rate, rng)
        enc = codec.encode(z_corrupt)
        losses = []
        for idx in _minibatches(len(y), cfg.batch_size, rng):
            loss, grads = backward(params, enc[idx], LossSpec(targets=y[idx]))
            opt.step(params, grads)
            losses.append(loss)
        if history is not None:
            history.append((f"prevalence:{site.site_id}", epoch, "train", float(np.mean(losses)), float("nan")))
    return PrevalenceModel(params, codec, site_id=site.site_id)


def _ratio_val_metrics(
    params: MLPParams,
    codec: KnockoutCodec,
    val: SiteDataset,
    val_prevalence: PrevalenceModel,
) -> tuple[float, float]:
    model = RatioModel(params, codec)
    post = adjusted_posterior(model.predict_proba(val.x, val.z), val_prevalence.predict_proba(val.z))
    return nll_loss(post, val.y), f1_score(np.argmax(post, axis=1), val.y)


def fit_ratio(
    sites: list[SiteDataset],
    prevalences: dict[str, PrevalenceModel],
    codec: KnockoutCodec,
    cfg: TrainConfig,
    val: SiteDataset | None = None,
    val_prevalence: PrevalenceModel | None = None,
    history: list | None = None,
) -> RatioModel:
    """Fit the shared ratio network on pooled sites with every site's
    prevalence model frozen.

    Each epoch draws fresh knockout masks; the corrupted confounders feed
    both the ratio input and the (constant) log-prevalence offset, so the
    placeholder path is trained against each site's marginal. Early stopping
    tracks validation F1 when a validation site is provided.
    """
    for s in sites:
        if s.site_id not in prevalences:
            raise ValueError(f"missing prevalence model for site {s.site_id!r}")
    x = np.concatenate([s.x for s in sites])
    y = np.concatenate([s.y for s in sites])
    z = np.concatenate([s.z for s in sites])
    site_of = np.concatenate([np.full(s.n, i) for i, s in enumerate(sites)])
    if np.any(y < 0):
        raise ValueError("ratio fitting needs labels at every training site")

    rng = _rng(cfg.seed, "ratio")
    dims = [x.shape[1] + codec.encoded_dim, *cfg.hidden, cfg.n_classes]
    params = init_mlp(dims, rng)
    opt = AdamOptimizer(lr=cfg.learning_rate)

    best = params.copy()
    best_f1 = -np.inf
    since_best = 0
    for epoch in range(cfg.epochs):
        z_corrupt = knockout_corrupt(z, cfg.knockout_rate, rng)
        offsets = np.empty((len(y), cfg.n_classes))
        for i, s in enumerate(sites):
            rows = site_of == i
            offsets[rows] = _log_probs(prevalences[s.site_id].predict_proba(z_corrupt[rows]))
        inputs = np.concatenate([x, codec.encode(z_corrupt)], axis=1)
        losses = []
        for idx in _minibatches(len(y), cfg.batch_size, rng):
            loss, grads = backward(
                params, inputs[idx], LossSpec(targets=y[idx], logit_offset=offsets[idx])
            )
            opt.step(params, grads)
            losses.append(loss)
        if history is not None:
            history.append(("ratio", epoch, "train", float(np.mean(losses)), float("nan")))
        if val is not None and val_prevalence is not None:
            val_nll, val_f1 = _ratio_val_metrics(params, codec, val, val_prevalence)
            if history is not None:
                history.append(("ratio", epoch, "val", val_nll, val_f1))
            if val_f1 > best_f1:
                best_f1 = val_f1
                best = params.copy()
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
        else:
            best = params
    return RatioModel(best, codec)


def calibration_nll(
    ratio: RatioModel,
    calib: CalibrationParams | None,
    val: SiteDataset,
    val_prevalence: PrevalenceModel,
) -> float:
    """Validation NLL of the adjusted posterior under a given calibration."""
    logits = apply_calibration(ratio.raw_logits(val.x, val.z), calib)
    post = adjusted_posterior(softmax(logits), val_prevalence.predict_proba(val.z))
    return nll_loss(post, val.y)


def fit_calibration(
    ratio: RatioModel,
    val: SiteDataset,
    val_prevalence: PrevalenceModel,
) -> CalibrationParams:
    """Vector scaling: fit a per-class affine map of the ratio logits by
    minimizing validation NLL of the adjusted posterior, from identity init.

    Only decreasing steps are accepted, so the result is never worse than
    the identity calibration.
    """
    if val.n == 0:
        raise ValueError("empty validation set")
    k = ratio.params.out_dim
    logits = ratio.raw_logits(val.x, val.z)
    g_log = _log_probs(val_prevalence.predict_proba(val.z))
    y = val.y
    onehot = np.zeros((val.n, k))
    onehot[np.arange(val.n), y] = 1.0

    def objective(v: np.ndarray) -> tuple[float, np.ndarray]:
        scale, bias = v[:k], v[k:]
        # adjusted posterior == softmax of calibrated logits plus log-prevalence
        shifted = logits * scale + bias + g_log
        shifted = shifted - shifted.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        f = float(-np.mean(np.sum(onehot * _log_probs(p), axis=1)))
        delta = (p - onehot) / val.n
        return f, np.concatenate([np.sum(delta * logits, axis=0), np.sum(delta, axis=0)])

    init = np.concatenate([np.ones(k), np.zeros(k)])
    res = lbfgs_minimize(objective, init, max_iter=200)
    return CalibrationParams(res.x[:k], res.x[k:])


def fit_erm(
    sites: list[SiteDataset],
    cfg: TrainConfig,
    use_z: bool = False,
    codec: KnockoutCodec | None = None,
    val: SiteDataset | None = None,
    history: list | None = None,
    name: str = "erm",
) -> MLPParams:
    """Single cross-entropy network over pooled training data, ignoring
    site identity; with use_z the encoded confounders join the input."""
    if use_z and codec is None:
        raise ValueError("use_z requires a codec")
    x = np.concatenate([s.x for s in sites])
    y = np.concatenate([s.y for s in sites])
    if np.any(y < 0):
        raise ValueError("baseline fitting needs labeled data")
    if use_z:
        z = np.concatenate([s.z for s in sites])
        x = np.concatenate([x, codec.encode(z)], axis=1)

    rng = _rng(cfg.seed, name)
    params = init_mlp([x.shape[1], *cfg.hidden, cfg.n_classes], rng)
    opt = AdamOptimizer(lr=cfg.learning_rate)
    best = params.copy()
    best_f1 = -np.inf
    since_best = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _minibatches(len(y), cfg.batch_size, rng):
            loss, grads = backward(params, x[idx], LossSpec(targets=y[idx]))
            opt.step(params, grads)
            losses.append(loss)
        if history is not None:
            history.append((name, epoch, "train", float(np.mean(losses)), float("nan")))
        if val is not None:
            xv = val.x
            if use_z:
                xv = np.concatenate([xv, codec.encode(val.z)], axis=1)
            probs = softmax(mlp_forward(params, xv))
            val_f1 = f1_score(np.argmax(probs, axis=1), val.y)
            if history is not None:
                history.append((name, epoch, "val", nll_loss(probs, val.y), val_f1))
            if val_f1 > best_f1:
                best_f1 = val_f1
                best = params.copy()
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
        else:
            best = params
    return best


def fit_pipeline(
    train_sites: list[SiteDataset],
    val: SiteDataset,
    codec: KnockoutCodec,
    cfg: TrainConfig,
    baselines: tuple[str, ...] = (),
    history: list | None = None,
) -> FittedModels:
    """Run the full training recipe: per-site prevalences, the ratio model
    with early stopping, then calibration on the validation site."""
    prevalences = {
        s.site_id: fit_site_prevalence(s, codec, cfg, history=history) for s in train_sites
    }
    val_prev = fit_site_prevalence(val, codec, cfg, history=history)
    ratio = fit_ratio(
        train_sites, prevalences, codec, cfg, val=val, val_prevalence=val_prev, history=history
    )
    ratio.calibration = fit_calibration(ratio, val, val_prev)
    fitted = FittedModels(ratio=ratio, prevalences=prevalences, codec=codec, val_prevalence=val_prev)
    if "ERM" in baselines:
        fitted.baselines["ERM"] = fit_erm(train_sites, cfg, use_z=False, val=val, history=history, name="erm")
    if "ERM_Z" in baselines:
        fitted.baselines["ERM_Z"] = fit_erm(
            train_sites, cfg, use_z=True, codec=codec, val=val, history=history, name="erm_z"
        )
    return fitted
