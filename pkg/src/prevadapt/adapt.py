"""Test-time adaptation to a new site from unlabeled data.

The new site's prevalence network is estimated by expectation-maximization:
the e-step forms responsibilities by combining the frozen, calibrated ratio
model with the current prevalence estimate; the m-step refits the prevalence
network against those responsibilities. With the LBFGS m-step each iteration
fully maximizes the expected complete-data log-likelihood (standard EM); a
single-gradient-step mode gives the generalized-EM variant. When confounders
are missing entirely, the same loop runs at the knockout placeholder and
yields the site's marginal label distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .knockout import ContinuousSpec, KnockoutCodec
from .models import PrevalenceModel, ratio_probs
from .nets import (
    LOG_CLAMP,
    LossSpec,
    MLPParams,
    NumericsError,
    SgdOptimizer,
    backward,
    init_mlp,
    lbfgs_minimize_params,
    mlp_forward,
    softmax,
)
from .semdata import SiteDataset
from .train import TrainConfig, fit_site_prevalence


@dataclass
class EmConfig:
    iterations: int = 5
    m_step: str = "lbfgs"  # "lbfgs" fully maximizes; "sgd" takes one step
    sgd_lr: float = 0.1
    lbfgs_max_iter: int = 100
    lbfgs_grad_tol: float = 1e-7
    g_hidden: tuple[int, ...] = (100, 100)
    n_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one EM iteration")
        if self.m_step not in ("lbfgs", "sgd"):
            raise ValueError(f"unknown m-step mode {self.m_step!r}")


@dataclass
class EmTrace:
    """Surrogate log-likelihood and prevalence-network snapshots per
    iteration, including the initial state (length iterations + 1)."""

    surrogate: list[float] = field(default_factory=list)
    param_snapshots: list[np.ndarray] = field(default_factory=list)
    prevalence_snapshots: list[np.ndarray] = field(default_factory=list)
    unique_z: np.ndarray | None = None

    def save_csv(self, path) -> None:
        import csv

        n_z, k = self.prevalence_snapshots[0].shape
        header = ["iteration", "surrogate_loglik"]
        header += [f"p_y{i}_z{j}" for j in range(n_z) for i in range(k)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for t, (s, p) in enumerate(zip(self.surrogate, self.prevalence_snapshots)):
                writer.writerow([t, repr(float(s))] + [repr(float(v)) for v in p.ravel()])


def _surrogate_value(g_rows: np.ndarray, f_rows: np.ndarray) -> float:
    mass = np.sum(g_rows * f_rows, axis=1)
    return float(np.sum(np.log(np.maximum(mass, LOG_CLAMP))))


def surrogate_loglik(ds: SiteDataset, ratio, g) -> float:
    """Sum over samples of log sum_y g(z)_y * f(x, z)_y, the marginal
    log-likelihood surrogate tracked across EM iterations."""
    f_rows = ratio_probs(ratio, ds.x, ds.z)
    g_rows = g.predict_proba(ds.z) if hasattr(g, "predict_proba") else np.asarray(g(ds.z))
    return _surrogate_value(g_rows, f_rows)


def _em_loop(
    x: np.ndarray,
    z: np.ndarray,
    ratio,
    codec: KnockoutCodec,
    cfg: EmConfig,
    init_params: MLPParams | None = None,
) -> tuple[MLPParams, EmTrace]:
    f_rows = ratio_probs(ratio, x, z)
    # deduplicate on encoded rows: encoding maps missing entries to the
    # placeholder, so NaN rows collapse correctly
    enc_all = codec.encode(z)
    enc_unique, first, inv = np.unique(enc_all, axis=0, return_index=True, return_inverse=True)
    unique_z = np.atleast_2d(np.asarray(z, dtype=float))[first]

    if init_params is not None:
        params = init_params.copy()
    else:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE60]))
        params = init_mlp([codec.encoded_dim, *cfg.g_hidden, cfg.n_classes], rng)

    def g_unique(p: MLPParams) -> np.ndarray:
        return softmax(mlp_forward(p, enc_unique))

    trace = EmTrace(unique_z=unique_z)

    def record(p: MLPParams) -> None:
        gu = g_unique(p)
        trace.surrogate.append(_surrogate_value(gu[inv], f_rows))
        trace.param_snapshots.append(p.to_flat())
        trace.prevalence_snapshots.append(gu)

    record(params)
    for _ in range(cfg.iterations):
        # e-step: responsibilities under the current estimate, held fixed
        weighted = g_unique(params)[inv] * f_rows
        tot = weighted.sum(axis=1, keepdims=True)
        bad = ~np.isfinite(tot.ravel()) | (tot.ravel() <= 0.0)
        if np.any(bad):
            raise NumericsError(f"degenerate responsibility at sample index {int(np.argmax(bad))}")
        resp = weighted / tot

        # aggregate responsibilities per unique confounder row; maximizing
        # the expected log-likelihood only needs these sufficient statistics
        counts = np.zeros((unique_z.shape[0], cfg.n_classes))
        np.add.at(counts, inv, resp)
        row_mass = counts.sum(axis=1)
        targets = counts / row_mass[:, None]

        spec = LossSpec(targets=targets, weights=row_mass)
        if cfg.m_step == "lbfgs":
            params, _ = lbfgs_minimize_params(
                lambda p: backward(p, enc_unique, spec),
                params,
                max_iter=cfg.lbfgs_max_iter,
                grad_tol=cfg.lbfgs_grad_tol,
            )
        else:
            _, grads = backward(params, enc_unique, spec)
            SgdOptimizer(lr=cfg.sgd_lr).step(params, grads)
        record(params)
    return params, trace


def em_conditional_prevalence(
    unlabeled: SiteDataset,
    ratio,
    codec: KnockoutCodec,
    cfg: EmConfig,
    warm_start: PrevalenceModel | MLPParams | None = None,
) -> tuple[PrevalenceModel, EmTrace]:
    """Estimate the new site's P(Y | Z) from unlabeled (x, z) pairs.

    The ratio model is read-only. By default a fresh prevalence network is
    initialized randomly; pass `warm_start` (for instance a training site's
    model) to start from existing parameters instead.
    """
    if np.any(np.isnan(unlabeled.z)):
        raise ValueError("conditional-prevalence EM needs observed confounders on every sample")
    init = warm_start.params if isinstance(warm_start, PrevalenceModel) else warm_start
    params, trace = _em_loop(unlabeled.x, unlabeled.z, ratio, codec, cfg, init_params=init)
    return PrevalenceModel(params, codec, site_id=unlabeled.site_id), trace


def em_marginal_prevalence(
    unlabeled: SiteDataset,
    ratio,
    codec: KnockoutCodec,
    cfg: EmConfig,
    warm_start: PrevalenceModel | MLPParams | None = None,
) -> tuple[np.ndarray, EmTrace]:
    """Estimate the new site's marginal P(Y) from x alone by running the EM
    loop at the knockout placeholder."""
    z0 = codec.placeholder_rows(unlabeled.n)
    init = warm_start.params if isinstance(warm_start, PrevalenceModel) else warm_start
    params, trace = _em_loop(unlabeled.x, z0, ratio, codec, cfg, init_params=init)
    p_hat = softmax(mlp_forward(params, codec.encode(codec.placeholder_rows(1))))[0]
    return p_hat, trace


def copa_direct(
    labeled_test: SiteDataset,
    codec: KnockoutCodec,
    cfg: TrainConfig,
) -> PrevalenceModel:
    """Upper-bound baseline: fit the test site's prevalence network directly
    from its labeled (y, z) pairs, exactly as for a training site."""
    return fit_site_prevalence(labeled_test, codec, cfg)


def enumerate_z_support(codec: KnockoutCodec) -> np.ndarray:
    """All raw confounder tuples for fully categorical codecs."""
    grids = []
    for spec in codec.specs:
        if isinstance(spec, ContinuousSpec):
            raise ValueError("Monte-Carlo marginalization is unsupported for continuous confounders")
        grids.append(np.arange(spec.cardinality, dtype=float))
    mesh = np.meshgrid(*grids, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def copa_star_mc(
    x: np.ndarray,
    ratio,
    marginal: np.ndarray,
    z_support: np.ndarray,
) -> np.ndarray:
    """Predict without confounders by averaging the adjusted posterior over
    an enumerated confounder support, using a marginal label prior."""
    xb = np.atleast_2d(np.asarray(x, dtype=float))
    support = np.atleast_2d(np.asarray(z_support, dtype=float))
    if support.shape[0] == 0:
        raise ValueError("empty confounder support")
    p_y = np.asarray(marginal, dtype=float)
    acc = np.zeros((xb.shape[0], p_y.shape[0]))
    for zrow in support:
        f_rows = ratio_probs(ratio, xb, np.tile(zrow, (xb.shape[0], 1)))
        weighted = f_rows * p_y
        acc += weighted / weighted.sum(axis=1, keepdims=True)
    return acc / acc.sum(axis=1, keepdims=True)
