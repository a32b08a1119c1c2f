"""Scikit-learn style estimators wrapping the training and adaptation
pipeline, so the method composes with the wider ecosystem (get_params,
set_params, clone, pipelines).

`GPAClassifier.fit` learns the site-invariant ratio network plus per-site
prevalence networks from multi-site labeled data; `adapt` re-estimates the
prevalence for a new site from unlabeled samples before `predict`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .adapt import EmConfig, em_conditional_prevalence, em_marginal_prevalence
from .knockout import CategoricalSpec, ContinuousSpec, KnockoutCodec
from .models import PrevalenceModel, adjusted_posterior, ratio_probs
from .nets import mlp_forward, softmax
from .semdata import SiteDataset
from .train import (
    TrainConfig,
    fit_calibration,
    fit_erm,
    fit_ratio,
    fit_site_prevalence,
)


def infer_codec(z: np.ndarray, max_categories: int = 10) -> KnockoutCodec:
    """Build per-column encoding specs from pooled training confounders.

    Integer-valued columns with few distinct values become categorical;
    anything else is treated as continuous over its observed range.
    """
    zb = np.atleast_2d(np.asarray(z, dtype=float))
    specs = []
    for j in range(zb.shape[1]):
        col = zb[:, j]
        col = col[~np.isnan(col)]
        distinct = np.unique(col)
        if distinct.size <= max_categories and np.all(distinct == np.round(distinct)) and np.all(distinct >= 0):
            specs.append(CategoricalSpec(int(distinct.max()) + 1))
        else:
            specs.append(ContinuousSpec(float(col.min()), float(col.max())))
    return KnockoutCodec(specs)


def _as_z(z, n: int, n_vars: int | None = None) -> np.ndarray:
    if z is None:
        if n_vars is None:
            raise ValueError("confounders are required")
        return np.full((n, n_vars), np.nan)
    zb = np.asarray(z, dtype=float)
    if zb.ndim == 1:
        zb = zb[:, None]
    if zb.shape[0] != n:
        raise ValueError("confounders do not match the number of samples")
    return zb


class GPAClassifier(BaseEstimator, ClassifierMixin):
    """Prevalence-adjusted classifier for anti-causal multi-site data.

    Parameters follow the usual estimator conventions; `fit` additionally
    needs per-sample confounders and site labels, plus a labeled validation
    site for early stopping and calibration. Call `adapt` (unlabeled) or
    `adapt_direct` (labeled) for a new site before predicting.
    """

    def __init__(
        self,
        hidden=(100, 100),
        prevalence_hidden=(100, 100),
        epochs=50,
        batch_size=128,
        learning_rate=1e-3,
        knockout_rate=0.5,
        patience=10,
        em_iterations=5,
        em_m_step="lbfgs",
        calibrate=True,
        random_state=0,
    ):
        self.hidden = hidden
        self.prevalence_hidden = prevalence_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.knockout_rate = knockout_rate
        self.patience = patience
        self.em_iterations = em_iterations
        self.em_m_step = em_m_step
        self.calibrate = calibrate
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            knockout_rate=self.knockout_rate,
            patience=self.patience,
            hidden=tuple(self.hidden),
            prevalence_hidden=tuple(self.prevalence_hidden),
            n_classes=len(self.classes_),
            seed=self.random_state,
        )

    def _encode_labels(self, y) -> np.ndarray:
        return np.searchsorted(self.classes_, y)

    def fit(self, X, y, z=None, site=None, X_val=None, y_val=None, z_val=None):
        X, y = check_X_y(X, y)
        self.classes_ = np.unique(y)
        self.n_features_in_ = X.shape[1]
        y_idx = self._encode_labels(y)
        z = _as_z(z, X.shape[0])
        if site is None:
            site = np.zeros(X.shape[0], dtype=int)
        site = np.asarray(site)

        self.codec_ = infer_codec(z)
        cfg = self._train_config()
        sites = [
            SiteDataset(str(s), X[site == s], y_idx[site == s], z[site == s])
            for s in np.unique(site)
        ]
        self.prevalences_ = {
            ds.site_id: fit_site_prevalence(ds, self.codec_, cfg) for ds in sites
        }

        val = val_prev = None
        if X_val is not None:
            X_val, y_val = check_X_y(X_val, y_val)
            val = SiteDataset(
                "validation", X_val, self._encode_labels(y_val), _as_z(z_val, X_val.shape[0], self.codec_.n_vars)
            )
            val_prev = fit_site_prevalence(val, self.codec_, cfg)
        self.val_prevalence_ = val_prev

        self.ratio_ = fit_ratio(
            sites, self.prevalences_, self.codec_, cfg, val=val, val_prevalence=val_prev
        )
        if self.calibrate and val is not None:
            self.ratio_.calibration = fit_calibration(self.ratio_, val, val_prev)
        self._target = None
        return self

    def _em_config(self) -> EmConfig:
        return EmConfig(
            iterations=self.em_iterations,
            m_step=self.em_m_step,
            g_hidden=tuple(self.prevalence_hidden),
            n_classes=len(self.classes_),
            seed=self.random_state,
        )

    def adapt(self, X, z=None):
        """Estimate the target site's prevalence from unlabeled samples.

        With confounders the conditional prevalence is estimated; without
        them the marginal is estimated through the knockout placeholder.
        """
        check_is_fitted(self, "ratio_")
        X = check_array(X)
        ds = SiteDataset("target", X, np.full(X.shape[0], -1), _as_z(z, X.shape[0], self.codec_.n_vars))
        if z is None or np.all(np.isnan(ds.z)):
            marginal, trace = em_marginal_prevalence(ds, self.ratio_, self.codec_, self._em_config())
            self._target = ("marginal", marginal)
        else:
            model, trace = em_conditional_prevalence(ds, self.ratio_, self.codec_, self._em_config())
            self._target = ("conditional", model)
        self.em_trace_ = trace
        return self

    def adapt_direct(self, y, z):
        """Fit the target prevalence from labeled (y, z) pairs directly."""
        check_is_fitted(self, "ratio_")
        y = np.asarray(y)
        z = _as_z(z, y.shape[0])
        ds = SiteDataset("target", np.zeros((y.shape[0], 1)), self._encode_labels(y), z)
        self._target = ("conditional", fit_site_prevalence(ds, self.codec_, self._train_config()))
        return self

    def set_target_prevalence(self, model: PrevalenceModel):
        """Install an externally estimated target prevalence model."""
        check_is_fitted(self, "ratio_")
        self._target = ("conditional", model)
        return self

    def predict_proba(self, X, z=None):
        check_is_fitted(self, "ratio_")
        if getattr(self, "_target", None) is None:
            raise RuntimeError("adapt the classifier to the target site before predicting")
        X = check_array(X)
        mode, target = self._target
        if mode == "marginal":
            zb = self.codec_.placeholder_rows(X.shape[0])
            g_rows = np.tile(target, (X.shape[0], 1))
        else:
            zb = _as_z(z, X.shape[0], self.codec_.n_vars)
            g_rows = target.predict_proba(zb)
        return adjusted_posterior(ratio_probs(self.ratio_, X, zb), g_rows)

    def predict(self, X, z=None):
        probs = self.predict_proba(X, z)
        return self.classes_[np.argmax(probs, axis=1)]


class ERMClassifier(BaseEstimator, ClassifierMixin):
    """Plain cross-entropy MLP baseline, optionally taking confounders as
    extra input columns (encoded with the same knockout codec)."""

    def __init__(
        self,
        use_z=False,
        hidden=(100, 100),
        epochs=50,
        batch_size=128,
        learning_rate=1e-3,
        patience=10,
        random_state=0,
    ):
        self.use_z = use_z
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.patience = patience
        self.random_state = random_state

    def fit(self, X, y, z=None, X_val=None, y_val=None, z_val=None):
        X, y = check_X_y(X, y)
        self.classes_ = np.unique(y)
        self.n_features_in_ = X.shape[1]
        y_idx = np.searchsorted(self.classes_, y)
        cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            knockout_rate=0.0,
            patience=self.patience,
            hidden=tuple(self.hidden),
            n_classes=len(self.classes_),
            seed=self.random_state,
        )
        self.codec_ = None
        z_arr = None
        if self.use_z:
            z_arr = _as_z(z, X.shape[0])
            self.codec_ = infer_codec(z_arr)
        ds = SiteDataset("train", X, y_idx, z_arr if z_arr is not None else np.zeros((X.shape[0], 1)))
        val = None
        if X_val is not None:
            X_val, y_val = check_X_y(X_val, y_val)
            zv = _as_z(z_val, X_val.shape[0], self.codec_.n_vars) if self.use_z else np.zeros((X_val.shape[0], 1))
            val = SiteDataset("val", X_val, np.searchsorted(self.classes_, y_val), zv)
        self.params_ = fit_erm([ds], cfg, use_z=self.use_z, codec=self.codec_, val=val)
        return self

    def _inputs(self, X, z):
        X = check_array(X)
        if self.use_z:
            zb = _as_z(z, X.shape[0], self.codec_.n_vars)
            return np.concatenate([X, self.codec_.encode(zb)], axis=1)
        return X

    def predict_proba(self, X, z=None):
        check_is_fitted(self, "params_")
        return softmax(mlp_forward(self.params_, self._inputs(X, z)))

    def predict(self, X, z=None):
        probs = self.predict_proba(X, z)
        return self.classes_[np.argmax(probs, axis=1)]
