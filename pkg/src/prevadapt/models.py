"""The two-part model: a site-invariant ratio network over (x, z) and
per-site prevalence networks over z, combined by renormalized elementwise
product, with optional vector-scaling calibration of the ratio logits."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .knockout import KnockoutCodec
from .nets import ConfigurationError, MLPParams, mlp_forward, softmax


@dataclass
class CalibrationParams:
    """Per-class affine transform of ratio logits: scale * logits + bias."""

    scale: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if not (np.all(np.isfinite(self.scale)) and np.all(np.isfinite(self.bias))):
            raise ConfigurationError("calibration parameters must be finite")

    @staticmethod
    def identity(n_classes: int) -> "CalibrationParams":
        return CalibrationParams(np.ones(n_classes), np.zeros(n_classes))


def apply_calibration(logits: np.ndarray, calib: CalibrationParams | None) -> np.ndarray:
    if calib is None:
        return np.asarray(logits, dtype=float)
    return np.asarray(logits, dtype=float) * calib.scale + calib.bias


def adjusted_posterior(f_out: np.ndarray, g_out: np.ndarray) -> np.ndarray:
    """Renormalized elementwise product of prevalence and ratio outputs.

    Invariant to positive rescaling of f_out. Raises if the product
    vanishes everywhere (the combination is then undefined).
    """
    f = np.atleast_2d(np.asarray(f_out, dtype=float))
    g = np.atleast_2d(np.asarray(g_out, dtype=float))
    prod = f * g
    tot = prod.sum(axis=1, keepdims=True)
    if np.any(tot <= 0.0):
        raise ValueError("adjusted posterior undefined: product of model outputs is all zero")
    post = prod / tot
    return post[0] if np.asarray(f_out).ndim == 1 else post


@dataclass
class PrevalenceModel:
    """Estimator of one site's P(Y | Z), evaluated on encoded confounders."""

    params: MLPParams
    codec: KnockoutCodec
    site_id: str = ""

    def logits(self, z: np.ndarray) -> np.ndarray:
        return mlp_forward(self.params, self.codec.encode(z))

    def predict_proba(self, z: np.ndarray) -> np.ndarray:
        return softmax(self.logits(z))

    def marginal(self) -> np.ndarray:
        """Output at the all-missing placeholder: the site's P(Y)."""
        return self.predict_proba(self.codec.placeholder_rows(1))[0]


@dataclass
class RatioModel:
    """Site-invariant ratio network over concatenated (x, encoded z)."""

    params: MLPParams
    codec: KnockoutCodec
    calibration: CalibrationParams | None = None

    def raw_logits(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        return mlp_forward(self.params, np.concatenate([xb, self.codec.encode(z)], axis=1))

    def logits(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Calibrated logits; identity when no calibration is fitted."""
        return apply_calibration(self.raw_logits(x, z), self.calibration)

    def predict_proba(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        return softmax(self.logits(x, z))


def ratio_probs(ratio, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Ratio outputs as probabilities; accepts a RatioModel or a callable
    (x, z) -> probs so exact table-based ratios can stand in for the net."""
    if callable(ratio) and not isinstance(ratio, RatioModel):
        return np.asarray(ratio(x, z), dtype=float)
    return ratio.predict_proba(x, z)


def predict(
    x: np.ndarray,
    z: np.ndarray | None,
    ratio: RatioModel,
    prevalence: PrevalenceModel,
    calibration: CalibrationParams | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Adjusted-posterior prediction; ties resolve to the lowest class index.

    z may be None (all confounders treated as missing), or contain NaN for
    per-entry missingness; the placeholder encoding is used for both the
    ratio and prevalence inputs.
    """
    xb = np.atleast_2d(np.asarray(x, dtype=float))
    if z is None:
        zb = ratio.codec.placeholder_rows(xb.shape[0])
    else:
        zb = np.atleast_2d(np.asarray(z, dtype=float))
    logits = ratio.raw_logits(xb, zb)
    logits = apply_calibration(logits, calibration if calibration is not None else ratio.calibration)
    post = adjusted_posterior(softmax(logits), prevalence.predict_proba(zb))
    post = np.atleast_2d(post)
    return np.argmax(post, axis=1), post


def _params_to_dict(params: MLPParams) -> dict:
    return {
        "dims": [params.in_dim] + [w.shape[1] for w in params.weights],
        "flat": params.to_flat().tolist(),
    }


def _params_from_dict(d: dict) -> MLPParams:
    dims = d["dims"]
    zeros = MLPParams(
        [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])],
        [np.zeros(b) for b in dims[1:]],
    )
    return zeros.from_flat(np.asarray(d["flat"], dtype=float))


def save_checkpoint(
    path,
    codec: KnockoutCodec,
    ratio: RatioModel | None = None,
    prevalences: dict[str, PrevalenceModel] | None = None,
    baselines: dict[str, MLPParams] | None = None,
    manifest_hash: str = "",
) -> None:
    """Serialize fitted models to a JSON checkpoint."""
    payload = {
        "codec": codec.to_dict(),
        "manifest_hash": manifest_hash,
        "ratio": None,
        "calibration": None,
        "prevalences": {},
        "baselines": {},
    }
    if ratio is not None:
        payload["ratio"] = _params_to_dict(ratio.params)
        if ratio.calibration is not None:
            payload["calibration"] = {
                "scale": ratio.calibration.scale.tolist(),
                "bias": ratio.calibration.bias.tolist(),
            }
    for name, pm in (prevalences or {}).items():
        payload["prevalences"][name] = _params_to_dict(pm.params)
    for name, params in (baselines or {}).items():
        payload["baselines"][name] = _params_to_dict(params)
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> dict:
    """Load a checkpoint back into model objects."""
    with open(path) as fh:
        payload = json.load(fh)
    codec = KnockoutCodec.from_dict(payload["codec"])
    out = {
        "codec": codec,
        "manifest_hash": payload["manifest_hash"],
        "ratio": None,
        "prevalences": {},
        "baselines": {},
    }
    if payload["ratio"] is not None:
        calib = None
        if payload["calibration"] is not None:
            calib = CalibrationParams(
                np.asarray(payload["calibration"]["scale"]),
                np.asarray(payload["calibration"]["bias"]),
            )
        out["ratio"] = RatioModel(_params_from_dict(payload["ratio"]), codec, calib)
    for name, d in payload["prevalences"].items():
        out["prevalences"][name] = PrevalenceModel(_params_from_dict(d), codec, site_id=name)
    for name, d in payload["baselines"].items():
        out["baselines"][name] = _params_from_dict(d)
    return out


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]
