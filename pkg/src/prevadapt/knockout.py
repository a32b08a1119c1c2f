"""Confounder encoding with an out-of-support placeholder for missing values.

Categorical variables become one-hot vectors with one extra slot reserved for
"missing"; continuous variables are remapped onto [1, 2] with 0 as the
missing placeholder, so the placeholder always sits outside the encoded
support. Randomly knocking confounders out during training teaches the
networks to predict under missing inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import ConfigurationError


class DataError(ValueError):
    """Observed value outside the declared confounder support."""


@dataclass
class CategoricalSpec:
    cardinality: int

    def __post_init__(self):
        if self.cardinality < 2:
            raise ConfigurationError("categorical confounders need at least 2 values")

    @property
    def encoded_dim(self) -> int:
        # one slot per category plus the trailing missing-placeholder slot
        return self.cardinality + 1

    def encode_column(self, col: np.ndarray) -> np.ndarray:
        out = np.zeros((col.shape[0], self.encoded_dim))
        missing = np.isnan(col)
        vals = np.where(missing, 0, col).astype(int)
        if np.any((vals[~missing] < 0) | (vals[~missing] >= self.cardinality)):
            raise DataError(f"category outside 0..{self.cardinality - 1}")
        out[np.arange(col.shape[0]), np.where(missing, self.cardinality, vals)] = 1.0
        return out


@dataclass
class ContinuousSpec:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ConfigurationError("continuous range must have hi > lo")

    @property
    def encoded_dim(self) -> int:
        return 1

    def encode_column(self, col: np.ndarray) -> np.ndarray:
        clipped = np.clip(col, self.lo, self.hi)
        enc = 1.0 + (clipped - self.lo) / (self.hi - self.lo)
        return np.where(np.isnan(col), 0.0, enc)[:, None]

    def decode(self, enc: np.ndarray) -> np.ndarray:
        """Inverse of the observed-value remap (encoded values in [1, 2])."""
        return (np.asarray(enc, dtype=float) - 1.0) * (self.hi - self.lo) + self.lo


@dataclass
class KnockoutCodec:
    """Per-confounder encoding rules for a tuple of confounders."""

    specs: list

    @property
    def n_vars(self) -> int:
        return len(self.specs)

    @property
    def encoded_dim(self) -> int:
        return sum(s.encoded_dim for s in self.specs)

    def encode(self, z: np.ndarray) -> np.ndarray:
        """Encode raw confounder rows (NaN marks missing) to model inputs."""
        zb = np.atleast_2d(np.asarray(z, dtype=float))
        if zb.shape[1] != self.n_vars:
            raise ConfigurationError(f"expected {self.n_vars} confounder columns, got {zb.shape[1]}")
        return np.concatenate([s.encode_column(zb[:, i]) for i, s in enumerate(self.specs)], axis=1)

    def placeholder_rows(self, n: int) -> np.ndarray:
        """Raw rows with every confounder missing."""
        return np.full((n, self.n_vars), np.nan)

    def to_dict(self) -> dict:
        out = []
        for s in self.specs:
            if isinstance(s, CategoricalSpec):
                out.append({"kind": "categorical", "cardinality": s.cardinality})
            else:
                out.append({"kind": "continuous", "lo": s.lo, "hi": s.hi})
        return {"specs": out}

    @staticmethod
    def from_dict(d: dict) -> "KnockoutCodec":
        specs = []
        for s in d["specs"]:
            if s["kind"] == "categorical":
                specs.append(CategoricalSpec(s["cardinality"]))
            else:
                specs.append(ContinuousSpec(s["lo"], s["hi"]))
        return KnockoutCodec(specs)


def binary_codec(n_vars: int = 1) -> KnockoutCodec:
    return KnockoutCodec([CategoricalSpec(2) for _ in range(n_vars)])


def continuous_codec_from_data(z: np.ndarray) -> ContinuousSpec:
    """Observed range of a pooled training column, ignoring missing entries."""
    col = np.asarray(z, dtype=float).ravel()
    col = col[~np.isnan(col)]
    if col.size == 0:
        raise ConfigurationError("cannot infer a range from fully missing data")
    return ContinuousSpec(float(col.min()), float(col.max()))


def knockout_corrupt(z: np.ndarray, rate: float, rng: np.random.Generator | int) -> np.ndarray:
    """Independently replace each confounder entry with missing at `rate`.

    Returns a new array; the input is never modified. `rng` may be a
    Generator or a seed.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigurationError("knockout rate must lie in [0, 1]")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    zb = np.array(z, dtype=float, copy=True)
    if rate > 0.0:
        mask = rng.random(zb.shape) < rate
        zb[mask] = np.nan
    return zb
