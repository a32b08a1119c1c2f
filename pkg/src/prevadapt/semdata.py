"""Multi-site synthetic data from simple structural equations.

Three label/confounder mechanisms are supported (a shared latent cause, the
label causing the confounder, and the confounder causing the label), each
controlled by a mixing coefficient beta that plays the role of "site".
Features come from a Gaussian emission whose parameters never vary by site,
so the feature mechanism is stable while the label/confounder correlation
shifts. Closed-form prevalences and an exactly enumerable discrete fixture
are provided for testing.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nets import ConfigurationError

VARIANTS = ("confounded", "y_causes_z", "z_causes_y")


@dataclass
class SemConfig:
    variant: str = "confounded"
    beta: float = 0.5
    alpha: float = 0.3
    n: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if not 0.0 < self.beta < 1.0:
            raise ConfigurationError("beta must lie strictly inside (0, 1)")
        if self.n < 1:
            raise ConfigurationError("n must be at least 1")


@dataclass
class EmissionConfig:
    """Stable Gaussian feature emission: the label shifts the first
    coordinate by +-mu, the confounder shifts the second by +-nu, and
    isotropic noise of scale sigma is added over all dim coordinates.

    Defaults keep the label signal strong and the confounder signal
    stronger still, so shortcut learning pays off in-domain but misleads
    under shifted label/confounder correlations."""

    dim: int = 5
    mu: float = 2.5
    nu: float = 4.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigurationError("dim must be at least 2")
        if self.sigma <= 0:
            raise ConfigurationError("sigma must be positive")

    def mean(self, y: int, z: int) -> np.ndarray:
        m = np.zeros(self.dim)
        m[0] = self.mu * (2 * y - 1)
        m[1] = self.nu * (2 * z - 1)
        return m


@dataclass
class SiteDataset:
    """Samples from one site. Missing labels are -1; missing confounder
    entries are NaN, so missingness is always explicit in the arrays."""

    site_id: str
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        self.z = np.asarray(self.z, dtype=float)
        if self.z.ndim == 1:
            self.z = self.z[:, None]
        if not (self.x.shape[0] == self.y.shape[0] == self.z.shape[0]):
            raise ConfigurationError("x, y, z must have equal length")
        if not np.all(np.isfinite(self.x)):
            raise ConfigurationError("features must be finite")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def labeled(self) -> np.ndarray:
        return self.y >= 0

    def without_labels(self) -> "SiteDataset":
        return SiteDataset(self.site_id, self.x.copy(), np.full(self.n, -1), self.z.copy())

    def without_confounders(self) -> "SiteDataset":
        return SiteDataset(self.site_id, self.x.copy(), self.y.copy(), np.full_like(self.z, np.nan))

    def save_csv(self, path: str | Path) -> None:
        d = self.x.shape[1]
        nz = self.z.shape[1]
        header = [f"x{i}" for i in range(d)] + ["y"] + [f"z{j}" for j in range(nz)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(self.n):
                row = [repr(float(v)) for v in self.x[i]]
                row.append("" if self.y[i] < 0 else str(int(self.y[i])))
                for v in self.z[i]:
                    row.append("" if np.isnan(v) else repr(float(v)))
                writer.writerow(row)

    @staticmethod
    def load_csv(path: str | Path, site_id: str | None = None) -> "SiteDataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            y_col = header.index("y")
            rows = list(reader)
        d = y_col
        nz = len(header) - y_col - 1
        n = len(rows)
        x = np.zeros((n, d))
        y = np.zeros(n, dtype=int)
        z = np.zeros((n, nz))
        for i, row in enumerate(rows):
            x[i] = [float(v) for v in row[:d]]
            y[i] = -1 if row[y_col] == "" else int(row[y_col])
            z[i] = [np.nan if v == "" else float(v) for v in row[y_col + 1:]]
        return SiteDataset(site_id or Path(path).stem, x, y, z)


def site_seed(base_seed: int, site_id: str) -> np.random.SeedSequence:
    """Deterministic per-site seed stream independent of generation order."""
    return np.random.SeedSequence([base_seed, zlib.crc32(site_id.encode())])


def gen_labels(config: SemConfig) -> tuple[np.ndarray, np.ndarray]:
    """Draw (y, z) pairs from the configured structural equations."""
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    b, a, n = config.beta, config.alpha, config.n
    if config.variant == "confounded":
        s = rng.uniform(0, 1, n)
        u = rng.uniform(0, 1, n)
        y = (b * s + (1 - b) * a > 0.5).astype(int)
        z = (b * s + (1 - b) * u > 0.5).astype(int)
    elif config.variant == "y_causes_z":
        u1 = rng.uniform(0, 1, n)
        u2 = rng.uniform(0, 1, n)
        y = (b * u1 + (1 - b) * a > 0.5).astype(int)
        z = (b * y / 2 + (1 - b / 2) * u2 > 0.5).astype(int)
    else:  # z_causes_y
        u1 = rng.uniform(0, 1, n)
        u2 = rng.uniform(0, 1, n)
        z = (u1 > 0.5).astype(int)
        y = (b * z / 2 + b * u2 / 2 + (1 - b) * a > 0.5).astype(int)
    return y, z


def _ramp_antiderivative(s: float, lo: float, hi: float) -> float:
    """Antiderivative of clip((s - lo) / (hi - lo), 0, 1) at s."""
    if s <= lo:
        return 0.0
    if s >= hi:
        return (hi - lo) / 2.0 + (s - hi)
    return (s - lo) ** 2 / (2.0 * (hi - lo))


def _ramp_integral(a: float, b: float, lo: float, hi: float) -> float:
    a = min(max(a, 0.0), 1.0)
    b = min(max(b, 0.0), 1.0)
    if b <= a:
        return 0.0
    return _ramp_antiderivative(b, lo, hi) - _ramp_antiderivative(a, lo, hi)


def _threshold_prob(offset: float, coeff: float) -> float:
    """P(offset + coeff * U > 0.5) for U ~ Unif(0,1), coeff >= 0.

    coeff == 0 makes the event deterministic, returning exactly 0 or 1.
    """
    if coeff == 0.0:
        return 1.0 if offset > 0.5 else 0.0
    return 1.0 - min(max((0.5 - offset) / coeff, 0.0), 1.0)


@dataclass
class Prevalence:
    """Exact site prevalences: the marginal P(Y=1) and both conditionals."""

    p_y1: float
    p_y1_given_z0: float
    p_y1_given_z1: float
    p_z1: float

    def table(self) -> np.ndarray:
        """P(Y=i | Z=j) as a (2, 2) array indexed [y, z]."""
        return np.array([
            [1 - self.p_y1_given_z0, 1 - self.p_y1_given_z1],
            [self.p_y1_given_z0, self.p_y1_given_z1],
        ])


def analytic_prevalence(config: SemConfig) -> Prevalence:
    """Closed-form P(Y=1), P(Y=1|Z), P(Z=1) by integrating out the uniform
    latents. Measure-zero conditioning events return exact 0/1 values."""
    return prevalence_for(config.variant, config.beta, config.alpha)


def prevalence_for(variant: str, beta: float, alpha: float) -> Prevalence:
    """As `analytic_prevalence` but admits degenerate beta in [0, 1)."""
    b, a = beta, alpha
    if variant == "confounded":
        if b == 0.0:  # both thresholds deterministic in (alpha, U)
            p_y1 = 1.0 if a > 0.5 else 0.0
            return Prevalence(p_y1, p_y1, p_y1, 0.5)
        # Y = [S > s_y]; P(Z=1 | S=s) is a unit ramp between t0 and t1.
        s_y = (0.5 - (1 - b) * a) / b
        p_y1 = 1.0 - min(max(s_y, 0.0), 1.0)
        t0 = (b - 0.5) / b
        t1 = 0.5 / b
        p_z1 = _ramp_integral(0.0, 1.0, t0, t1)
        joint_11 = _ramp_integral(s_y, 1.0, t0, t1)
        p1 = joint_11 / p_z1 if p_z1 > 0 else (1.0 if p_y1 > 0 else 0.0)
        p0 = (p_y1 - joint_11) / (1 - p_z1) if p_z1 < 1 else (1.0 if p_y1 > 0 else 0.0)
    elif variant == "y_causes_z":
        p_y1 = _threshold_prob((1 - b) * a, b)
        pz_y1 = _threshold_prob(b / 2, 1 - b / 2)
        pz_y0 = _threshold_prob(0.0, 1 - b / 2)
        p_z1 = pz_y1 * p_y1 + pz_y0 * (1 - p_y1)
        p1 = pz_y1 * p_y1 / p_z1 if p_z1 > 0 else (1.0 if p_y1 > 0 else 0.0)
        p0 = (1 - pz_y1) * p_y1 / (1 - p_z1) if p_z1 < 1 else (1.0 if p_y1 > 0 else 0.0)
    elif variant == "z_causes_y":
        p_z1 = 0.5
        p1 = _threshold_prob(b / 2 + (1 - b) * a, b / 2)
        p0 = _threshold_prob((1 - b) * a, b / 2)
        p_y1 = 0.5 * (p0 + p1)
    else:
        raise ConfigurationError(f"unknown variant {variant!r}")
    return Prevalence(p_y1=p_y1, p_y1_given_z0=p0, p_y1_given_z1=p1, p_z1=p_z1)


def emit_features(
    y: np.ndarray,
    z: np.ndarray,
    emission: EmissionConfig,
    seed: int | np.random.SeedSequence,
    site_id: str = "site",
) -> SiteDataset:
    """Attach stable Gaussian features to (y, z) pairs."""
    rng = np.random.default_rng(seed)
    y = np.asarray(y, dtype=int)
    zc = np.asarray(z, dtype=float).reshape(len(y))
    x = emission.sigma * rng.standard_normal((len(y), emission.dim))
    x[:, 0] += emission.mu * (2 * y - 1)
    x[:, 1] += emission.nu * (2 * zc - 1)
    return SiteDataset(site_id, x, y, zc[:, None])


def generate_site(
    site_id: str,
    sem: SemConfig,
    emission: EmissionConfig,
    base_seed: int,
) -> SiteDataset:
    """Labels plus features for one site, seeded by (base_seed, site_id)."""
    ss = site_seed(base_seed, site_id)
    label_seed, feat_seed = ss.spawn(2)
    cfg = SemConfig(sem.variant, sem.beta, sem.alpha, sem.n,
                    seed=int(label_seed.generate_state(1)[0]))
    y, z = gen_labels(cfg)
    return emit_features(y, z, emission, feat_seed, site_id=site_id)


def _log_gaussian(x: np.ndarray, mean: np.ndarray, sigma: float) -> np.ndarray:
    diff = x - mean
    return -0.5 * np.sum(diff * diff, axis=-1) / (sigma * sigma)


def oracle_posterior(
    x: np.ndarray,
    z: int | None,
    prevalence: Prevalence,
    emission: EmissionConfig,
) -> np.ndarray:
    """Exact P(Y | x, z) under the Gaussian emission and given prevalences.

    With z missing the confounder is marginalized out exactly using P(Z).
    Accepts a single feature vector or a batch; returns matching shape.
    """
    xb = np.atleast_2d(np.asarray(x, dtype=float))
    table = prevalence.table()  # [y, z]
    if z is not None:
        prior = table[:, int(z)]
        log_lik = np.stack(
            [_log_gaussian(xb, emission.mean(yv, int(z)), emission.sigma) for yv in (0, 1)],
            axis=1,
        )
        logp = log_lik + np.log(np.maximum(prior, 1e-300))
    else:
        pz = np.array([1 - prevalence.p_z1, prevalence.p_z1])
        # log sum_z P(z) P(y|z) N(x; mean(y,z))
        parts = np.full((xb.shape[0], 2, 2), -np.inf)
        for zv in (0, 1):
            if pz[zv] <= 0:
                continue
            for yv in (0, 1):
                w = pz[zv] * table[yv, zv]
                if w <= 0:
                    continue
                parts[:, yv, zv] = np.log(w) + _log_gaussian(xb, emission.mean(yv, zv), emission.sigma)
        m = np.max(parts, axis=2, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        with np.errstate(divide="ignore"):
            logp = np.squeeze(m, axis=2) + np.log(np.sum(np.exp(parts - m), axis=2))
    logp -= np.max(logp, axis=1, keepdims=True)
    post = np.exp(logp)
    post /= post.sum(axis=1, keepdims=True)
    return post[0] if np.asarray(x).ndim == 1 else post


@dataclass
class SitePrevalenceSpec:
    """Target-site distribution for the discrete fixture: P(Y|Z) and P(Z)."""

    p_y_given_z: np.ndarray  # (n_y, n_z), columns on the simplex
    p_z: np.ndarray  # (n_z,)

    def __post_init__(self):
        self.p_y_given_z = np.asarray(self.p_y_given_z, dtype=float)
        self.p_z = np.asarray(self.p_z, dtype=float)
        ok = np.all(self.p_y_given_z >= 0) and np.allclose(self.p_y_given_z.sum(axis=0), 1.0, atol=1e-9)
        ok = ok and np.all(self.p_z >= 0) and abs(self.p_z.sum() - 1.0) < 1e-9
        if not ok:
            raise ConfigurationError("prevalence spec rows must lie on the simplex")


@dataclass
class DiscreteOracle:
    """Fully enumerable world over K feature symbols, |Y| classes and |Z|
    confounder values. The emission table is shared by every site; only the
    per-site prevalences differ."""

    emission: np.ndarray  # (K, n_y, n_z), sums to 1 over the first axis
    sites: dict[str, SitePrevalenceSpec] = field(default_factory=dict)

    def __post_init__(self):
        self.emission = np.asarray(self.emission, dtype=float)
        if np.any(self.emission < 0) or not np.allclose(self.emission.sum(axis=0), 1.0, atol=1e-9):
            raise ConfigurationError("emission columns must lie on the simplex")

    @property
    def n_symbols(self) -> int:
        return self.emission.shape[0]

    @property
    def n_classes(self) -> int:
        return self.emission.shape[1]

    @property
    def n_z(self) -> int:
        return self.emission.shape[2]

    def joint(self, site: str) -> np.ndarray:
        """P(x, y, z) as a (K, n_y, n_z) table."""
        spec = self.sites[site]
        return self.emission * spec.p_y_given_z[None, :, :] * spec.p_z[None, None, :]

    def posterior(self, site: str) -> np.ndarray:
        """P(y | x, z) as a (K, n_y, n_z) table."""
        j = self.joint(site)
        tot = j.sum(axis=1, keepdims=True)
        return np.divide(j, tot, out=np.full_like(j, np.nan), where=tot > 0)

    def ratio(self) -> np.ndarray:
        """Site-invariant normalized ratio of posterior to prevalence,
        which reduces to the emission renormalized over classes."""
        tot = self.emission.sum(axis=1, keepdims=True)
        return self.emission / tot

    def ratio_fn(self):
        """Callable (x, z) -> probs for feeding the exact ratio to EM."""
        table = self.ratio()

        def fn(x: np.ndarray, z: np.ndarray) -> np.ndarray:
            xi = np.asarray(x)[:, 0].astype(int)
            zi = np.asarray(z)[:, 0].astype(int)
            return table[xi, :, zi]

        return fn

    def marginal_ratio_fn(self, p_x_given_y: np.ndarray):
        """Callable ignoring z, for the missing-confounder path: the class-
        conditional feature table renormalized over classes."""
        tot = p_x_given_y.sum(axis=1, keepdims=True)
        table = p_x_given_y / tot

        def fn(x: np.ndarray, z: np.ndarray) -> np.ndarray:
            xi = np.asarray(x)[:, 0].astype(int)
            return table[xi, :]

        return fn

    def sample(self, site: str, n: int, rng: np.random.Generator) -> SiteDataset:
        """Draw n samples; features are stored as the raw symbol index."""
        j = self.joint(site).reshape(-1)
        idx = rng.choice(j.size, size=n, p=j / j.sum())
        k, rem = np.divmod(idx, self.n_classes * self.n_z)
        y, z = np.divmod(rem, self.n_z)
        return SiteDataset(site, k[:, None].astype(float), y.astype(int), z.astype(float)[:, None])


def build_discrete_oracle(
    n_symbols: int,
    site_specs: dict[str, SitePrevalenceSpec],
    seed: int,
    n_classes: int = 2,
    n_z: int = 2,
    sample_sizes: dict[str, int] | None = None,
    concentration: float = 0.5,
    emission: np.ndarray | None = None,
) -> tuple[DiscreteOracle, dict[str, SiteDataset]]:
    """Shared emission plus per-site samples.

    By default the emission is drawn from a Dirichlet with small
    concentration so columns stay spiky; pass `emission` explicitly for a
    designed table.
    """
    if n_symbols < 2:
        raise ConfigurationError("need at least two feature symbols")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD15C]))
    if emission is None:
        drawn = rng.dirichlet(np.full(n_symbols, concentration), size=(n_classes, n_z))
        emission = np.moveaxis(drawn, -1, 0)
    oracle = DiscreteOracle(emission, dict(site_specs))
    datasets = {}
    for site_id in site_specs:
        n = (sample_sizes or {}).get(site_id, 0)
        if n > 0:
            datasets[site_id] = oracle.sample(site_id, n, rng)
    return oracle, datasets


def peaked_emission(n_symbols: int = 4, peak: float = 0.85, n_classes: int = 2, n_z: int = 2,
                    z_dependent: bool = True) -> np.ndarray:
    """Designed emission whose class-conditionals concentrate on distinct
    symbols, giving well-separated classes for adaptation fixtures."""
    rest = (1.0 - peak) / (n_symbols - 1)
    table = np.full((n_symbols, n_classes, n_z), rest)
    for y in range(n_classes):
        for z in range(n_z):
            table[(n_classes * z + y) % n_symbols if z_dependent else y, y, z] = peak
    return table


def random_site_spec(rng: np.random.Generator, n_classes: int = 2, n_z: int = 2) -> SitePrevalenceSpec:
    """Random non-degenerate prevalence spec for fixture generation."""
    p_y_given_z = rng.dirichlet(np.ones(n_classes), size=n_z).T
    p_y_given_z = 0.9 * p_y_given_z + 0.1 / n_classes  # keep cells away from 0
    p_z = rng.dirichlet(np.ones(n_z))
    p_z = 0.8 * p_z + 0.2 / n_z
    return SitePrevalenceSpec(p_y_given_z, p_z)


def save_manifest(path: str | Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
