"""Experiment runner: configure sites, methods and seeds, execute the full
train/calibrate/adapt pipeline per seed, and emit machine-readable results.

Each (method, test site, seed) cell is evaluated independently; failures are
recorded per cell without aborting the rest. Output is a results CSV with a
stable schema plus a JSON manifest carrying the config hash and per-seed
diagnostics.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adapt import (
    EmConfig,
    copa_star_mc,
    em_conditional_prevalence,
    em_marginal_prevalence,
    enumerate_z_support,
)
from .knockout import binary_codec
from .models import adjusted_posterior, config_hash, save_checkpoint
from .nets import LOG_CLAMP, mlp_forward, softmax
from .semdata import EmissionConfig, SemConfig, SiteDataset, generate_site, save_manifest
from .train import TrainConfig, f1_score, fit_pipeline, fit_site_prevalence

METHODS = ("ERM", "ERM_Z", "CoPA", "CoPA_star", "GPA", "GPA_star")
ORACLE_ACCESS = {"CoPA": True, "CoPA_star": True}
RESULTS_HEADER = ["method", "site", "seed", "f1", "nll", "p_y1_hat", "seconds"]


@dataclass
class SiteSpec:
    id: str
    role: str  # train | validation | test
    beta: float
    n: int

    def __post_init__(self):
        if self.role not in ("train", "validation", "test"):
            raise ValueError(f"unknown site role {self.role!r}")


@dataclass
class ExperimentConfig:
    sem_variant: str = "confounded"
    alpha: float = 0.3
    sites: list[SiteSpec] = field(default_factory=list)
    emission: EmissionConfig = field(default_factory=EmissionConfig)
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    train: TrainConfig = field(default_factory=TrainConfig)
    em: EmConfig = field(default_factory=EmConfig)
    out_dir: str = "results"

    def __post_init__(self):
        roles = [s.role for s in self.sites]
        if roles.count("train") < 1 or roles.count("validation") != 1 or roles.count("test") < 1:
            raise ValueError("need >=1 train site, exactly 1 validation site, >=1 test site")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["sites"] = [SiteSpec(**s) for s in d.get("sites", [])]
        if "emission" in d:
            d["emission"] = EmissionConfig(**d["emission"])
        if "train" in d:
            tr = dict(d["train"])
            for key in ("hidden", "prevalence_hidden"):
                if key in tr:
                    tr[key] = tuple(tr[key])
            d["train"] = TrainConfig(**tr)
        if "em" in d:
            emd = dict(d["em"])
            if "g_hidden" in emd:
                emd["g_hidden"] = tuple(emd["g_hidden"])
            d["em"] = EmConfig(**emd)
        return ExperimentConfig(**d)

    def sites_by_role(self, role: str) -> list[SiteSpec]:
        return [s for s in self.sites if s.role == role]


def default_config() -> ExperimentConfig:
    """The standard synthetic protocol: two heavily confounded training
    sites, a mid-shift validation site and a weakly confounded test site."""
    return ExperimentConfig(
        sites=[
            SiteSpec("train_b09", "train", 0.9, 10_000),
            SiteSpec("train_b07", "train", 0.7, 10_000),
            SiteSpec("val_b05", "validation", 0.5, 500),
            SiteSpec("test_b03", "test", 0.3, 1_000),
        ]
    )


@dataclass
class MetricsRow:
    method: str
    site: str
    seed: int
    f1: float
    nll: float
    p_y1_hat: float
    seconds: float

    def __post_init__(self):
        if not 0.0 <= self.f1 <= 1.0:
            raise ValueError("f1 out of range")


def _mean_nll(probs: np.ndarray, y: np.ndarray) -> float:
    picked = probs[np.arange(len(y)), y]
    return float(-np.mean(np.log(np.maximum(picked, LOG_CLAMP))))


def _generate_sites(config: ExperimentConfig, seed: int) -> dict[str, SiteDataset]:
    out = {}
    for spec in config.sites:
        sem = SemConfig(config.sem_variant, spec.beta, config.alpha, spec.n)
        out[spec.id] = generate_site(spec.id, sem, config.emission, base_seed=seed)
    return out


def run_seed(config: ExperimentConfig, seed: int, out_dir: str | Path | None = None):
    """Run every configured method for one seed.

    Returns (rows, errors, diagnostics); errors are (method, site, seed,
    message) tuples and never abort sibling cells.
    """
    from .train import calibration_nll

    rows: list[MetricsRow] = []
    errors: list[tuple[str, str, int, str]] = []
    diag: dict = {"seed": seed}
    data = _generate_sites(config, seed)
    train_sites = [data[s.id] for s in config.sites_by_role("train")]
    val = data[config.sites_by_role("validation")[0].id]
    test_specs = config.sites_by_role("test")
    codec = binary_codec()

    train_cfg = TrainConfig(**{**asdict(config.train), "seed": seed,
                               "hidden": tuple(config.train.hidden),
                               "prevalence_hidden": tuple(config.train.prevalence_hidden)})
    em_cfg = EmConfig(**{**asdict(config.em), "seed": seed,
                         "g_hidden": tuple(config.em.g_hidden)})

    needs_pipeline = bool(set(config.methods) & {"CoPA", "CoPA_star", "GPA", "GPA_star"})
    baselines = tuple(m for m in ("ERM", "ERM_Z") if m in config.methods)

    history: list = []
    t_train = time.perf_counter()
    try:
        if needs_pipeline:
            fitted = fit_pipeline(train_sites, val, codec, train_cfg, baselines=baselines, history=history)
            diag["calibration_nll_identity"] = calibration_nll(fitted.ratio, None, val, fitted.val_prevalence)
            diag["calibration_nll_fitted"] = calibration_nll(
                fitted.ratio, fitted.ratio.calibration, val, fitted.val_prevalence
            )
        else:
            from .train import fit_erm

            fitted = None
            erm_models = {}
            for name in baselines:
                erm_models[name] = fit_erm(
                    train_sites, train_cfg, use_z=(name == "ERM_Z"), codec=codec, val=val,
                    history=history, name=name.lower(),
                )
    except Exception as exc:  # noqa: BLE001 - recorded per cell below
        msg = f"training failed: {exc}"
        for spec in test_specs:
            for method in config.methods:
                errors.append((method, spec.id, seed, msg))
        return rows, errors, diag
    diag["train_seconds"] = time.perf_counter() - t_train
    diag["history"] = history

    if fitted is not None:
        erm_models = fitted.baselines

    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints" / f"seed{seed}"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        chash = config_hash(config.to_dict())
        if fitted is not None:
            save_checkpoint(ckpt_dir / "ratio.json", codec, fitted.ratio, manifest_hash=chash)
            for sid, pm in fitted.prevalences.items():
                save_checkpoint(ckpt_dir / f"prevalence_{sid}.json", codec,
                                prevalences={sid: pm}, manifest_hash=chash)
        for name, params in erm_models.items():
            save_checkpoint(ckpt_dir / f"baseline_{name}.json", codec,
                            baselines={name: params}, manifest_hash=chash)

    traces = {}
    for spec in test_specs:
        test = data[spec.id]
        for method in config.methods:
            t_cell = time.perf_counter()
            try:
                if method == "ERM":
                    probs = softmax(mlp_forward(erm_models["ERM"], test.x))
                    p_hat = float(np.mean(probs[:, 1]))
                elif method == "ERM_Z":
                    inputs = np.concatenate([test.x, codec.encode(test.z)], axis=1)
                    probs = softmax(mlp_forward(erm_models["ERM_Z"], inputs))
                    p_hat = float(np.mean(probs[:, 1]))
                elif method == "CoPA":
                    g_direct = fit_site_prevalence(test, codec, train_cfg)
                    g_rows = g_direct.predict_proba(test.z)
                    probs = adjusted_posterior(fitted.ratio.predict_proba(test.x, test.z), g_rows)
                    p_hat = float(np.mean(g_rows[:, 1]))
                elif method == "CoPA_star":
                    marginal = np.bincount(test.y, minlength=2).astype(float) / test.n
                    probs = copa_star_mc(test.x, fitted.ratio, marginal, enumerate_z_support(codec))
                    p_hat = float(marginal[1])
                elif method == "GPA":
                    g_em, trace = em_conditional_prevalence(
                        test.without_labels(), fitted.ratio, codec, em_cfg
                    )
                    traces[(method, spec.id)] = trace
                    g_rows = g_em.predict_proba(test.z)
                    probs = adjusted_posterior(fitted.ratio.predict_proba(test.x, test.z), g_rows)
                    p_hat = float(np.mean(g_rows[:, 1]))
                else:  # GPA_star
                    marginal, trace = em_marginal_prevalence(
                        test.without_labels().without_confounders(), fitted.ratio, codec, em_cfg
                    )
                    traces[(method, spec.id)] = trace
                    z0 = codec.placeholder_rows(test.n)
                    probs = adjusted_posterior(
                        fitted.ratio.predict_proba(test.x, z0), np.tile(marginal, (test.n, 1))
                    )
                    p_hat = float(marginal[1])
                pred = np.argmax(probs, axis=1)
                rows.append(MetricsRow(
                    method=method,
                    site=spec.id,
                    seed=seed,
                    f1=f1_score(pred, test.y),
                    nll=_mean_nll(probs, test.y),
                    p_y1_hat=p_hat,
                    seconds=time.perf_counter() - t_cell,
                ))
            except Exception as exc:  # noqa: BLE001 - per-cell isolation
                errors.append((method, spec.id, seed, str(exc)))

    if out_dir is not None:
        trace_dir = Path(out_dir) / "traces"
        trace_dir.mkdir(parents=True, exist_ok=True)
        for (method, site_id), trace in traces.items():
            trace.save_csv(trace_dir / f"{method}_{site_id}_seed{seed}.csv")
        log_dir = Path(out_dir) / "logs"
        log_dir.mkdir(parents=True, exist_ok=True)
        with open(log_dir / f"train_seed{seed}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "epoch", "split", "nll", "f1"])
            for row in history:
                writer.writerow([row[0], row[1], row[2], repr(float(row[3])), repr(float(row[4]))])
    return rows, errors, diag


def _run_seed_job(args):
    config_dict, seed, out_dir = args
    config = ExperimentConfig.from_dict(config_dict)
    return run_seed(config, seed, out_dir=out_dir)


def write_results_csv(path: str | Path, rows: list[MetricsRow]) -> None:
    rows = sorted(rows, key=lambda r: (r.method, r.site, r.seed))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_HEADER)
        for r in rows:
            writer.writerow([
                r.method, r.site, r.seed,
                repr(float(r.f1)), repr(float(r.nll)), repr(float(r.p_y1_hat)), repr(float(r.seconds)),
            ])


def run_experiment(
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
    threads: int = 1,
    seeds: list[int] | None = None,
) -> tuple[list[MetricsRow], list[tuple[str, str, int, str]]]:
    """Execute the configured experiment over all seeds.

    Parallelism is across seeds only; each seed's computation is identical
    regardless of thread count, and rows are merged in sorted order, so the
    results CSV content does not depend on scheduling.
    """
    seeds = list(config.seeds if seeds is None else seeds)
    out = Path(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    all_rows: list[MetricsRow] = []
    all_errors: list[tuple[str, str, int, str]] = []
    diags = []
    if threads > 1 and len(seeds) > 1:
        jobs = [(config.to_dict(), s, str(out)) for s in seeds]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for rows, errors, diag in pool.map(_run_seed_job, jobs):
                all_rows.extend(rows)
                all_errors.extend(errors)
                diags.append(diag)
    else:
        for s in seeds:
            rows, errors, diag = run_seed(config, s, out_dir=out)
            all_rows.extend(rows)
            all_errors.extend(errors)
            diags.append(diag)

    write_results_csv(out / "results.csv", all_rows)
    if all_errors:
        with open(out / "errors.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "site", "seed", "error"])
            for e in sorted(all_errors):
                writer.writerow(e)
    for d in diags:
        d.pop("history", None)
    manifest = {
        "config": config.to_dict(),
        "config_hash": config_hash(config.to_dict()),
        "version": __version__,
        "seeds": seeds,
        "oracle_access": {m: ORACLE_ACCESS.get(m, False) for m in config.methods},
        "per_seed": sorted(diags, key=lambda d: d["seed"]),
        "n_errors": len(all_errors),
    }
    save_manifest(out / "manifest.json", manifest)
    return all_rows, all_errors


def read_results_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(results_dir: str | Path) -> list[dict]:
    """Group the results CSV by (method, site): mean F1 and standard error
    (sample standard deviation over the seed count; 0 for a single seed)."""
    path = Path(results_dir)
    csv_path = path / "results.csv" if path.is_dir() else path
    records = read_results_csv(csv_path)
    if not records:
        raise ValueError(f"no rows found in {csv_path}")
    groups: dict[tuple[str, str], list[float]] = {}
    for rec in records:
        groups.setdefault((rec["method"], rec["site"]), []).append(float(rec["f1"]))
    summary = []
    for (method, site), values in sorted(groups.items()):
        arr = np.asarray(values)
        stderr = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
        summary.append({
            "method": method,
            "site": site,
            "mean_f1": float(arr.mean()),
            "stderr": stderr,
            "n_seeds": arr.size,
            "oracle_access": ORACLE_ACCESS.get(method, False),
        })
    return summary


def write_summary_csv(path: str | Path, summary: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "site", "mean_f1", "stderr", "n_seeds", "oracle_access"])
        for row in summary:
            writer.writerow([
                row["method"], row["site"], repr(row["mean_f1"]), repr(row["stderr"]),
                row["n_seeds"], row["oracle_access"],
            ])


def generate_datasets(config: ExperimentConfig, out_dir: str | Path) -> list[Path]:
    """Write one CSV per (seed, site) plus a manifest; no training."""
    out = Path(out_dir)
    written = []
    for seed in config.seeds:
        seed_dir = out / f"seed{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        data = _generate_sites(config, seed)
        for spec in config.sites:
            path = seed_dir / f"{spec.id}.csv"
            data[spec.id].save_csv(path)
            written.append(path)
        save_manifest(seed_dir / "manifest.json", {
            "seed": seed,
            "emission": asdict(config.emission),
            "sites": {
                spec.id: {"sem": {"variant": config.sem_variant, "beta": spec.beta,
                                  "alpha": config.alpha, "n": spec.n},
                          "role": spec.role}
                for spec in config.sites
            },
        })
    save_manifest(out / "manifest.json", {
        "config": config.to_dict(),
        "config_hash": config_hash(config.to_dict()),
        "version": __version__,
    })
    return written
