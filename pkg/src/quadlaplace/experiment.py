"""End-to-end gap-split experiment: config, per-split pipeline and reporting."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import metrics as M
from .data import file_checksum, gap_splits, load_csv, read_manifest, standardize, write_manifest
from .io import atomic_write_text
from .laplace import (build_lla_posterior, build_qla_posterior, fit_hyperparameters,
                      glm_predictive_batch, save_posterior)
from .likelihood import GaussianLikelihood
from .nnet import NetworkSpec, save_params
from .train import DEFAULT_LAYERS, DEFAULT_UNITS, DEFAULT_WEIGHT_DECAYS, TrainConfig, inner_cv_select, \
    train_map
from .curvature import SCALING_MODES

METHODS = ("lla", "qla")
UNITS = ("original", "standardized")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    datasets: tuple[str, ...] = ()
    outdir: str = "results"
    methods: tuple[str, ...] = METHODS
    power_iterations: int = 10
    scaling_mode: str = "rayleigh"
    with_noise: bool = True
    metric_units: str = "original"
    activation: str = "tanh"
    weight_decays: tuple[float, ...] = DEFAULT_WEIGHT_DECAYS
    units: tuple[int, ...] = DEFAULT_UNITS
    layers: tuple[int, ...] = DEFAULT_LAYERS
    cv_folds: int = 5
    epochs: int = 200
    learning_rate: float = 0.01
    evidence_points: int = 61
    evidence_refinements: int = 3
    evidence_prior_mean: str = "zero"
    prior_var_log10_range: tuple[float, float] = (-3.0, 3.0)
    noise_prec_log10_range: tuple[float, float] = (-2.0, 2.0)
    seed: int = 0
    workers: int = 1
    dense_cap: int = 2000

    def __post_init__(self):
        def bad(msg):
            raise ConfigError(msg)
        for name in ("datasets", "methods", "weight_decays", "units", "layers",
                     "prior_var_log10_range", "noise_prec_log10_range"):
            val = getattr(self, name)
            if isinstance(val, (str, bytes)) or not hasattr(val, "__iter__"):
                bad(f"{name} must be a list")
            object.__setattr__(self, name, tuple(val))
        if not self.methods or any(m not in METHODS for m in self.methods):
            bad(f"methods must be a non-empty subset of {list(METHODS)}, got {list(self.methods)}")
        if len(set(self.methods)) != len(self.methods):
            bad("methods contains duplicates")
        if self.scaling_mode not in SCALING_MODES:
            bad(f"scaling_mode must be one of {list(SCALING_MODES)}")
        if self.metric_units not in UNITS:
            bad(f"metric_units must be one of {list(UNITS)}")
        if self.evidence_prior_mean not in ("zero", "map"):
            bad("evidence_prior_mean must be zero or map")
        if self.activation not in ("tanh", "relu"):
            bad("activation must be tanh or relu")
        for name in ("power_iterations", "cv_folds", "epochs", "evidence_points",
                     "workers", "dense_cap"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                bad(f"{name} must be a positive integer, got {v!r}")
        if self.cv_folds < 2:
            bad("cv_folds must be >= 2")
        if self.evidence_points < 3:
            bad("evidence_points must be >= 3")
        if isinstance(self.evidence_refinements, bool) or not isinstance(self.evidence_refinements, int) \
                or self.evidence_refinements < 0:
            bad("evidence_refinements must be a non-negative integer")
        if not isinstance(self.with_noise, bool):
            bad("with_noise must be true or false")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            bad("seed must be a non-negative integer")
        if not (isinstance(self.learning_rate, (int, float)) and self.learning_rate > 0):
            bad("learning_rate must be > 0")
        if not self.weight_decays or any(not isinstance(w, (int, float)) or w < 0 for w in self.weight_decays):
            bad("weight_decays must be a non-empty list of numbers >= 0")
        for name in ("units", "layers"):
            v = getattr(self, name)
            if not v or any(isinstance(u, bool) or not isinstance(u, int) or u < 1 for u in v):
                bad(f"{name} must be a non-empty list of positive integers")
        for name in ("prior_var_log10_range", "noise_prec_log10_range"):
            lo_hi = getattr(self, name)
            if len(lo_hi) != 2 or not lo_hi[0] < lo_hi[1]:
                bad(f"{name} must be [low, high] with low < high")
        object.__setattr__(self, "learning_rate", float(self.learning_rate))
        object.__setattr__(self, "weight_decays", tuple(float(w) for w in self.weight_decays))
        object.__setattr__(self, "prior_var_log10_range", tuple(float(w) for w in self.prior_var_log10_range))
        object.__setattr__(self, "noise_prec_log10_range", tuple(float(w) for w in self.noise_prec_log10_range))
        object.__setattr__(self, "datasets", tuple(str(d) for d in self.datasets))

    # -- (de)serialization -------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_yaml(cls, path, overrides: dict | None = None) -> ExperimentConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            d = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        d.update(overrides or {})
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def pipeline_key(self) -> str:
        """Hash of every setting that affects per-split results."""
        d = self.to_dict()
        for k in ("datasets", "outdir", "workers", "metric_units"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def dataset_name(path) -> str:
    return Path(path).stem


def split_dir(cfg: ExperimentConfig, name: str, split_id: str) -> Path:
    return Path(cfg.outdir) / name / split_id


def manifest_path(cfg, name, split_id) -> Path:
    return split_dir(cfg, name, split_id) / "manifest.json"


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------

def make_splits(cfg: ExperimentConfig) -> list[Path]:
    """Write one manifest per input dimension of every dataset."""
    written = []
    loaded = []
    for path in cfg.datasets:
        ds = load_csv(path)
        splits = gap_splits(ds)        # validate every dataset before writing anything
        loaded.append((path, ds, splits))
    for path, ds, splits in loaded:
        checksum = file_checksum(path)
        for sp in splits:
            mp = manifest_path(cfg, ds.name, sp.split_id)
            write_manifest(mp, ds, sp, checksum)
            written.append(mp)
    return written


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _split_seed(seed: int, name: str, dimension: int) -> int:
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([seed, tag, dimension]).generate_state(1)[0])


def _write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _predictions_csv(means, variances, y) -> str:
    lines = ["id,mean,variance,target"]
    lines += [f"{i},{m!r},{v!r},{t!r}" for i, (m, v, t) in enumerate(zip(means.tolist(), variances.tolist(), y.tolist()))]
    return "\n".join(lines) + "\n"


def run_split(cfg: ExperimentConfig, dataset_path: str, split_id: str) -> dict:
    """Full pipeline for one gap split; returns the metrics document it writes."""
    name = dataset_name(dataset_path)
    out = split_dir(cfg, name, split_id)
    split, manifest = read_manifest(out / "manifest.json")
    checksum = file_checksum(dataset_path)
    if manifest["checksum"] != checksum:
        raise ValueError(f"{dataset_path} changed since its manifests were written (checksum mismatch)")
    ds = load_csv(dataset_path)
    train, test = standardize(ds, split)
    seed = _split_seed(cfg.seed, name, split.dimension)

    specs = [NetworkSpec(ds.d, (u,) * l, cfg.activation) for l in cfg.layers for u in cfg.units]
    cv_cfgs = [TrainConfig(weight_decay=w, learning_rate=cfg.learning_rate, epochs=cfg.epochs)
               for w in cfg.weight_decays]
    (spec, chosen), scores = inner_cv_select(specs, train.X, train.y, cv_cfgs, n_folds=cfg.cv_folds,
                                             seed=seed, return_scores=True)
    _write_json(out / "selection.json", {
        "hidden_layers": list(spec.hidden_layers), "weight_decay": chosen.weight_decay,
        "cv_scores": [{"hidden_layers": list(specs[i].hidden_layers), "weight_decay": cv_cfgs[j].weight_decay,
                       "mse": s} for (i, j), s in sorted(scores.items())],
    })

    final = TrainConfig(weight_decay=chosen.weight_decay, learning_rate=cfg.learning_rate,
                        epochs=cfg.epochs, seed=seed)
    theta, log = train_map(spec, train.X, train.y, final, return_log=True)
    save_params(out / "theta.bin", spec, theta)
    _write_json(out / "train_log.json", {"loss": log})

    fit = fit_hyperparameters(spec, theta, train.X, train.y, n_points=cfg.evidence_points,
                              prior_range=cfg.prior_var_log10_range,
                              noise_range=cfg.noise_prec_log10_range,
                              refinements=cfg.evidence_refinements, full=True,
                              prior_mean=cfg.evidence_prior_mean)
    lik = GaussianLikelihood(fit.noise_prec)
    _write_json(out / "hyperparameters.json", dataclasses.asdict(fit))

    doc = {"dataset": name, "split": split_id, "dimension": split.dimension, "pipeline": cfg.pipeline_key(),
           "n_train": int(train.n), "n_test": int(test.n), "n_params": spec.n_params,
           "target_std": train.target_std, "prior_var": fit.prior_var, "noise_prec": fit.noise_prec,
           "methods": {}}
    for method in cfg.methods:
        if method == "lla":
            post = build_lla_posterior(spec, theta, lik, train.X, fit.prior_var)
        else:
            post = build_qla_posterior(spec, theta, lik, train.X, train.y, fit.prior_var,
                                       k=cfg.power_iterations, scaling_mode=cfg.scaling_mode)
        save_posterior(out / f"posterior_{method}.npz", post, spec)
        means, var = glm_predictive_batch(post, spec, test.X, lik, with_noise=cfg.with_noise)
        atomic_write_text(out / f"predictions_{method}.csv", _predictions_csv(means, var, test.y))
        std_metrics = M.evaluate_predictions(means, var, test.y)
        entry = {"standardized": std_metrics,
                 "original": M.to_original_units(std_metrics, train.target_std)}
        if method == "qla":
            entry["n_clamped"] = post.meta["n_clamped"]
        doc["methods"][method] = entry
    _write_json(out / "metrics.json", doc)
    return doc


def _split_done(cfg, path, split_id) -> bool:
    mp = split_dir(cfg, dataset_name(path), split_id) / "metrics.json"
    if not mp.exists():
        return False
    try:
        return json.loads(mp.read_text()).get("pipeline") == cfg.pipeline_key()
    except (OSError, ValueError):
        return False


def _job(args):
    cfg, path, split_id = args
    err_path = split_dir(cfg, dataset_name(path), split_id) / "error.json"
    try:
        run_split(cfg, path, split_id)
    except Exception as exc:  # recorded per split, the run carries on
        _write_json(err_path, {"error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc()})
        return split_id, f"{type(exc).__name__}: {exc}"
    if err_path.exists():
        err_path.unlink()
    return split_id, None


def list_splits(cfg: ExperimentConfig, path) -> list[str]:
    root = Path(cfg.outdir) / dataset_name(path)
    return sorted(p.parent.name for p in root.glob("gap*/manifest.json"))


def run_experiment(cfg: ExperimentConfig, log=print) -> dict:
    """Run every split that has a manifest and no up-to-date metrics.

    Returns ``{(dataset, split): error message}`` for failed splits.
    """
    jobs = []
    for path in cfg.datasets:
        ids = list_splits(cfg, path)
        if not ids:
            raise FileNotFoundError(f"no split manifests for {dataset_name(path)} under {cfg.outdir}; "
                                    "run the split command first")
        for sid in ids:
            if _split_done(cfg, path, sid):
                log(f"{dataset_name(path)}/{sid}: up to date")
            else:
                jobs.append((cfg, path, sid))
    failures = {}
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_job(job))
            log(f"{dataset_name(job[1])}/{job[2]}: {'failed: ' + results[-1][1] if results[-1][1] else 'done'}")
    for (c, path, _), (sid, err) in zip(jobs, results):
        if err is not None:
            failures[(dataset_name(path), sid)] = err
    return failures


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class ReportResult:
    report: M.MetricReport
    missing: list = field(default_factory=list)


def collect_report(outdir, methods=METHODS, units: str = "original", datasets=None) -> ReportResult:
    """Gather every split's ``metrics.json`` under ``outdir``."""
    root = Path(outdir)
    rep = M.MetricReport(meta={"metric_units": units, "methods": list(methods)})
    missing = []
    names = sorted(p.name for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if datasets is not None:
        names = [n for n in names if n in set(datasets)]
    clamped = {}
    for name in names:
        for sdir in sorted((root / name).glob("gap*")):
            if not (sdir / "manifest.json").exists():
                continue
            mpath = sdir / "metrics.json"
            if not mpath.exists():
                missing.append(f"{name}/{sdir.name}")
                continue
            doc = json.loads(mpath.read_text())
            for method in methods:
                m = doc["methods"][method][units]
                rep.add(name, method, sdir.name, m["nll_mean"], m["crps_mean"])
            if "qla" in methods:
                clamped[name] = clamped.get(name, 0) + doc["methods"]["qla"].get("n_clamped", 0)
    if clamped:
        rep.meta["qla_clamped_factors"] = clamped
    return ReportResult(rep, missing)


def write_report(outdir, result: ReportResult, figures: bool = True) -> list[Path]:
    root = Path(outdir)
    paths = [root / "report.json", root / "report.md"]
    atomic_write_text(paths[0], result.report.to_json())
    md = "# Gap-split results\n\n"
    md += f"Metrics in {result.report.meta['metric_units']} target units, mean ± standard error over splits.\n\n"
    md += result.report.to_markdown()
    if result.missing:
        md += "\nMissing splits: " + ", ".join(result.missing) + "\n"
    atomic_write_text(paths[1], md)
    if figures and result.report.per_split:
        from .plotting import plot_report
        paths += plot_report(result.report, root)
    return paths


def echo_config(cfg: ExperimentConfig) -> Path:
    p = Path(cfg.outdir) / "config.effective.yaml"
    atomic_write_text(p, cfg.to_yaml())
    return p
