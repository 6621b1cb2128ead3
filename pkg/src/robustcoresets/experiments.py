"""Experiment orchestration: multi-trial, multi-method coreset runs with
checkpointed metrics and CSV emission.

A run is a grid of independent (contamination rate, method, trial) cells.
Each cell generates and contaminates its data, constructs a summary with the
requested method, evaluates metrics at every checkpoint, and returns metric
and trace rows. Cells are deterministic functions of (config, seeds), so the
merged metrics CSV is byte-identical across repeated runs.
"""

from __future__ import annotations

import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import builder as bld
from .data import (
    ContaminationSpec,
    Dataset,
    TableSchema,
    apply_contamination,
    load_table,
    load_sparse,
    pca_project,
    split_train_test,
    standardize,
)
from .evaluation import (
    MetricPoint,
    outlier_fraction,
    predictive_accuracy,
    reverse_kl_vs_clean,
    rmse,
    write_metrics_csv,
)
from .exceptions import ConfigError
from .models import BetaConfig, GaussianModel, LogisticModel, NeuralLinearModel

__all__ = [
    "MethodSpec",
    "ExperimentConfig",
    "load_config",
    "run_experiment",
    "aggregate",
    "checkpoint_grid",
    "make_gaussian_blob",
    "make_logistic_data",
    "make_grouped_logistic",
    "bundled_path",
]

EXPERIMENTS = ("gaussian", "logistic", "neural-linear", "groups")
METHOD_NAMES = ("beta-cores", "classical-coreset", "uniform")


@dataclass(frozen=True)
class MethodSpec:
    """One summarization method: beta-cores needs a beta value."""

    name: str
    beta: Optional[float] = None

    def __post_init__(self):
        if self.name not in METHOD_NAMES:
            raise ConfigError(f"unknown method {self.name!r}")
        if self.name == "beta-cores" and (self.beta is None or not self.beta > 0):
            raise ConfigError("beta-cores requires beta > 0")

    def label(self) -> str:
        if self.name == "beta-cores":
            return f"beta-cores-b{self.beta:g}"
        return self.name

    def beta_column(self) -> Optional[float]:
        if self.name == "beta-cores":
            return self.beta
        if self.name == "classical-coreset":
            return 0.0
        return None


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    trials: int
    methods: tuple
    rates: tuple
    data: dict
    build: dict
    model: dict = field(default_factory=dict)
    contamination: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "results"
    workers: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.methods:
            raise ConfigError("at least one method is required")
        if not self.rates:
            raise ConfigError("at least one contamination rate is required")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


def load_config(source) -> ExperimentConfig:
    """Build an ExperimentConfig from a JSON file path or a plain dict."""
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            raw = json.load(fh)
    else:
        raw = dict(source)
    methods = []
    for entry in raw.get("methods", []):
        if isinstance(entry, str):
            methods.append(MethodSpec(name=entry))
        else:
            methods.append(MethodSpec(name=entry["name"], beta=entry.get("beta")))
    known = {"experiment", "trials", "methods", "rates", "data", "build", "model",
             "contamination", "evaluation", "seed", "output_dir", "workers"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(
        experiment=raw.get("experiment", ""),
        trials=int(raw.get("trials", 1)),
        methods=tuple(methods),
        rates=tuple(float(r) for r in raw.get("rates", [])),
        data=dict(raw.get("data", {})),
        build=dict(raw.get("build", {})),
        model=dict(raw.get("model", {})),
        contamination=dict(raw.get("contamination", {})),
        evaluation=dict(raw.get("evaluation", {})),
        seed=int(raw.get("seed", 0)),
        output_dir=str(raw.get("output_dir", "results")),
        workers=int(raw.get("workers", 1)),
    )


def checkpoint_grid(iterations: int, every: int) -> list[int]:
    grid = list(range(every, iterations + 1, every))
    if not grid or grid[-1] != iterations:
        grid.append(iterations)
    return grid


def _seed(root, *path) -> int:
    return int(np.random.SeedSequence([int(root), *map(int, path)]).generate_state(1)[0])


def _stable_key(text: str) -> int:
    import zlib

    return zlib.crc32(text.encode("utf-8"))


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("robustcoresets") / "bundled" / name))


# ---------------------------------------------------------------------------
# synthetic data


def make_gaussian_blob(n: int, d: int, mean: float, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    return Dataset(features=mean + rng.standard_normal((n, d)))


def make_logistic_data(n: int, d: int, separation: float, seed: int) -> Dataset:
    """Linearly separable-ish binary data: labels drawn from a scaled logit."""
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal(d + 1)
    theta *= separation / np.linalg.norm(theta)
    x = rng.standard_normal((n, d))
    logits = x @ theta[:d] + theta[d]
    prob = 1.0 / (1.0 + np.exp(-logits))
    labels = np.where(rng.random(n) < prob, 1.0, -1.0)
    return Dataset(features=x, labels=labels)


def make_grouped_logistic(n_groups: int, group_size: int, d: int, separation: float,
                          spread: float, seed: int) -> Dataset:
    """Binary data split into subpopulations with shifted feature centers."""
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal(d + 1)
    theta *= separation / np.linalg.norm(theta)
    centers = spread * rng.standard_normal((n_groups, d))
    feats, labels, gids = [], [], []
    for g in range(n_groups):
        x = centers[g] + rng.standard_normal((group_size, d))
        logits = x @ theta[:d] + theta[d]
        prob = 1.0 / (1.0 + np.exp(-logits))
        y = np.where(rng.random(group_size) < prob, 1.0, -1.0)
        feats.append(x)
        labels.append(y)
        gids.append(np.full(group_size, g))
    return Dataset(features=np.vstack(feats), labels=np.concatenate(labels),
                   group_ids=np.concatenate(gids))


def _load_file_dataset(data_cfg) -> Dataset:
    kind = data_cfg["kind"]
    if kind == "bundled-housing":
        path = bundled_path("housing.csv")
        schema = TableSchema(label_column="target", label_kind="real")
        return load_table(path, schema)
    if kind == "csv":
        schema = TableSchema(
            label_column=data_cfg.get("label_column"),
            label_kind=data_cfg.get("label_kind", "binary"),
            feature_columns=data_cfg.get("feature_columns"),
            group_columns=tuple(data_cfg.get("group_columns", ())),
        )
        return load_table(data_cfg["path"], schema)
    if kind == "libsvm":
        return load_sparse(data_cfg["path"], int(data_cfg["d"]))
    raise ConfigError(f"unknown data kind {kind!r}")


def _prepare_data(cfg: ExperimentConfig, trial: int):
    """Generate or load the trial's data and apply the preprocessing pipeline.

    Returns (train Dataset, test Dataset or None).
    """
    data_cfg = cfg.data
    kind = data_cfg.get("kind")
    data_seed = _seed(cfg.seed, trial, 0)
    if kind == "gaussian-blob":
        ds = make_gaussian_blob(int(data_cfg["n"]), int(data_cfg["d"]),
                                float(data_cfg.get("mean", 1.0)), data_seed)
    elif kind == "logistic-synthetic":
        ds = make_logistic_data(int(data_cfg["n"]), int(data_cfg["d"]),
                                float(data_cfg.get("separation", 6.0)), data_seed)
    elif kind == "grouped-logistic":
        ds = make_grouped_logistic(
            int(data_cfg["n_groups"]), int(data_cfg["group_size"]), int(data_cfg["d"]),
            float(data_cfg.get("separation", 6.0)), float(data_cfg.get("spread", 1.0)),
            data_seed)
    else:
        ds = _load_file_dataset(data_cfg)

    if data_cfg.get("standardize", False):
        ds, _, _ = standardize(ds)
    if data_cfg.get("standardize_labels", False):
        labels = ds.labels
        scale = labels.std()
        ds = Dataset(features=ds.features,
                     labels=(labels - labels.mean()) / (scale if scale > 1e-12 else 1.0),
                     group_ids=ds.group_ids, outlier_mask=ds.outlier_mask)
    if data_cfg.get("pca"):
        ds = pca_project(ds, int(data_cfg["pca"]))

    test_fraction = data_cfg.get("test_fraction")
    if test_fraction:
        split_seed = _seed(cfg.seed, trial, 1)
        train, test = split_train_test(ds, float(test_fraction),
                                       bool(data_cfg.get("balanced_test", False)), split_seed)
        return train, test
    return ds, None


def _contaminate(cfg: ExperimentConfig, train: Dataset, rate: float, trial: int) -> Dataset:
    cont = cfg.contamination
    kind = cont.get("kind")
    if kind is None:
        raise ConfigError("contamination.kind is required (use rate 0 for clean runs)")
    seed = _seed(cfg.seed, trial, 2)
    params = dict(cont.get("params", {}))
    if kind == "per-group":
        # rate acts as an on/off switch for the configured per-group map
        rate_map = {int(k): (float(v) if rate > 0 else 0.0)
                    for k, v in params["rate_map"].items()}
        params["rate_map"] = rate_map
    spec = ContaminationSpec(kind=kind, rate=rate, seed=seed, params=params)
    return apply_contamination(train, spec)


def _build_config(cfg: ExperimentConfig, method: MethodSpec, trial: int,
                  group_mode=False, init_indices=()) -> bld.BuildConfig:
    b = cfg.build
    if method.name == "beta-cores":
        beta = BetaConfig(beta=float(method.beta))
    else:
        beta = BetaConfig.classical_mode()
    return bld.BuildConfig(
        iterations=int(b["iterations"]),
        batch_size=int(b["batch_size"]),
        num_samples=int(b.get("num_samples", 100)),
        inner_steps=int(b.get("inner_steps", 500)),
        step_scale=float(b.get("step_scale", 1.0)),
        beta=beta,
        seed=_seed(cfg.seed, trial, 3, _stable_key(method.label())),
        group_mode=group_mode,
        init_indices=tuple(init_indices),
        init_weight=float(b.get("init_weight", 1.0)),
    )


def _uniform_group_state(ds: Dataset, n_groups: int, seed: int) -> bld.CoresetState:
    """Random group prefix with member weights summing to N in total mass."""
    gids = np.unique(ds.group_ids)
    perm = np.random.default_rng(seed).permutation(len(gids))
    chosen = gids[perm[:n_groups]]
    member_count = int(np.isin(ds.group_ids, chosen).sum())
    weight = ds.n / member_count if member_count else 0.0
    return bld.CoresetState(indices=chosen, weights=np.full(len(chosen), weight),
                            group_mode=True)


# ---------------------------------------------------------------------------
# per-family cells


def _gaussian_model(cfg: ExperimentConfig, d: int) -> GaussianModel:
    m = cfg.model
    return GaussianModel(
        mu0=np.full(d, float(m.get("prior_mean", 0.0))),
        Sigma0=float(m.get("prior_cov_scale", 1.0)) * np.eye(d),
        Sigma=float(m.get("likelihood_cov_scale", 1.0)) * np.eye(d),
    )


def _logistic_model(cfg: ExperimentConfig, d: int) -> LogisticModel:
    scale = float(cfg.model.get("prior_scale", 1.0))
    return LogisticModel(mu0=np.zeros(d + 1), Sigma0=scale**2 * np.eye(d + 1))


def _neural_model(cfg: ExperimentConfig, d: int, trial: int) -> NeuralLinearModel:
    m = cfg.model
    rng = np.random.default_rng(_seed(cfg.seed, trial, 4))
    return NeuralLinearModel.create(
        d, int(m.get("hidden", 30)), rng,
        sigma=float(m.get("sigma", 1.0)),
        sigma0=float(m.get("sigma0", 1.0)),
        use_batchnorm=bool(m.get("batchnorm", False)),
        train_steps=int(m.get("train_steps", 1000)),
        learning_rate=float(m.get("learning_rate", 0.05)),
        train_batch=int(m.get("train_batch", 32)),
    )


def _metric_rows(trial, method, rate, size, values) -> list[MetricPoint]:
    return [MetricPoint(trial=trial, method=method.name, beta=method.beta_column(),
                        rate=rate, size=size, metric=k, value=float(v))
            for k, v in values.items()]


def _run_cell(cfg: ExperimentConfig, rate: float, method: MethodSpec, trial: int):
    """Run one (rate, method, trial) cell; returns (metric rows, trace rows)."""
    if cfg.experiment == "gaussian":
        return _gaussian_cell(cfg, rate, method, trial)
    if cfg.experiment == "logistic":
        return _logistic_cell(cfg, rate, method, trial)
    if cfg.experiment == "neural-linear":
        return _neural_cell(cfg, rate, method, trial)
    if cfg.experiment == "groups":
        return _groups_cell(cfg, rate, method, trial)
    raise ConfigError(f"unknown experiment {cfg.experiment!r}")


def _gaussian_cell(cfg, rate, method, trial):
    train, _ = _prepare_data(cfg, trial)
    ds = _contaminate(cfg, train, rate, trial)
    model = _gaussian_model(cfg, ds.dim)
    every = int(cfg.evaluation.get("checkpoint_every", 10))
    points = []

    def evaluate(size, state):
        points.extend(_metric_rows(trial, method, rate, size, {
            "reverse_kl": reverse_kl_vs_clean(state, model, ds),
            "outlier_fraction": outlier_fraction(state, ds),
            "support_size": state.support_size,
        }))

    if method.name == "uniform":
        seed = _seed(cfg.seed, trial, 5)
        for size in checkpoint_grid(int(cfg.build["iterations"]), every):
            evaluate(size, bld.uniform_baseline(ds, min(size, ds.n), seed))
        return points, []
    bcfg = _build_config(cfg, method, trial)
    _, traces = bld.build(ds, model, bcfg, checkpoint_every=every,
                          checkpoint_fn=lambda it, st, _m: evaluate(it, st))
    return points, traces


def _eval_logistic_state(cfg, model, state, ds_train, test, trial, size):
    draws = int(cfg.evaluation.get("laplace_samples", 500))
    seed = _seed(cfg.seed, trial, 6, size)
    idx, w = bld.expand_state(state, ds_train)
    rng = np.random.default_rng(seed)
    samples = model.sample_posterior(ds_train, idx, w, draws, rng,
                                     beta=BetaConfig.classical_mode())
    return predictive_accuracy(samples, test)


def _logistic_cell(cfg, rate, method, trial):
    train, test = _prepare_data(cfg, trial)
    if test is None:
        raise ConfigError("logistic experiment needs data.test_fraction")
    ds = _contaminate(cfg, train, rate, trial)
    model = _logistic_model(cfg, ds.dim)
    every = int(cfg.evaluation.get("checkpoint_every", 10))
    points = []

    def evaluate(size, state):
        points.extend(_metric_rows(trial, method, rate, size, {
            "accuracy": _eval_logistic_state(cfg, model, state, ds, test, trial, size),
            "outlier_fraction": outlier_fraction(state, ds),
            "support_size": state.support_size,
        }))

    if method.name == "uniform":
        seed = _seed(cfg.seed, trial, 5)
        for size in checkpoint_grid(int(cfg.build["iterations"]), every):
            evaluate(size, bld.uniform_baseline(ds, min(size, ds.n), seed))
        return points, []
    bcfg = _build_config(cfg, method, trial)
    _, traces = bld.build(ds, model, bcfg, checkpoint_every=every,
                          checkpoint_fn=lambda it, st, _m: evaluate(it, st))
    return points, traces


def _inlier_group_init(ds: Dataset, count: int, seed: int) -> tuple:
    """Uniformly random choice among groups containing no masked rows."""
    clean = [int(g) for g in np.unique(ds.group_ids)
             if not ds.outlier_mask[ds.group_ids == g].any()]
    if len(clean) < count:
        raise ConfigError(f"only {len(clean)} clean groups available, need {count}")
    rng = np.random.default_rng(seed)
    return tuple(int(g) for g in rng.choice(clean, size=count, replace=False))


def _neural_cell(cfg, rate, method, trial):
    train, test = _prepare_data(cfg, trial)
    if test is None:
        raise ConfigError("neural-linear experiment needs data.test_fraction")
    ds = _contaminate(cfg, train, rate, trial)
    model = _neural_model(cfg, ds.dim, trial)
    every = int(cfg.evaluation.get("checkpoint_every", 1))
    init_groups = int(cfg.build.get("init_groups", 0))
    init = ()
    if init_groups:
        if cfg.build.get("init_from_inliers", False):
            init = _inlier_group_init(ds, init_groups, _seed(cfg.seed, trial, 7))
        else:
            gids = np.unique(ds.group_ids)
            rng = np.random.default_rng(_seed(cfg.seed, trial, 7))
            init = tuple(int(g) for g in rng.choice(gids, size=init_groups, replace=False))
    points = []

    def evaluate(size, state, current_model):
        idx, w = bld.expand_state(state, ds)
        posterior = current_model.blr_posterior(ds, idx, w)
        points.extend(_metric_rows(trial, method, rate, size, {
            "rmse": rmse(current_model, posterior, test),
            "outlier_fraction": outlier_fraction(state, ds),
            "support_size": state.support_size,
        }))

    if method.name == "uniform":
        # matched protocol: same incremental sizes, same per-round training budget
        seed = _seed(cfg.seed, trial, 5)
        rng = np.random.default_rng(_seed(cfg.seed, trial, 8))
        current = model
        grid = checkpoint_grid(int(cfg.build["iterations"]), every)
        for size in grid:
            state = _uniform_group_state(ds, min(init_groups + size, len(np.unique(ds.group_ids))), seed)
            idx, w = bld.expand_state(state, ds)
            current = current.after_reweight(ds, idx, w, rng)
            evaluate(size, state, current)
        return points, []

    bcfg = _build_config(cfg, method, trial, group_mode=True, init_indices=init)
    _, traces = bld.build_groups(ds, model, bcfg, checkpoint_every=every,
                                 checkpoint_fn=lambda it, st, m: evaluate(it, st, m))
    return points, traces


def _groups_cell(cfg, rate, method, trial):
    train, test = _prepare_data(cfg, trial)
    if test is None:
        raise ConfigError("groups experiment needs data.test_fraction")
    ds = _contaminate(cfg, train, rate, trial)
    model = _logistic_model(cfg, ds.dim)
    every = int(cfg.evaluation.get("checkpoint_every", 1))
    rate_map = {int(k): float(v) for k, v in cfg.contamination["params"]["rate_map"].items()}
    clean_groups = {g for g, r in rate_map.items() if r == 0.0}
    points = []

    def evaluate(size, state):
        idx, w = bld.expand_state(state, ds)
        total = w.sum()
        clean_mass = 0.0
        if total > 0 and state.group_mode:
            member_gids = ds.group_ids[idx]
            clean_mass = float(w[np.isin(member_gids, list(clean_groups))].sum() / total)
        elif total > 0:
            clean_mass = float(w[np.isin(ds.group_ids[idx], list(clean_groups))].sum() / total)
        points.extend(_metric_rows(trial, method, rate, size, {
            "accuracy": _eval_logistic_state(cfg, model, state, ds, test, trial, size),
            "outlier_fraction": outlier_fraction(state, ds),
            "group_clean_mass": clean_mass,
            "support_size": state.support_size,
        }))

    if method.name == "uniform":
        seed = _seed(cfg.seed, trial, 5)
        for size in checkpoint_grid(int(cfg.build["iterations"]), every):
            n_groups = len(np.unique(ds.group_ids))
            evaluate(size, _uniform_group_state(ds, min(size, n_groups), seed))
        return points, []
    bcfg = _build_config(cfg, method, trial, group_mode=True)
    _, traces = bld.build_groups(ds, model, bcfg, checkpoint_every=every,
                                 checkpoint_fn=lambda it, st, _m: evaluate(it, st))
    return points, traces


# ---------------------------------------------------------------------------
# run + aggregate


def _run_cell_entry(args):
    cfg, rate, method, trial = args
    try:
        points, traces = _run_cell(cfg, rate, method, trial)
        return (rate, method.label(), trial), points, traces, None
    except Exception as exc:  # cell isolation: other cells proceed
        return (rate, method.label(), trial), [], [], f"{type(exc).__name__}: {exc}"


def run_experiment(cfg: ExperimentConfig, output_dir: Optional[str] = None) -> dict:
    """Run every (rate, method, trial) cell and write metrics + trace CSVs.

    Returns a dict with the metrics CSV path, the traces directory, and any
    per-cell errors. Failed cells are reported and skipped; the metrics file
    contains all successful cells in a canonical deterministic order.
    """
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    traces_dir = out / "traces"
    traces_dir.mkdir(exist_ok=True)

    tasks = [(cfg, rate, method, trial)
             for rate in cfg.rates for method in cfg.methods
             for trial in range(cfg.trials)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            outcomes = list(pool.map(_run_cell_entry, tasks))
    else:
        outcomes = [_run_cell_entry(t) for t in tasks]

    all_points, errors = [], []
    for (rate, label, trial), points, traces, error in outcomes:
        if error is not None:
            errors.append({"cell": {"rate": rate, "method": label, "trial": trial},
                           "error": error})
            print(json.dumps({"cell_error": errors[-1]}), file=sys.stderr)
            continue
        all_points.extend(points)
        if traces:
            name = f"{label}_F{rate:g}_trial{trial}.csv"
            bld.write_trace_csv(traces_dir / name, traces)

    metrics_path = out / "metrics.csv"
    write_metrics_csv(metrics_path, all_points)
    return {"metrics": str(metrics_path), "traces_dir": str(traces_dir), "errors": errors}


def aggregate(points, out_path=None) -> list[dict]:
    """Median and quartiles across trials per (method, beta, F, size, metric).

    Quartiles use linear interpolation between order statistics. Accepts a
    list of MetricPoints or a metrics CSV path; optionally writes a summary
    CSV.
    """
    from .evaluation import read_metrics_csv

    if isinstance(points, (str, Path)):
        points = read_metrics_csv(points)
    if not points:
        raise ConfigError("nothing to aggregate")
    groups = {}
    for p in points:
        groups.setdefault((p.method, p.beta, p.rate, p.size, p.metric), []).append(p.value)
    rows = []
    for key in sorted(groups, key=lambda k: (k[0], k[1] if k[1] is not None else -1.0,
                                             k[2], k[3], k[4])):
        values = np.asarray(groups[key])
        method, beta, rate, size, metric = key
        rows.append({
            "method": method, "beta": beta, "F": rate, "size": size, "metric": metric,
            "median": float(np.percentile(values, 50)),
            "q25": float(np.percentile(values, 25)),
            "q75": float(np.percentile(values, 75)),
        })
    if out_path is not None:
        import csv as _csv

        with open(out_path, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["method", "beta", "F", "size", "metric", "median", "q25", "q75"])
            for r in rows:
                writer.writerow([r["method"], "" if r["beta"] is None else repr(r["beta"]),
                                 repr(r["F"]), r["size"], r["metric"],
                                 repr(r["median"]), repr(r["q25"]), repr(r["q75"])])
    return rows
