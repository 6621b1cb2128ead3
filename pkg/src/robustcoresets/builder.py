"""Incremental construction of sparse robustified-posterior coresets.

One outer iteration runs: sample the current coreset posterior, draw a
minibatch, estimate residual correlations, add the best candidate, then
optimize the support weights with projected stochastic gradient steps.
Columns of the sufficient-statistic matrices are single datapoints, or
whole-group sums in group mode.
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset
from .exceptions import ConfigError
from .models import BetaConfig

__all__ = [
    "BuildConfig",
    "CoresetState",
    "TraceRecord",
    "center_f",
    "column_sds",
    "estimate_correlations",
    "select_next",
    "mc_gradient",
    "projected_step",
    "reweight",
    "build",
    "build_groups",
    "uniform_baseline",
    "expand_state",
    "write_trace_csv",
]

_SD_GUARD = 1e-12


@dataclass(frozen=True)
class BuildConfig:
    """Knobs of the incremental construction.

    iterations (M) outer rounds, minibatches of batch_size (B), num_samples
    (S) posterior draws per round, inner_steps (T) weight-update steps per
    round with step size step_scale / t, and an optional seed support whose
    entries start at init_weight.
    """

    iterations: int
    batch_size: int
    num_samples: int = 100
    inner_steps: int = 500
    step_scale: float = 1.0
    beta: BetaConfig = field(default_factory=BetaConfig)
    seed: int = 0
    group_mode: bool = False
    init_indices: tuple = ()
    init_weight: float = 1.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.num_samples < 2:
            raise ConfigError("num_samples must be >= 2 (centering needs it)")
        if self.inner_steps < 0:
            raise ConfigError("inner_steps must be >= 0")
        if not self.step_scale > 0:
            raise ConfigError("step_scale must be > 0")
        if len(set(self.init_indices)) != len(self.init_indices):
            raise ConfigError("init_indices must be unique")
        if self.init_weight < 0:
            raise ConfigError("init_weight must be nonnegative")


@dataclass
class CoresetState:
    """Sparse nonnegative weights over an ordered support.

    In group mode the support entries are group ids and each weight applies
    to every member of its group.
    """

    indices: np.ndarray
    weights: np.ndarray
    group_mode: bool = False

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=int)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.indices.shape != self.weights.shape or self.indices.ndim != 1:
            raise ConfigError("indices and weights must be aligned 1-D arrays")
        if len(np.unique(self.indices)) != len(self.indices):
            raise ConfigError("support indices must be unique")
        if np.any(self.weights < 0):
            raise ConfigError("weights must be nonnegative")

    @property
    def support_size(self) -> int:
        return len(self.indices)

    def total_weight(self) -> float:
        return float(self.weights.sum())

    def nonzero_count(self) -> int:
        return int(np.count_nonzero(self.weights))

    def weight_map(self) -> dict:
        return {int(i): float(w) for i, w in zip(self.indices, self.weights)}

    def copy(self) -> "CoresetState":
        return CoresetState(self.indices.copy(), self.weights.copy(), self.group_mode)

    def digest(self) -> str:
        h = hashlib.sha1()
        h.update(self.indices.tobytes())
        h.update(self.weights.tobytes())
        return h.hexdigest()[:12]


@dataclass(frozen=True)
class TraceRecord:
    """Per-iteration build telemetry; the CSV form drops the digest."""

    iteration: int
    selected_index: int
    support_size: int
    total_weight: float
    wallclock_ms: float
    weights_digest: str


def write_trace_csv(path, traces: Sequence[TraceRecord]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "selected_index", "support_size", "total_weight", "wallclock_ms"])
        for t in traces:
            writer.writerow([t.iteration, t.selected_index, t.support_size,
                             repr(t.total_weight), f"{t.wallclock_ms:.3f}"])


def expand_state(state: CoresetState, ds: Dataset):
    """Point-level (indices, weights) of a state, expanding groups to members."""
    if not state.group_mode:
        return state.indices, state.weights
    if ds.group_ids is None:
        raise ConfigError("group-mode state needs a dataset with group_ids")
    parts_idx, parts_w = [], []
    for gid, w in zip(state.indices, state.weights):
        members = np.flatnonzero(ds.group_ids == gid)
        parts_idx.append(members)
        parts_w.append(np.full(len(members), w))
    if not parts_idx:
        return np.empty(0, dtype=int), np.empty(0)
    return np.concatenate(parts_idx), np.concatenate(parts_w)


def center_f(samples, model, ds, indices, beta) -> np.ndarray:
    """(S, k) matrix of f values with every column centered across samples."""
    fvals = model.f_matrix(ds, indices, samples, beta)
    if fvals.shape[0] < 2:
        raise ConfigError("centering requires at least 2 posterior samples")
    return fvals - fvals.mean(axis=0, keepdims=True)


def column_sds(mat) -> np.ndarray:
    """Root mean square of each (already centered) column."""
    mat = np.asarray(mat, dtype=float)
    if mat.shape[1] == 0:
        return np.empty(0)
    return np.sqrt((mat * mat).mean(axis=0))


def _residual(g, g_prime, weights, n_total, batch_size):
    # r_s = (N/B) 1^T g'_s - w^T g_s; g' columns may be per-point or summed
    # per group, but their row sum is the minibatch point sum either way.
    r = (n_total / batch_size) * g_prime.sum(axis=1)
    if g.shape[1]:
        r = r - g @ weights
    return r


def estimate_correlations(g, g_prime, weights, n_total, batch_size):
    """Residual-alignment scores over coreset and minibatch columns.

    For each column the score is the sample covariance with the residual
    r_s = (N/B) 1^T g'_s - w^T g_s, divided by the column's root mean
    square. Columns with root mean square below 1e-12 score exactly 0.

    Returns:
        (scores over g columns, scores over g_prime columns).
    """
    g = np.asarray(g, dtype=float)
    g_prime = np.asarray(g_prime, dtype=float)
    weights = np.asarray(weights, dtype=float)
    n_samples = g_prime.shape[0]
    r = _residual(g, g_prime, weights, n_total, batch_size)

    def scores(mat):
        if mat.shape[1] == 0:
            return np.empty(0)
        cov = mat.T @ r / n_samples
        sd = column_sds(mat)
        ok = sd >= _SD_GUARD
        out = np.zeros(mat.shape[1])
        out[ok] = cov[ok] / sd[ok]
        return out

    return scores(g), scores(g_prime)


def select_next(corr, corr_prime, support_indices, batch_indices,
                support_valid=None, batch_valid=None) -> int:
    """Greedy candidate choice over the support and the minibatch.

    Support members compete with the absolute value of their score, points
    not yet in the support with the signed score. Degenerate columns
    (flagged False in the *_valid masks) lose to any non-degenerate
    candidate. Ties break toward the smallest dataset index.
    """
    support_indices = np.asarray(support_indices, dtype=int)
    batch_indices = np.asarray(batch_indices, dtype=int)
    in_support = set(int(i) for i in support_indices)
    candidates = []  # (index, score, valid)
    for j, idx in enumerate(support_indices):
        valid = True if support_valid is None else bool(support_valid[j])
        candidates.append((int(idx), abs(float(corr[j])), valid))
    for j, idx in enumerate(batch_indices):
        if int(idx) in in_support:
            continue
        valid = True if batch_valid is None else bool(batch_valid[j])
        candidates.append((int(idx), float(corr_prime[j]), valid))
    if not candidates:
        raise ConfigError("no candidates to select from")
    candidates.sort(key=lambda c: c[0])
    pool = [c for c in candidates if c[2]] or candidates
    best = pool[0]
    for cand in pool[1:]:
        if cand[1] > best[1]:
            best = cand
    return best[0]


def mc_gradient(g, g_prime, weights, n_total, batch_size) -> np.ndarray:
    """Monte Carlo estimate of the KL gradient over the support columns.

    Computes -(1/(S-1)) sum_s g_s * ((N/B) 1^T g'_s - w^T g_s). The Bessel
    denominator makes the estimate exactly unbiased for
    -Cov[f_support, (1 - w)^T f] under the sampling distribution.
    """
    g = np.asarray(g, dtype=float)
    g_prime = np.asarray(g_prime, dtype=float)
    weights = np.asarray(weights, dtype=float)
    n_samples = g.shape[0]
    r = _residual(g, g_prime, weights, n_total, batch_size)
    return -(g.T @ r) / (n_samples - 1)


def projected_step(weights, gradient, step) -> np.ndarray:
    """One projected descent step onto the nonnegative orthant."""
    return np.maximum(weights - step * np.asarray(gradient, dtype=float), 0.0)


class _Engine:
    """Shared per-build machinery: RNG streams, group membership, column sums."""

    def __init__(self, ds, model, cfg, group_mode):
        self.ds = ds
        self.model = model
        self.cfg = cfg
        self.group_mode = group_mode
        self.n_total = ds.n
        self.batch_size = min(cfg.batch_size, ds.n)
        seq = np.random.SeedSequence(cfg.seed)
        children = seq.spawn(3)
        self.sample_rng = np.random.default_rng(children[0])
        self.batch_rng = np.random.default_rng(children[1])
        self.model_rng = np.random.default_rng(children[2])
        self.sampler_cache = {}
        if group_mode:
            if ds.group_ids is None:
                raise ConfigError("group mode requires a dataset with group_ids")
            self.members = {int(g): np.flatnonzero(ds.group_ids == g)
                            for g in np.unique(ds.group_ids)}
            self.valid_ids = set(self.members)
        else:
            self.members = None
            self.valid_ids = None

    def check_id(self, idx):
        if self.group_mode:
            if int(idx) not in self.members:
                raise ConfigError(f"unknown group id {idx}")
        elif not 0 <= int(idx) < self.n_total:
            raise ConfigError(f"index {idx} outside dataset of size {self.n_total}")

    def expand(self, state: CoresetState):
        if not self.group_mode:
            return state.indices, state.weights
        member_lists = [self.members[int(g)] for g in state.indices]
        if not member_lists:
            return np.empty(0, dtype=int), np.empty(0)
        idx = np.concatenate(member_lists)
        w = np.concatenate([np.full(len(m), wt) for m, wt in zip(member_lists, state.weights)])
        return idx, w

    def sample(self, state: CoresetState):
        idx, w = self.expand(state)
        return self.model.sample_posterior(self.ds, idx, w, self.cfg.num_samples,
                                           self.sample_rng, beta=self.cfg.beta,
                                           cache=self.sampler_cache)

    def draw_batch(self):
        return self.batch_rng.choice(self.n_total, size=self.batch_size, replace=False)

    def vectors(self, state: CoresetState, batch, samples):
        """Centered support and minibatch columns for one round.

        Returns (g, g_prime, candidate_ids) where candidate_ids align with
        g_prime's columns; in group mode these are the batch's group ids (in
        ascending id order) and columns are member sums.
        """
        if not self.group_mode:
            joint = np.concatenate([state.indices, batch])
            centered = center_f(samples, self.model, self.ds, joint, self.cfg.beta)
            m = state.support_size
            return centered[:, :m], centered[:, m:], batch
        member_lists = [self.members[int(g)] for g in state.indices]
        support_points = np.concatenate(member_lists) if member_lists else np.empty(0, dtype=int)
        joint = np.concatenate([support_points, batch])
        centered = center_f(samples, self.model, self.ds, joint, self.cfg.beta)
        bounds = np.cumsum([0] + [len(m) for m in member_lists])
        g = np.empty((centered.shape[0], len(member_lists)))
        for j in range(len(member_lists)):
            g[:, j] = centered[:, bounds[j]:bounds[j + 1]].sum(axis=1)
        batch_part = centered[:, len(support_points):]
        batch_gids = self.ds.group_ids[batch]
        order = np.argsort(batch_gids, kind="stable")
        sorted_gids = batch_gids[order]
        uniq, starts = np.unique(sorted_gids, return_index=True)
        sums = np.add.reduceat(batch_part[:, order], starts, axis=1)
        return g, sums, uniq


def reweight(state: CoresetState, model, ds, cfg: BuildConfig, *,
             engine: Optional[_Engine] = None,
             gradient_fn: Optional[Callable] = None) -> CoresetState:
    """Optimize the support weights with projected stochastic gradient steps.

    Runs cfg.inner_steps rounds of: resample the posterior, redraw a
    minibatch, form the Monte Carlo gradient over the support, and step with
    size step_scale / t projected onto the nonnegative orthant. The support
    never grows here. `gradient_fn(state) -> array` substitutes the Monte
    Carlo gradient (used by diagnostics against the enumerable model).
    """
    if state.support_size == 0:
        raise ConfigError("reweight requires a nonempty support")
    if engine is None:
        engine = _Engine(ds, model, cfg, state.group_mode)
    state = state.copy()
    for t in range(1, cfg.inner_steps + 1):
        if gradient_fn is not None:
            grad = np.asarray(gradient_fn(state), dtype=float)
        else:
            samples = engine.sample(state)
            batch = engine.draw_batch()
            g, g_prime, _ = engine.vectors(state, batch, samples)
            grad = mc_gradient(g, g_prime, state.weights, engine.n_total, engine.batch_size)
        state.weights = projected_step(state.weights, grad, cfg.step_scale / t)
    return state


def _run_build(ds, model, cfg, group_mode, checkpoint_every, checkpoint_fn):
    engine = _Engine(ds, model, cfg, group_mode)
    for idx in cfg.init_indices:
        engine.check_id(idx)
    state = CoresetState(
        indices=np.asarray(cfg.init_indices, dtype=int),
        weights=np.full(len(cfg.init_indices), cfg.init_weight),
        group_mode=group_mode,
    )
    if hasattr(model, "after_reweight") and state.support_size:
        model = model.after_reweight(ds, *engine.expand(state), engine.model_rng)
        engine.model = model
    traces = []
    for iteration in range(1, cfg.iterations + 1):
        t_start = time.perf_counter()
        samples = engine.sample(state)
        batch = engine.draw_batch()
        g, g_prime, candidate_ids = engine.vectors(state, batch, samples)
        corr, corr_prime = estimate_correlations(
            g, g_prime, state.weights, engine.n_total, engine.batch_size)
        chosen = select_next(
            corr, corr_prime, state.indices, candidate_ids,
            support_valid=column_sds(g) >= _SD_GUARD,
            batch_valid=column_sds(g_prime) >= _SD_GUARD,
        )
        if chosen not in state.indices:
            state.indices = np.append(state.indices, chosen)
            state.weights = np.append(state.weights, 0.0)
        state = reweight(state, model, ds, cfg, engine=engine)
        if hasattr(model, "after_reweight"):
            model = model.after_reweight(ds, *engine.expand(state), engine.model_rng)
            engine.model = model
        traces.append(TraceRecord(
            iteration=iteration,
            selected_index=int(chosen),
            support_size=state.support_size,
            total_weight=state.total_weight(),
            wallclock_ms=(time.perf_counter() - t_start) * 1e3,
            weights_digest=state.digest(),
        ))
        if checkpoint_fn is not None and checkpoint_every is not None:
            if iteration % checkpoint_every == 0 or iteration == cfg.iterations:
                checkpoint_fn(iteration, state.copy(), model)
    return state, traces


def build(ds: Dataset, model, cfg: BuildConfig, *,
          checkpoint_every: Optional[int] = None,
          checkpoint_fn: Optional[Callable] = None):
    """Run the full incremental construction.

    Returns:
        (final CoresetState, list of TraceRecord). checkpoint_fn(iteration,
        state, model), when given, fires every checkpoint_every iterations
        and at the final one; it must not touch the builder's RNG streams.
    """
    group_mode = cfg.group_mode
    if group_mode:
        return build_groups(ds, model, cfg, checkpoint_every=checkpoint_every,
                            checkpoint_fn=checkpoint_fn)
    return _run_build(ds, model, cfg, False, checkpoint_every, checkpoint_fn)


def build_groups(ds: Dataset, model, cfg: BuildConfig, *,
                 checkpoint_every: Optional[int] = None,
                 checkpoint_fn: Optional[Callable] = None):
    """Group-mode construction: columns are member sums, support entries group ids."""
    if ds.group_ids is None:
        raise ConfigError("build_groups requires a dataset with group_ids")
    return _run_build(ds, model, cfg, True, checkpoint_every, checkpoint_fn)


def uniform_baseline(ds: Dataset, size: int, seed: int) -> CoresetState:
    """Uniformly random subset of `size` rows, each carrying weight N / size.

    The same seed yields nested subsets across sizes (a shared permutation
    prefix), so baseline trajectories grow consistently.
    """
    if not 1 <= size <= ds.n:
        raise ConfigError(f"size must lie in 1..{ds.n}")
    perm = np.random.default_rng(seed).permutation(ds.n)
    return CoresetState(indices=perm[:size], weights=np.full(size, ds.n / size))
