"""Dataset container, loaders, preprocessing, and contamination protocols.

Everything here is pure given (inputs, seed): the same seed reproduces the
same output bit for bit, and a Dataset is never mutated in place.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .exceptions import DataError

__all__ = [
    "Dataset",
    "TableSchema",
    "ContaminationSpec",
    "load_table",
    "load_sparse",
    "standardize",
    "pca_project",
    "split_train_test",
    "contaminate_gaussian_shift",
    "contaminate_supervised",
    "contaminate_minibatches",
    "contaminate_per_group",
    "assign_groups",
    "apply_contamination",
]


@dataclass(frozen=True)
class Dataset:
    """Immutable feature matrix with optional labels, groups and outlier mask.

    Attributes:
        features: (N, d) float array, all entries finite.
        labels: optional (N,) float array; for classification every entry
            must be -1 or +1.
        group_ids: optional (N,) int array of small nonnegative group codes.
        outlier_mask: optional (N,) bool array marking contaminated rows.
            Ground truth for evaluation only; construction code never reads it.
    """

    features: np.ndarray
    labels: Optional[np.ndarray] = None
    group_ids: Optional[np.ndarray] = None
    outlier_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DataError(f"features must be a nonempty 2-D matrix, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("features contain non-finite entries")
        object.__setattr__(self, "features", x)
        n = x.shape[0]
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=float)
            if y.shape != (n,):
                raise DataError(f"labels must have length {n}, got shape {y.shape}")
            if not np.all(np.isfinite(y)):
                raise DataError("labels contain non-finite entries")
            object.__setattr__(self, "labels", y)
        if self.group_ids is not None:
            g = np.asarray(self.group_ids, dtype=int)
            if g.shape != (n,):
                raise DataError(f"group_ids must have length {n}, got shape {g.shape}")
            if np.any(g < 0):
                raise DataError("group_ids must be nonnegative")
            object.__setattr__(self, "group_ids", g)
        if self.outlier_mask is not None:
            m = np.asarray(self.outlier_mask, dtype=bool)
            if m.shape != (n,):
                raise DataError(f"outlier_mask must have exactly {n} entries, got shape {m.shape}")
            object.__setattr__(self, "outlier_mask", m)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def has_binary_labels(self) -> bool:
        if self.labels is None:
            return False
        return bool(np.all(np.isin(self.labels, (-1.0, 1.0))))

    def subset(self, idx: np.ndarray) -> "Dataset":
        """Row-indexed view copied into a new Dataset."""
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
            group_ids=None if self.group_ids is None else self.group_ids[idx],
            outlier_mask=None if self.outlier_mask is None else self.outlier_mask[idx],
        )


@dataclass(frozen=True)
class TableSchema:
    """Column roles for :func:`load_table`.

    label_column None declares an unsupervised table. label_kind "binary"
    remaps {0,1} labels to {-1,+1} and rejects anything outside
    {-1,0,+1}; "real" keeps labels as parsed.
    """

    label_column: Optional[str] = None
    label_kind: str = "binary"
    feature_columns: Optional[Sequence[str]] = None
    group_columns: Sequence[str] = ()

    def __post_init__(self):
        if self.label_kind not in ("binary", "real"):
            raise DataError(f"unknown label_kind {self.label_kind!r}")


def _remap_binary_labels(raw: np.ndarray) -> np.ndarray:
    values = set(np.unique(raw))
    if values <= {-1.0, 1.0}:
        return raw
    if values <= {0.0, 1.0}:
        return np.where(raw > 0.5, 1.0, -1.0)
    bad = sorted(values - {-1.0, 0.0, 1.0})
    raise DataError(f"binary labels must lie in {{0,1}} or {{-1,+1}}, found {bad}")


def load_table(path, schema: TableSchema) -> Dataset:
    """Load a comma-separated UTF-8 table with a header row.

    Args:
        path: file path.
        schema: column roles; see :class:`TableSchema`.

    Returns:
        Dataset with one row per data line. Binary labels are remapped to
        {-1,+1}; group columns are coded to dense integer ids.

    Raises:
        DataError: empty file, malformed row (wrong field count), or a
            non-numeric feature/label value; messages carry the offending
            1-based data row number.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: no rows") from None
        header = [h.strip() for h in header]
        rows = [row for row in reader if row and any(c.strip() for c in row)]
    if not rows:
        raise DataError(f"{path}: no rows")

    col_index = {name: i for i, name in enumerate(header)}
    for name in [schema.label_column, *schema.group_columns]:
        if name is not None and name not in col_index:
            raise DataError(f"{path}: column {name!r} not in header {header}")
    if schema.feature_columns is not None:
        feature_names = list(schema.feature_columns)
        for name in feature_names:
            if name not in col_index:
                raise DataError(f"{path}: column {name!r} not in header {header}")
    else:
        excluded = {schema.label_column, *schema.group_columns}
        feature_names = [h for h in header if h not in excluded]
    if not feature_names:
        raise DataError(f"{path}: no feature columns")

    n = len(rows)
    features = np.empty((n, len(feature_names)), dtype=float)
    labels = np.empty(n, dtype=float) if schema.label_column is not None else None
    group_cols = [[] for _ in schema.group_columns]
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r}: expected {len(header)} fields, got {len(row)}")
        for j, name in enumerate(feature_names):
            cell = row[col_index[name]].strip()
            try:
                features[r - 1, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {r}: non-numeric value {cell!r} in column {name!r}") from None
        if labels is not None:
            cell = row[col_index[schema.label_column]].strip()
            try:
                labels[r - 1] = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {r}: non-numeric label {cell!r}") from None
        for g, name in enumerate(schema.group_columns):
            group_cols[g].append(row[col_index[name]].strip())

    if labels is not None and schema.label_kind == "binary":
        labels = _remap_binary_labels(labels)
    group_ids = _encode_group_keys(group_cols) if schema.group_columns else None
    return Dataset(features=features, labels=labels, group_ids=group_ids)


def load_sparse(path, d: int) -> Dataset:
    """Load a sparse "label idx:val idx:val ..." file into a dense Dataset.

    Indices are 1-based and must not exceed d; unset coordinates are zero.
    Labels are remapped to {-1,+1} as in :func:`load_table`.
    """
    if d < 1:
        raise DataError("d must be >= 1")
    rows = []
    labels = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            try:
                labels.append(float(parts[0]))
            except ValueError:
                raise DataError(f"{path}: line {lineno}: bad label {parts[0]!r}") from None
            row = np.zeros(d)
            seen = set()
            for tok in parts[1:]:
                idx_str, _, val_str = tok.partition(":")
                try:
                    idx = int(idx_str)
                    val = float(val_str)
                except ValueError:
                    raise DataError(f"{path}: line {lineno}: bad entry {tok!r}") from None
                if not 1 <= idx <= d:
                    raise DataError(f"{path}: line {lineno}: index {idx} outside 1..{d}")
                if idx in seen:
                    raise DataError(f"{path}: line {lineno}: duplicate index {idx}")
                seen.add(idx)
                row[idx - 1] = val
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no rows")
    return Dataset(features=np.vstack(rows), labels=_remap_binary_labels(np.asarray(labels)))


def standardize(ds: Dataset) -> tuple[Dataset, np.ndarray, np.ndarray]:
    """Scale each feature column to empirical mean 0 and standard deviation 1.

    Constant columns are mapped to zero with their scale recorded as 1, so
    the transform is always defined and idempotent.

    Returns:
        (standardized dataset, column means, column scales).
    """
    if ds.n < 2:
        raise DataError("standardize needs at least 2 rows")
    means = ds.features.mean(axis=0)
    scales = ds.features.std(axis=0)
    scales = np.where(scales < 1e-12, 1.0, scales)
    return replace(ds, features=(ds.features - means) / scales), means, scales


def pca_project(ds: Dataset, k: int) -> Dataset:
    """Project features onto the top-k principal directions.

    Directions are eigenvectors of the sample covariance (denominator N-1)
    in descending eigenvalue order, with a deterministic sign convention
    (largest-magnitude loading positive). Expects standardized input.
    """
    if not 1 <= k <= ds.dim:
        raise DataError(f"k must lie in 1..{ds.dim}, got {k}")
    centered = ds.features - ds.features.mean(axis=0)
    cov = centered.T @ centered / (ds.n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:k]
    directions = eigvecs[:, order]
    pivot = np.argmax(np.abs(directions), axis=0)
    signs = np.sign(directions[pivot, np.arange(k)])
    signs[signs == 0] = 1.0
    return replace(ds, features=centered @ (directions * signs))


def split_train_test(ds: Dataset, test_fraction: float, balanced: bool, seed: int) -> tuple[Dataset, Dataset]:
    """Split rows into disjoint train/test Datasets.

    Unbalanced: the test set is round(test_fraction * N) uniformly random
    rows. Balanced (binary labels required): the test set draws
    floor(round(test_fraction * N) / 2) rows per class, capped at the size
    of the smaller class, so both classes appear in equal counts; all other
    rows go to train.
    """
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    n_test = int(round(test_fraction * ds.n))
    if balanced:
        if not ds.has_binary_labels():
            raise DataError("balanced split requires binary {-1,+1} labels")
        pos = np.flatnonzero(ds.labels == 1.0)
        neg = np.flatnonzero(ds.labels == -1.0)
        if len(pos) == 0 or len(neg) == 0:
            raise DataError("balanced split requires both classes to be present")
        per_class = min(n_test // 2, len(pos), len(neg))
        test_idx = np.concatenate([
            rng.choice(pos, size=per_class, replace=False),
            rng.choice(neg, size=per_class, replace=False),
        ])
        test_idx.sort()
    else:
        test_idx = np.sort(rng.permutation(ds.n)[:n_test])
    in_test = np.zeros(ds.n, dtype=bool)
    in_test[test_idx] = True
    return ds.subset(np.flatnonzero(~in_test)), ds.subset(test_idx)


def contaminate_gaussian_shift(ds: Dataset, rate: float, shift_mean, seed: int) -> Dataset:
    """Replace a random floor(rate * N) row subset with draws from a shifted Gaussian.

    Replacement rows are iid normal with mean shift_mean and identity
    covariance. The outlier mask marks exactly the replaced rows.
    """
    if ds.labels is not None:
        raise DataError("gaussian-shift contamination applies to unsupervised data")
    if not 0.0 <= rate <= 1.0:
        raise DataError("rate must lie in [0, 1]")
    shift = np.broadcast_to(np.asarray(shift_mean, dtype=float), (ds.dim,))
    rng = np.random.default_rng(seed)
    n_out = int(np.floor(rate * ds.n))
    chosen = rng.choice(ds.n, size=n_out, replace=False)
    features = ds.features.copy()
    features[chosen] = shift + rng.standard_normal((n_out, ds.dim))
    mask = np.zeros(ds.n, dtype=bool)
    mask[chosen] = True
    return replace(ds, features=features, outlier_mask=mask)


def _corrupt_feature_half(features, rows, coords, noise_sd, rng):
    features[np.ix_(rows, coords)] = rng.normal(0.0, noise_sd, size=(len(rows), len(coords)))


def contaminate_supervised(ds: Dataset, rate: float, noise_sd: float, seed: int) -> Dataset:
    """Inject feature-noise and label-flip outliers into a labeled dataset.

    Two disjoint uniformly random subsets of size floor(rate * N) are drawn.
    The first has a fixed random half of the feature coordinates (the same
    floor(d/2) coordinates for every affected row) replaced by iid
    normal(0, noise_sd**2) draws; the second has its binary labels negated.
    The mask marks the union.
    """
    if ds.labels is None:
        raise DataError("supervised contamination requires labels")
    if not 0.0 <= rate <= 0.5:
        raise DataError("rate must lie in [0, 0.5] so two disjoint subsets fit")
    rng = np.random.default_rng(seed)
    k = int(np.floor(rate * ds.n))
    if 2 * k > ds.n:
        raise DataError(f"two subsets of size {k} do not fit in {ds.n} rows")
    chosen = rng.choice(ds.n, size=2 * k, replace=False)
    subset_noise, subset_flip = chosen[:k], chosen[k:]
    noisy_coords = np.sort(rng.choice(ds.dim, size=ds.dim // 2, replace=False))
    features = ds.features.copy()
    labels = ds.labels.copy()
    _corrupt_feature_half(features, subset_noise, noisy_coords, noise_sd, rng)
    labels[subset_flip] = -labels[subset_flip]
    mask = np.zeros(ds.n, dtype=bool)
    mask[chosen] = True
    return replace(ds, features=features, labels=labels, outlier_mask=mask)


def contaminate_minibatches(
    ds: Dataset,
    batch_size: int,
    rate: float,
    within_fraction: float,
    seed: int,
    noise_sd: float = 5.0,
) -> Dataset:
    """Poison whole minibatches of a labeled regression dataset.

    Rows are partitioned into contiguous blocks of batch_size along a seeded
    shuffle (a trailing partial block is never poisoned). floor(rate * N /
    batch_size) blocks are drawn at random; in each, floor(within_fraction *
    batch_size) member rows are corrupted: the first half (rounded up) get
    the fixed random feature-coordinate noise of
    :func:`contaminate_supervised`, the rest have their response replaced by
    a normal(0, noise_sd**2) draw.

    The block partition is recorded in group_ids so batch-level
    summarization can treat blocks as groups.
    """
    if ds.labels is None:
        raise DataError("minibatch contamination requires regression labels")
    if batch_size > ds.n:
        raise DataError(f"batch_size {batch_size} exceeds dataset size {ds.n}")
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    if not 0.0 <= rate <= 1.0 or not 0.0 <= within_fraction <= 1.0:
        raise DataError("rate and within_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    order = rng.permutation(ds.n)
    n_batches = ds.n // batch_size
    group_ids = np.empty(ds.n, dtype=int)
    for b in range(n_batches):
        group_ids[order[b * batch_size:(b + 1) * batch_size]] = b
    if ds.n % batch_size:
        group_ids[order[n_batches * batch_size:]] = n_batches

    n_poisoned = int(np.floor(rate * ds.n / batch_size))
    poisoned = rng.choice(n_batches, size=n_poisoned, replace=False)
    per_batch = int(np.floor(within_fraction * batch_size))
    noisy_coords = np.sort(rng.choice(ds.dim, size=ds.dim // 2, replace=False))

    features = ds.features.copy()
    labels = ds.labels.copy()
    mask = np.zeros(ds.n, dtype=bool)
    for b in poisoned:
        members = order[b * batch_size:(b + 1) * batch_size]
        hit = rng.choice(members, size=per_batch, replace=False)
        n_feat = per_batch - per_batch // 2
        _corrupt_feature_half(features, hit[:n_feat], noisy_coords, noise_sd, rng)
        labels[hit[n_feat:]] = rng.normal(0.0, noise_sd, size=per_batch // 2)
        mask[hit] = True
    return replace(ds, features=features, labels=labels, group_ids=group_ids, outlier_mask=mask)


def contaminate_per_group(ds: Dataset, rate_map, noise_sd: float, seed: int) -> Dataset:
    """Apply supervised contamination within each group at its own rate.

    Args:
        rate_map: mapping from group id to contamination rate in [0, 0.5];
            groups absent from the map are left clean.

    Within group g, two disjoint subsets of size floor(rate_map[g] * |g|)
    get feature noise and label flips respectively, using one shared random
    half of the feature coordinates.
    """
    if ds.labels is None:
        raise DataError("per-group contamination requires labels")
    if ds.group_ids is None:
        raise DataError("per-group contamination requires group_ids")
    rng = np.random.default_rng(seed)
    noisy_coords = np.sort(rng.choice(ds.dim, size=ds.dim // 2, replace=False))
    features = ds.features.copy()
    labels = ds.labels.copy()
    mask = np.zeros(ds.n, dtype=bool)
    for gid in np.unique(ds.group_ids):
        rate = float(rate_map.get(int(gid), 0.0))
        if not 0.0 <= rate <= 0.5:
            raise DataError(f"group {gid}: rate must lie in [0, 0.5]")
        members = np.flatnonzero(ds.group_ids == gid)
        k = int(np.floor(rate * len(members)))
        if k == 0:
            continue
        chosen = rng.choice(members, size=2 * k, replace=False)
        _corrupt_feature_half(features, chosen[:k], noisy_coords, noise_sd, rng)
        labels[chosen[k:]] = -labels[chosen[k:]]
        mask[chosen] = True
    return replace(ds, features=features, labels=labels, outlier_mask=mask)


def _encode_group_keys(key_columns) -> np.ndarray:
    n = len(key_columns[0])
    for col in key_columns:
        if len(col) != n:
            raise DataError("all key columns must have the same length")
    codes = {}
    out = np.empty(n, dtype=int)
    for i in range(n):
        key = tuple(col[i] for col in key_columns)
        out[i] = codes.setdefault(key, len(codes))
    return out


def assign_groups(ds: Dataset, key_columns: Sequence[Sequence]) -> Dataset:
    """Attach dense group ids formed from per-row categorical key tuples.

    Args:
        key_columns: one or more length-N sequences of hashable values.
            Rows sharing the same tuple of values share a group id; ids are
            assigned in order of first appearance.
    """
    if not key_columns:
        raise DataError("at least one key column is required")
    group_ids = _encode_group_keys([list(col) for col in key_columns])
    if len(group_ids) != ds.n:
        raise DataError(f"key columns must have length {ds.n}")
    return replace(ds, group_ids=group_ids)


@dataclass(frozen=True)
class ContaminationSpec:
    """Declarative description of one contamination protocol.

    kind selects the protocol: "gaussian-shift", "supervised-noise",
    "minibatch", or "per-group". rate is the corruption fraction F, and
    params holds the kind-specific knobs (shift_mean, noise_sd, batch_size,
    within_fraction, rate_map).
    """

    kind: str
    rate: float
    seed: int
    params: dict = field(default_factory=dict)

    _KINDS = ("gaussian-shift", "supervised-noise", "minibatch", "per-group")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise DataError(f"unknown contamination kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise DataError("rate must lie in [0, 1]")


def apply_contamination(ds: Dataset, spec: ContaminationSpec) -> Dataset:
    """Dispatch a ContaminationSpec to the matching operation."""
    p = spec.params
    if spec.kind == "gaussian-shift":
        return contaminate_gaussian_shift(ds, spec.rate, p.get("shift_mean", 0.0), spec.seed)
    if spec.kind == "supervised-noise":
        return contaminate_supervised(ds, spec.rate, p.get("noise_sd", 5.0), spec.seed)
    if spec.kind == "minibatch":
        return contaminate_minibatches(
            ds, p["batch_size"], spec.rate, p.get("within_fraction", 0.7), spec.seed,
            noise_sd=p.get("noise_sd", 5.0),
        )
    if spec.kind == "per-group":
        rate_map = {int(k): float(v) for k, v in p["rate_map"].items()}
        return contaminate_per_group(ds, rate_map, p.get("noise_sd", 5.0), spec.seed)
    raise DataError(f"unknown contamination kind {spec.kind!r}")
