"""Sparse, outlier-robust Bayesian coresets via density-power posteriors.

The package builds small weighted data summaries whose posterior
approximates a robustified full-data posterior, rejecting contaminated
observations instead of absorbing them.
"""

from .builder import (
    BuildConfig,
    CoresetState,
    TraceRecord,
    build,
    build_groups,
    reweight,
    uniform_baseline,
)
from .data import (
    ContaminationSpec,
    Dataset,
    TableSchema,
    assign_groups,
    contaminate_gaussian_shift,
    contaminate_minibatches,
    contaminate_per_group,
    contaminate_supervised,
    load_sparse,
    load_table,
    pca_project,
    split_train_test,
    standardize,
)
from .evaluation import (
    MetricPoint,
    gaussian_kl,
    outlier_fraction,
    predictive_accuracy,
    reverse_kl_vs_clean,
    rmse,
)
from .models import (
    BetaConfig,
    DiscreteToyModel,
    GaussianModel,
    LogisticModel,
    NeuralLinearModel,
)

__version__ = "0.1.0"
