"""Representation learning for bivariate acceleration signals.

Two unsupervised learners over non-overlapping signal windows — a
temporal-neighborhood contrastive model (TNC) and a decoupled
local/global generative model (DLG) — plus the signal tooling
(normalization, windowing, synthesis, ADF-based state labeling) and the
downstream evaluation suite (classification, clustering, turning-point
regression, reconstruction).
"""

from .signals import (
    MultivariateSeries,
    SynthConfig,
    WindowBatch,
    label_states,
    load_csv,
    make_windows,
    normalize,
    save_csv,
    synthesize,
)
from .stationarity import AdfResult, adf_test, ols
from .tnc import NeighborhoodSampler, TncRepresentationLearner, tnc_loss
from .dlg import DlgRepresentationLearner, GpPrior, elbo_loss, kl_gaussian_diag, kl_gaussian_gp
from .evaluation import (
    RepresentationSet,
    davies_bouldin_index,
    evaluate_all,
    kmeans,
    linear_probe,
    linear_regression_probe,
    silhouette_score,
    turning_point_summary,
)

__version__ = "0.1.0"

__all__ = [
    "MultivariateSeries",
    "SynthConfig",
    "WindowBatch",
    "label_states",
    "load_csv",
    "make_windows",
    "normalize",
    "save_csv",
    "synthesize",
    "AdfResult",
    "adf_test",
    "ols",
    "NeighborhoodSampler",
    "TncRepresentationLearner",
    "tnc_loss",
    "DlgRepresentationLearner",
    "GpPrior",
    "elbo_loss",
    "kl_gaussian_diag",
    "kl_gaussian_gp",
    "RepresentationSet",
    "davies_bouldin_index",
    "evaluate_all",
    "kmeans",
    "linear_probe",
    "linear_regression_probe",
    "silhouette_score",
    "turning_point_summary",
    "__version__",
]
