"""Downstream evaluation of window representations.

Linear classification probe (accuracy + macro AUPRC), k-means clustering
with Silhouette and Davies-Bouldin indices, turning-point regression, and
a combined report whose columns mirror the comparison table used for the
two learners: model, window, auprc, accuracy, silhouette, dbi, r2, loss.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .nets import ClassifierHead, cross_entropy
from .rng import substream
from .signals import MultivariateSeries, as_feature_matrix, make_windows
from .stationarity import ols

__all__ = [
    "RepresentationSet",
    "ManeuverSummary",
    "EVAL_COLUMNS",
    "window_labels",
    "linear_probe",
    "average_precision",
    "auprc_macro",
    "kmeans",
    "silhouette_score",
    "davies_bouldin_index",
    "turning_point_summary",
    "linear_regression_probe",
    "evaluate_all",
    "report_to_csv",
]

EVAL_COLUMNS = ("model", "window", "auprc", "accuracy", "silhouette", "dbi", "r2", "loss")


@dataclass
class RepresentationSet:
    """Per-window representations from one learner."""

    Z: np.ndarray                  # (n_windows, repr_size)
    z_g: np.ndarray | None         # (n_windows, global_size) when the model has one
    start_indices: np.ndarray
    source: str

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        if not np.all(np.isfinite(self.Z)):
            raise ValueError("representations must be finite")
        if self.z_g is not None:
            self.z_g = np.asarray(self.z_g, dtype=np.float64)
            if self.z_g.shape[0] != self.Z.shape[0]:
                raise ValueError("local and global representation counts differ")

    @property
    def n_windows(self) -> int:
        return self.Z.shape[0]


@dataclass
class ManeuverSummary:
    """Per-window sum of squared consecutive turning-point differences."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values < 0):
            raise ValueError("maneuver summaries are sums of squares, must be >= 0")


def window_labels(labels: np.ndarray, window: int, n_windows: int) -> np.ndarray:
    """Majority state of each window's timesteps (ties to the smaller id)."""
    labels = np.asarray(labels)
    out = np.empty(n_windows, dtype=np.int64)
    for i in range(n_windows):
        block = labels[i * window: (i + 1) * window]
        if block.size == 0:
            out[i] = out[i - 1] if i else 0
            continue
        ids, counts = np.unique(block, return_counts=True)
        out[i] = ids[np.argmax(counts)]
    return out


# ---------------------------------------------------------------------------
# classification probe


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Area under the precision-recall curve by step integration.

    AP = sum over descending-score positives of (recall step) * precision.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise ValueError("average_precision: no positive examples")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    return float((precision * hits).sum() / n_pos)


def auprc_macro(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """One-vs-rest average precision, macro-averaged over the classes present."""
    labels = np.asarray(labels)
    scores = []
    for c in np.unique(labels):
        scores.append(average_precision(probabilities[:, int(c)], labels == c))
    return float(np.mean(scores))


@dataclass
class ProbeResult:
    accuracy: float
    auprc: float


def linear_probe(Z: np.ndarray, labels: np.ndarray, split: float = 0.8,
                 epochs: int = 200, lr: float = 0.01, batch_size: int = 16,
                 dropout_rate: float = 0.5, seed: int = 0, n_classes: int = 4) -> ProbeResult:
    """Train the dropout+linear head on a temporal split; score the held-out part.

    Accuracy plus macro one-vs-rest AUPRC from the softmax probabilities.
    """
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    if Z.shape[0] != labels.shape[0]:
        raise ValueError("one label per representation required")
    n_train = int(Z.shape[0] * split)
    if n_train < 1 or n_train == Z.shape[0]:
        raise ValueError("split leaves an empty train or test part")
    train_z, test_z = Z[:n_train], Z[n_train:]
    train_y, test_y = labels[:n_train], labels[n_train:]
    if np.unique(train_y).size < 2:
        raise ValueError("training split is single-class; the probe task is degenerate")

    head = ClassifierHead(Z.shape[1], n_classes=n_classes, dropout_rate=dropout_rate,
                          rng=substream(seed, "probe-dropout"))
    optimizer = nd.Adam(head.parameters(), lr=lr)
    order_rng = substream(seed, "probe-order")
    indices = np.arange(n_train)
    for _ in range(epochs):
        order_rng.shuffle(indices)
        for start in range(0, n_train, batch_size):
            batch = indices[start:start + batch_size]
            optimizer.zero_grad()
            loss = nd.Tensor(0.0)
            for i in batch:
                loss = loss + cross_entropy(head(train_z[i]), int(train_y[i]))
            nd.backward(loss / len(batch))
            optimizer.step()

    head.eval()
    with nd.no_grad():
        logits = np.stack([head(z).data for z in test_z])
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    probabilities = shifted / shifted.sum(axis=1, keepdims=True)
    accuracy = float((np.argmax(logits, axis=1) == test_y).mean())
    return ProbeResult(accuracy=accuracy, auprc=auprc_macro(probabilities, test_y))


# ---------------------------------------------------------------------------
# clustering


@dataclass
class KmeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    inertia_history: list[float]


def kmeans(X: np.ndarray, k: int = 4, seed: int = 0, max_iter: int = 300) -> KmeansResult:
    """Lloyd's algorithm with k-means++ seeding; deterministic given the seed."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < k:
        raise ValueError(f"kmeans: {n} points cannot fill {k} clusters")
    rng = substream(seed, "kmeans")

    centers = np.empty((k, X.shape[1]))
    centers[0] = X[int(rng.integers(n))]
    closest_sq = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest_sq.sum()
        if total == 0.0:
            centers[j] = X[int(rng.integers(n))]
        else:
            centers[j] = X[int(rng.choice(n, p=closest_sq / total))]
        closest_sq = np.minimum(closest_sq, np.sum((X - centers[j]) ** 2, axis=1))

    assignments = np.full(n, -1)
    inertia_history = []
    for _ in range(max_iter):
        distances = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_assignments = np.argmin(distances, axis=1)
        inertia_history.append(float(distances[np.arange(n), new_assignments].sum()))
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for j in range(k):
            members = X[assignments == j]
            if members.shape[0] == 0:
                # re-seed an empty cluster at the point farthest from its center
                worst = int(np.argmax(distances[np.arange(n), assignments]))
                centers[j] = X[worst]
            else:
                centers[j] = members.mean(axis=0)
    return KmeansResult(assignments=assignments, centers=centers, inertia_history=inertia_history)


def silhouette_score(X: np.ndarray, assignments: np.ndarray) -> float:
    """Mean of (b - a) / max(a, b) with Euclidean distances.

    Points in singleton clusters score 0, as do points with a = b = 0
    (coincident data); an all-singleton clustering is undefined.
    """
    X = np.asarray(X, dtype=np.float64)
    assignments = np.asarray(assignments)
    ids, counts = np.unique(assignments, return_counts=True)
    if ids.size < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    if np.all(counts == 1):
        raise ValueError("silhouette is undefined for singleton-only clusterings")

    distances = np.sqrt(np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1))
    scores = np.zeros(X.shape[0])
    for i in range(X.shape[0]):
        own = assignments[i]
        own_mask = assignments == own
        if own_mask.sum() == 1:
            continue  # singleton: convention 0
        a = distances[i, own_mask].sum() / (own_mask.sum() - 1)
        b = min(distances[i, assignments == other].mean() for other in ids if other != own)
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def davies_bouldin_index(X: np.ndarray, assignments: np.ndarray) -> float:
    """Mean over clusters of the worst (s_i + s_j) / d_ij ratio; lower is better.

    Coincident centroids make the ratio blow up; that case returns +inf
    with a warning rather than raising.
    """
    X = np.asarray(X, dtype=np.float64)
    assignments = np.asarray(assignments)
    ids = np.unique(assignments)
    if ids.size < 2:
        raise ValueError("Davies-Bouldin needs at least 2 clusters")
    centroids = np.stack([X[assignments == c].mean(axis=0) for c in ids])
    spreads = np.array([
        np.linalg.norm(X[assignments == c] - centroids[j], axis=1).mean()
        for j, c in enumerate(ids)
    ])
    worst = np.zeros(ids.size)
    for i in range(ids.size):
        for j in range(ids.size):
            if i == j:
                continue
            gap = np.linalg.norm(centroids[i] - centroids[j])
            if gap == 0.0:
                warnings.warn("coincident centroids: Davies-Bouldin index is unbounded")
                return float("inf")
            worst[i] = max(worst[i], (spreads[i] + spreads[j]) / gap)
    return float(worst.mean())


# ---------------------------------------------------------------------------
# turning-point regression


def _turning_point_values(x: np.ndarray) -> np.ndarray:
    """Values of strict interior extrema; a plateau counts once, at its start."""
    compressed = []
    starts = []
    for idx, value in enumerate(x):
        if not compressed or value != compressed[-1]:
            compressed.append(value)
            starts.append(idx)
    extrema = []
    for j in range(1, len(compressed) - 1):
        prev_v, value, next_v = compressed[j - 1], compressed[j], compressed[j + 1]
        if (value > prev_v and value > next_v) or (value < prev_v and value < next_v):
            extrema.append(value)
    return np.asarray(extrema, dtype=np.float64)


def turning_point_summary(series, window: int) -> ManeuverSummary:
    """Per window and feature: squared consecutive differences of the
    turning-point values, summed; windows with fewer than two turning
    points on a feature contribute zero for it."""
    values = as_feature_matrix(series) if not isinstance(series, np.ndarray) else series
    if values.ndim != 2:
        raise ValueError("expected an (F, T) array or series")
    batch = make_windows(MultivariateSeries(values=values), window)
    out = np.zeros(batch.n_windows)
    for i in range(batch.n_windows):
        score = 0.0
        for feature in batch.windows[i]:
            tp = _turning_point_values(feature)
            if tp.size >= 2:
                score += float(np.sum(np.diff(tp) ** 2))
        out[i] = score
    return ManeuverSummary(values=out)


@dataclass
class RegressionProbeResult:
    r2: float
    loss: float


def linear_regression_probe(Z: np.ndarray, target: np.ndarray, split: float = 0.7
                            ) -> RegressionProbeResult:
    """OLS of the maneuver summary on the representations, scored on the
    held-out 30% (temporal split): coefficient of determination and MSE.

    Rank-deficient designs fall back to ridge with lambda = 1e-6 and a
    warning; a zero-variance held-out target is degenerate.
    """
    Z = np.asarray(Z, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n = Z.shape[0]
    if n < 10:
        raise ValueError(f"need at least 10 windows for the regression probe, got {n}")
    n_train = int(n * split)
    design = np.column_stack([np.ones(n), Z])
    use_ridge = n_train <= design.shape[1]
    beta = None
    if not use_ridge:
        try:
            beta = ols(design[:n_train], target[:n_train]).params
        except np.linalg.LinAlgError:
            use_ridge = True
    if use_ridge:
        warnings.warn("rank-deficient or underdetermined design: falling back to ridge (lambda=1e-6)")
        gram = design[:n_train].T @ design[:n_train] + 1e-6 * np.eye(design.shape[1])
        beta = np.linalg.solve(gram, design[:n_train].T @ target[:n_train])
    held_y = target[n_train:]
    held_pred = design[n_train:] @ beta
    ss_tot = float(np.sum((held_y - held_y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("held-out target has zero variance; R^2 is undefined")
    ss_res = float(np.sum((held_y - held_pred) ** 2))
    return RegressionProbeResult(r2=1.0 - ss_res / ss_tot,
                                 loss=float(np.mean((held_y - held_pred) ** 2)))


# ---------------------------------------------------------------------------
# combined report


def _metrics_row(model: str, window: int, Z: np.ndarray, labels: np.ndarray,
                 maneuver: np.ndarray, seed: int) -> dict:
    row = {"model": model, "window": window, "auprc": None, "accuracy": None,
           "silhouette": None, "dbi": None, "r2": None, "loss": None}
    try:
        probe = linear_probe(Z, labels, seed=seed)
        row["auprc"] = probe.auprc
        row["accuracy"] = probe.accuracy
    except ValueError as exc:
        warnings.warn(f"{model}: classification probe failed: {exc}")
    try:
        clusters = kmeans(Z, k=4, seed=seed)
        row["silhouette"] = silhouette_score(Z, clusters.assignments)
        row["dbi"] = davies_bouldin_index(Z, clusters.assignments)
    except ValueError as exc:
        warnings.warn(f"{model}: clustering failed: {exc}")
    try:
        regression = linear_regression_probe(Z, maneuver)
        row["r2"] = regression.r2
        row["loss"] = regression.loss
    except ValueError as exc:
        warnings.warn(f"{model}: regression probe failed: {exc}")
    return row


def evaluate_all(representations, series: MultivariateSeries, window: int, seed: int = 0
                 ) -> list[dict]:
    """One metric row per representation source (plus a ``<source>-global``
    variant when global codes exist), all on the shared window labeling.

    ``series.labels`` must be populated (run the state labeling first).
    """
    if series.labels is None:
        raise ValueError("series has no state labels; label it before evaluating")
    reps = list(representations)
    if not reps:
        raise ValueError("no representation sets supplied")
    n_windows = reps[0].n_windows
    for r in reps:
        if r.n_windows != n_windows:
            raise ValueError("representation sets cover different window counts")
    labels = window_labels(series.labels, window, n_windows)
    maneuver = turning_point_summary(series.values, window).values
    if maneuver.shape[0] != n_windows:
        raise ValueError("window count of the series does not match the representations")

    rows = []
    for r in reps:
        rows.append(_metrics_row(r.source, window, r.Z, labels, maneuver, seed))
        if r.z_g is not None:
            rows.append(_metrics_row(f"{r.source}-global", window, r.z_g, labels, maneuver, seed))
    return rows


def report_to_csv(rows: list[dict], path):
    """Write the report with the exact comparison-table column schema."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_COLUMNS)
        for row in rows:
            writer.writerow(["NA" if row[c] is None else row[c] for c in EVAL_COLUMNS])
