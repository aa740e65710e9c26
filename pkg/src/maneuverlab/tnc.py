"""Temporal-neighborhood contrastive learner (TNC).

Windows near an anchor inside a relatively stationary region are treated
as positives, distant windows as negatives; a discriminator scores pairs
of encoded windows and the contrastive objective down-weights sampled
negatives with a positive-unlabeled weight because a "negative" drawn
far away may still share the anchor's underlying maneuvering state.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import ndtensor as nd
from .nets import DilatedConvEncoder, EncoderSpec, PairDiscriminator
from .rng import substream
from .signals import MultivariateSeries, as_feature_matrix, ensure_normalized, make_windows, temporal_split
from .stationarity import adf_test

__all__ = ["NeighborhoodSampler", "tnc_loss", "train_tnc", "TncRepresentationLearner"]

PROB_CLAMP = 1e-7


class NeighborhoodSampler:
    """ADF-driven neighborhood discovery and (anchor, positive, negative) sampling.

    The neighborhood of an anchor window grows symmetrically one window at
    a time while the concatenated region still rejects the unit root at
    ``adf_threshold`` on both features, up to ``cap`` windows per side.
    Positives are drawn uniformly from the neighborhood, negatives
    uniformly from its complement.
    """

    def __init__(self, values: np.ndarray, window_size: int, adf_threshold: float = 0.01,
                 cap: int = 5, rng: np.random.Generator | int = 0):
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("sampler expects (features, time) values")
        self.window_size = int(window_size)
        self.adf_threshold = float(adf_threshold)
        self.cap = int(cap)
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        batch = make_windows(MultivariateSeries(values=self.values), self.window_size)
        self.windows = batch.windows
        self.n_windows = batch.n_windows
        self._neighborhoods: dict[int, tuple[int, int]] = {}

    def _region_rejects_unit_root(self, lo: int, hi: int) -> bool:
        start = lo * self.window_size
        stop = min((hi + 1) * self.window_size, self.values.shape[1])
        segment = self.values[:, start:stop]
        for feature in segment:
            if np.ptp(feature) == 0.0:
                continue  # constant stretch: trivially stationary
            if feature.shape[0] < 16:
                return False  # too short to test; do not grow on faith
            if adf_test(feature).p_value > self.adf_threshold:
                return False
        return True

    def find_neighborhood(self, t: int) -> tuple[int, int]:
        """Inclusive window-index range of the anchor's stationary region."""
        if not 0 <= t < self.n_windows:
            raise ValueError(f"anchor {t} out of range [0, {self.n_windows})")
        cached = self._neighborhoods.get(t)
        if cached is not None:
            return cached
        lo = hi = t
        for radius in range(1, self.cap + 1):
            new_lo = max(0, t - radius)
            new_hi = min(self.n_windows - 1, t + radius)
            if (new_lo, new_hi) == (lo, hi):
                break  # series bounds reached on both sides
            if not self._region_rejects_unit_root(new_lo, new_hi):
                break
            lo, hi = new_lo, new_hi
        self._neighborhoods[t] = (lo, hi)
        return lo, hi

    def sample_pair_indices(self, t: int) -> tuple[int, int]:
        """Window indices of one positive and one negative for anchor ``t``."""
        lo, hi = self.find_neighborhood(t)
        neighbors = [w for w in range(lo, hi + 1) if w != t]
        pos = neighbors[int(self.rng.integers(len(neighbors)))] if neighbors else t
        complement_size = lo + (self.n_windows - 1 - hi)
        if complement_size == 0:
            raise ValueError("no window outside the neighborhood to sample as a negative")
        draw = int(self.rng.integers(complement_size))
        neg = draw if draw < lo else hi + 1 + (draw - lo)
        return pos, neg

    def sample_tuple(self, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos, neg = self.sample_pair_indices(t)
        return self.windows[t], self.windows[pos], self.windows[neg]


def tnc_loss(encoder, discriminator, tuples, pu_weight: float) -> nd.Tensor:
    """PU-weighted contrastive loss over a batch of (anchor, positive, negative) windows.

    L = -mean[ log D(z_t, z_l) + w * log D(z_t, z_k) + (1 - w) * log(1 - D(z_t, z_k)) ]

    with discriminator outputs clamped to [1e-7, 1 - 1e-7] before the logs,
    so the loss is finite for any weights.
    """
    tuples = list(tuples)
    if not tuples:
        raise ValueError("tnc_loss: empty batch")
    w = float(pu_weight)
    total = nd.Tensor(0.0)
    for anchor, positive, negative in tuples:
        z_t = encoder(anchor)
        z_l = encoder(positive)
        z_k = encoder(negative)
        p_pos = nd.clip(discriminator(z_t, z_l), PROB_CLAMP, 1.0 - PROB_CLAMP)
        p_neg = nd.clip(discriminator(z_t, z_k), PROB_CLAMP, 1.0 - PROB_CLAMP)
        term = nd.log(p_pos) + w * nd.log(p_neg) + (1.0 - w) * nd.log(1.0 - p_neg)
        total = total - term
    return total / len(tuples)


def train_tnc(values: np.ndarray, encoder: DilatedConvEncoder, discriminator: PairDiscriminator,
              *, lr: float = 0.001, batch_size: int = 5, epochs: int = 30,
              pu_weight: float = 0.05, adf_threshold: float = 0.01, neighborhood_cap: int = 5,
              train_fraction: float = 0.8, seed: int = 0, adam_eps: float = 1e-8) -> list[dict]:
    """Adam training of the contrastive objective on a temporal 80/20 split.

    Returns one history row per epoch with train loss and, when the
    held-out tail is at least two windows long, held-out loss and
    discriminator accuracy on fresh positive/negative pairs.
    """
    ensure_normalized(values)
    window = encoder.spec.window
    train_values, heldout_values, _, _ = temporal_split(values, window, train_fraction)

    train_sampler = NeighborhoodSampler(train_values, window, adf_threshold, neighborhood_cap,
                                        substream(seed, "tnc-sampling"))
    heldout_sampler = None
    if heldout_values.shape[1] >= 2 * window:
        heldout_sampler = NeighborhoodSampler(heldout_values, window, adf_threshold, neighborhood_cap,
                                              substream(seed, "tnc-sampling-heldout"))

    shuffle_rng = substream(seed, "tnc-epochs")
    params = {f"enc.{k}": v for k, v in encoder.parameters().items()}
    params.update({f"disc.{k}": v for k, v in discriminator.parameters().items()})
    optimizer = nd.Adam(params, lr=lr, eps=adam_eps)

    anchors = np.arange(train_sampler.n_windows)
    history = []
    for epoch in range(1, epochs + 1):
        order = anchors.copy()
        shuffle_rng.shuffle(order)
        epoch_losses = []
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            tuples = [train_sampler.sample_tuple(int(t)) for t in batch]
            optimizer.zero_grad()
            loss = tnc_loss(encoder, discriminator, tuples, pu_weight)
            nd.backward(loss)
            optimizer.step()
            epoch_losses.append(loss.item())
        row = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)),
               "heldout_loss": float("nan"), "disc_accuracy": float("nan")}
        if heldout_sampler is not None:
            with nd.no_grad():
                tuples = [heldout_sampler.sample_tuple(t) for t in range(heldout_sampler.n_windows)]
                row["heldout_loss"] = tnc_loss(encoder, discriminator, tuples, pu_weight).item()
                correct = 0
                for anchor, positive, negative in tuples:
                    z_t = encoder(anchor)
                    correct += int(discriminator(z_t, encoder(positive)).item() > 0.5)
                    correct += int(discriminator(z_t, encoder(negative)).item() <= 0.5)
                row["disc_accuracy"] = correct / (2 * len(tuples))
        history.append(row)
    return history


class TncRepresentationLearner(BaseEstimator, TransformerMixin):
    """Contrastive window-representation learner with a fit/transform surface.

    ``fit`` expects a normalized series (a ``MultivariateSeries`` or an
    (n_timesteps, n_features) array); ``transform`` returns one
    representation per non-overlapping window, shape (n_windows, repr_size).
    """

    def __init__(self, window: int = 19, repr_size: int = 16, kernel_size: int = 3,
                 channels: tuple = (32, 64, 64), disc_hidden: int = 64, lr: float = 0.001,
                 batch_size: int = 5, epochs: int = 30, pu_weight: float = 0.05,
                 adf_threshold: float = 0.01, neighborhood_cap: int = 5,
                 train_fraction: float = 0.8, seed: int = 0):
        self.window = window
        self.repr_size = repr_size
        self.kernel_size = kernel_size
        self.channels = channels
        self.disc_hidden = disc_hidden
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.pu_weight = pu_weight
        self.adf_threshold = adf_threshold
        self.neighborhood_cap = neighborhood_cap
        self.train_fraction = train_fraction
        self.seed = seed

    def _validate(self):
        if not 0.0 <= self.pu_weight <= 1.0:
            raise ValueError(f"pu_weight must be in [0, 1], got {self.pu_weight}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")

    def _encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(
            in_features=2,
            window=self.window,
            out_size=self.repr_size,
            kernel_size=self.kernel_size,
            channels=tuple(self.channels),
        )

    def fit(self, X, y=None):
        self._validate()
        values = as_feature_matrix(X)
        self.encoder_ = DilatedConvEncoder(self._encoder_spec(), substream(self.seed, "tnc-init-encoder"))
        self.discriminator_ = PairDiscriminator(self.repr_size, self.disc_hidden,
                                                substream(self.seed, "tnc-init-disc"))
        self.history_ = train_tnc(
            values, self.encoder_, self.discriminator_,
            lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
            pu_weight=self.pu_weight, adf_threshold=self.adf_threshold,
            neighborhood_cap=self.neighborhood_cap, train_fraction=self.train_fraction,
            seed=self.seed,
        )
        return self

    def _require_fitted(self):
        if not hasattr(self, "encoder_"):
            raise NotFittedError("this TncRepresentationLearner instance is not fitted yet")

    def transform(self, X) -> np.ndarray:
        self._require_fitted()
        values = as_feature_matrix(X)
        batch = make_windows(MultivariateSeries(values=values), self.window)
        with nd.no_grad():
            return np.stack([self.encoder_(w).data for w in batch.windows])

    def encode(self, X):
        """Representations plus window bookkeeping, tagged with the source model."""
        from .evaluation import RepresentationSet

        values = as_feature_matrix(X)
        batch = make_windows(MultivariateSeries(values=values), self.window)
        return RepresentationSet(Z=self.transform(X), z_g=None,
                                 start_indices=batch.start_indices, source="tnc")

    def save(self, path):
        self._require_fitted()
        params = {f"encoder/{k}": v for k, v in self.encoder_.parameters().items()}
        params.update({f"discriminator/{k}": v for k, v in self.discriminator_.parameters().items()})
        nd.save_checkpoint(path, params, meta={"model": "tnc", "hyperparams": self.get_params()})

    @classmethod
    def load(cls, path) -> "TncRepresentationLearner":
        arrays, meta = nd.load_checkpoint(path)
        if meta.get("model") != "tnc":
            raise ValueError(f"checkpoint is for model {meta.get('model')!r}, expected 'tnc'")
        hyper = dict(meta["hyperparams"])
        hyper["channels"] = tuple(hyper["channels"])
        learner = cls(**hyper)
        learner.encoder_ = DilatedConvEncoder(learner._encoder_spec(),
                                              substream(learner.seed, "tnc-init-encoder"))
        learner.discriminator_ = PairDiscriminator(learner.repr_size, learner.disc_hidden,
                                                   substream(learner.seed, "tnc-init-disc"))
        for name, tensor in learner.encoder_.parameters().items():
            tensor.data[...] = arrays[f"encoder/{name}"]
        for name, tensor in learner.discriminator_.parameters().items():
            tensor.data[...] = arrays[f"discriminator/{name}"]
        learner.history_ = []
        return learner
