"""Decoupled local/global generative learner (DLG).

Each window gets a local code from a variational dilated-conv encoder and
a global code from a second one; a recurrent decoder rebuilds the window
from both.  Local codes carry Gaussian-process priors over the window
grid (a mix of RBF and Matérn-3/2 kernels at several length scales, a
few latent dimensions each), the global code has a standard normal
prior, and the objective trades reconstruction against the KL terms with
a small weight B plus a counterfactual regularizer that stops the local
path from smuggling global information.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import ndtensor as nd
from .ndtensor import Tensor
from .nets import DecoderSpec, DilatedConvEncoder, EncoderSpec, RnnDecoder
from .rng import substream
from .signals import (
    MultivariateSeries,
    as_feature_matrix,
    ensure_normalized,
    make_windows,
    observation_mask,
    temporal_split,
)

__all__ = [
    "GpPrior",
    "ElboTerms",
    "gp_gram",
    "default_priors",
    "kl_gaussian_diag",
    "kl_gaussian_gp",
    "gaussian_logpdf_diag",
    "counterfactual_reg",
    "elbo_loss",
    "train_dlg",
    "reconstruct",
    "DlgRepresentationLearner",
]

GRAM_JITTER = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


def gp_gram(kernel: str, length_scale: float, times: np.ndarray) -> np.ndarray:
    """Gram matrix of an RBF or Matérn-3/2 kernel on a time grid, with jitter.

    k(t, t) = 1, plus 1e-6 on the diagonal to keep Cholesky factorizations
    comfortable.
    """
    if length_scale <= 0.0:
        raise ValueError(f"length scale must be positive, got {length_scale}")
    times = np.asarray(times, dtype=np.float64).ravel()
    if times.size < 1:
        raise ValueError("need at least one grid point")
    r = np.abs(times[:, None] - times[None, :])
    if kernel == "rbf":
        gram = np.exp(-(r ** 2) / (2.0 * length_scale ** 2))
    elif kernel == "matern32":
        scaled = math.sqrt(3.0) * r / length_scale
        gram = (1.0 + scaled) * np.exp(-scaled)
    else:
        raise ValueError(f"unknown kernel {kernel!r}; use 'rbf' or 'matern32'")
    return gram + GRAM_JITTER * np.eye(times.size)


@dataclass(frozen=True)
class GpPrior:
    """Zero-mean GP prior over one group of local latent dimensions."""

    kernel: str
    length_scale: float
    dims: tuple[int, ...]

    def __post_init__(self):
        gp_gram(self.kernel, self.length_scale, np.zeros(1))  # validates kernel and scale

    def gram(self, times: np.ndarray) -> np.ndarray:
        return gp_gram(self.kernel, self.length_scale, times)


def default_priors(repr_size: int, kernels=("rbf", "matern32"),
                   scales=(2.0, 1.0, 0.5, 0.25)) -> list[GpPrior]:
    """Partition the local latent dimensions across the kernel-scale pairs.

    With 16 dimensions and the default two kernels x four scales, each
    pair owns two dimensions; leftovers go to the first pairs.
    """
    pairs = [(k, float(s)) for k in kernels for s in scales]
    counts = [repr_size // len(pairs)] * len(pairs)
    for i in range(repr_size % len(pairs)):
        counts[i] += 1
    priors = []
    offset = 0
    for (kernel, scale), count in zip(pairs, counts):
        if count == 0:
            continue
        priors.append(GpPrior(kernel, scale, tuple(range(offset, offset + count))))
        offset += count
    return priors


def kl_gaussian_diag(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)) = sum 0.5 (var + mu^2 - 1 - logvar)."""
    return 0.5 * (nd.exp(logvar) + nd.pow_scalar(mu, 2) - 1.0 - logvar).sum()


def kl_gaussian_gp(mu: Tensor, logvar: Tensor, gram: np.ndarray) -> Tensor:
    """KL between a factorized Gaussian over a time grid and a zero-mean GP.

    0.5 [ tr(K^-1 S) + mu' K^-1 mu - n + log det K - log det S ]
    with S = diag(exp(logvar)).  Raises LinAlgError when the Gram matrix is
    not positive definite despite the jitter.
    """
    gram = np.asarray(gram, dtype=np.float64)
    n = gram.shape[0]
    if mu.shape != (n,) or logvar.shape != (n,):
        raise ValueError(f"kl_gaussian_gp: series of length {n} expected, got {mu.shape}, {logvar.shape}")
    chol = np.linalg.cholesky(gram)
    logdet_k = 2.0 * float(np.sum(np.log(np.diag(chol))))
    k_inv = np.linalg.inv(gram)
    var = nd.exp(logvar)
    trace_term = (Tensor(np.diag(k_inv).copy()) * var).sum()
    quad = (mu * nd.matmul(Tensor(k_inv), mu)).sum()
    return 0.5 * (trace_term + quad - float(n) + logdet_k - logvar.sum())


def gaussian_logpdf_diag(z: Tensor, mu: Tensor, logvar: Tensor) -> Tensor:
    """log N(z; mu, diag(exp(logvar))), differentiable in all three arguments."""
    squared = nd.pow_scalar(z - mu, 2) * nd.exp(-logvar)
    return -0.5 * (squared + logvar + LOG_2PI).sum()


def reparameterize(mu: Tensor, logvar: Tensor, rng: np.random.Generator) -> Tensor:
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, 1) from the given stream."""
    eps = rng.standard_normal(mu.shape[0])
    return mu + nd.exp(0.5 * logvar) * Tensor(eps)


LOG_RATIO_CLAMP = 30.0


def counterfactual_reg(z_locals, z_globals, decoder, global_encoder, partners) -> Tensor:
    """Mean shifted density ratio q(z_g_i | W*) / q(z_g_j | W*) - 1 over the batch.

    W* decodes element i's local code with partner j's global code;
    minimizing drives the original global code toward low likelihood under
    the posterior of the counterfactual window, enforcing that local codes
    carry no global information.  The ratio itself (not its log) is the
    quantity to minimize: it is bounded below by zero, so its pull on the
    objective fades as disentanglement is reached instead of running off
    to -inf.  The -1 shift zeroes the value at identical global codes; the
    log-ratio is computed first for numerical stability and clamped to
    +-30 before exponentiation so the term stays finite.
    """
    n = len(z_locals)
    if n < 2:
        raise ValueError("counterfactual regularization needs a batch of at least 2 windows")
    if len(partners) != n or any(j == i or not 0 <= j < n for i, j in enumerate(partners)):
        raise ValueError("partners must map every batch element to a different element")
    total = Tensor(0.0)
    for i, j in enumerate(partners):
        w_star = decoder(z_locals[i], z_globals[j])
        mu_star, logvar_star = global_encoder(w_star)
        log_ratio = gaussian_logpdf_diag(z_globals[i], mu_star, logvar_star) \
            - gaussian_logpdf_diag(z_globals[j], mu_star, logvar_star)
        total = total + nd.exp(nd.clip(log_ratio, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)) - 1.0
    return total / n


@dataclass
class ElboTerms:
    """Per-batch loss breakdown; ``total`` recombines the parts exactly."""

    mse: float
    kl_local: float
    kl_global: float
    l_reg: float
    kl_weight: float
    reg_weight: float
    total: float

    def recombined(self) -> float:
        return ((1.0 - self.kl_weight) * self.mse
                + self.kl_weight * (self.kl_local + self.kl_global)
                + self.reg_weight * self.l_reg)


def elbo_loss(windows, masks, enc_l, enc_g, dec, priors, *, kl_weight: float,
              reg_weight: float, noise_rng: np.random.Generator,
              partner_rng: np.random.Generator | None = None,
              grams: dict | None = None) -> tuple[Tensor, ElboTerms]:
    """B-weighted ELBO with counterfactual regularization over one batch.

    ``windows`` is (n, F, size); reconstruction error is averaged over
    observed (mask=True) entries only.  The GP priors span the batch's
    window grid at unit spacing, so batches should be consecutive windows.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[0] == 0:
        raise ValueError("elbo_loss: empty batch")
    n = windows.shape[0]
    if masks is None:
        masks = np.ones_like(windows, dtype=bool)
    else:
        windows = windows * masks  # missing entries enter the encoders as zeros
    if reg_weight != 0.0 and n < 2:
        raise ValueError("counterfactual regularization needs a batch of at least 2 windows")

    # B = 0 is the standard-autoencoder special case: no KL terms and no
    # posterior sampling, the decoder sees the posterior means.
    sample = kl_weight != 0.0

    mse_total = Tensor(0.0)
    kl_global_total = Tensor(0.0)
    mu_locals, logvar_locals = [], []
    z_locals, z_globals = [], []
    for i in range(n):
        mu_l, logvar_l = enc_l(windows[i])
        mu_g, logvar_g = enc_g(windows[i])
        z_l = reparameterize(mu_l, logvar_l, noise_rng) if sample else mu_l
        z_g = reparameterize(mu_g, logvar_g, noise_rng) if sample else mu_g
        recon = dec(z_l, z_g)
        observed = masks[i]
        weight = observed / max(1, int(observed.sum()))
        err = nd.pow_scalar(Tensor(windows[i]) - recon, 2) * Tensor(weight)
        mse_total = mse_total + err.sum()
        kl_global_total = kl_global_total + kl_gaussian_diag(mu_g, logvar_g)
        mu_locals.append(mu_l)
        logvar_locals.append(logvar_l)
        z_locals.append(z_l)
        z_globals.append(z_g)

    mu_grid = nd.stack_cols(mu_locals)        # (repr_size, n)
    logvar_grid = nd.stack_cols(logvar_locals)
    kl_local_total = Tensor(0.0)
    for prior in priors:
        if grams is not None and (prior.kernel, prior.length_scale, n) in grams:
            gram = grams[(prior.kernel, prior.length_scale, n)]
        else:
            gram = prior.gram(np.arange(n, dtype=np.float64))
            if grams is not None:
                grams[(prior.kernel, prior.length_scale, n)] = gram
        for dim in prior.dims:
            kl_local_total = kl_local_total + kl_gaussian_gp(mu_grid[dim], logvar_grid[dim], gram)

    mse = mse_total / n
    kl_local = kl_local_total / n
    kl_global = kl_global_total / n

    total = (1.0 - kl_weight) * mse
    if kl_weight != 0.0:
        total = total + kl_weight * (kl_local + kl_global)
    l_reg_value = 0.0
    if reg_weight != 0.0:
        if partner_rng is None:
            raise ValueError("counterfactual regularization needs a partner rng")
        partners = [(i + 1 + int(partner_rng.integers(n - 1))) % n for i in range(n)]
        l_reg = counterfactual_reg(z_locals, z_globals, dec, enc_g, partners)
        total = total + reg_weight * l_reg
        l_reg_value = l_reg.item()

    terms = ElboTerms(
        mse=mse.item(),
        kl_local=kl_local.item(),
        kl_global=kl_global.item(),
        l_reg=l_reg_value,
        kl_weight=float(kl_weight),
        reg_weight=float(reg_weight),
        total=total.item(),
    )
    return total, terms


def _consecutive_chunks(n_windows: int, batch_size: int) -> list[np.ndarray]:
    """Consecutive index chunks of ``batch_size``; a trailing single window
    joins the previous chunk so counterfactual pairing stays possible."""
    chunks = [np.arange(start, min(start + batch_size, n_windows))
              for start in range(0, n_windows, batch_size)]
    if len(chunks) > 1 and chunks[-1].size == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _posterior_mean_mse(windows, masks, enc_l, enc_g, dec) -> tuple[float, np.ndarray]:
    """Observed-entry MSE of posterior-mean reconstructions: aggregate and per-feature."""
    sq_sum = np.zeros(windows.shape[1])
    count = np.zeros(windows.shape[1])
    with nd.no_grad():
        for i in range(windows.shape[0]):
            mu_l, _ = enc_l(windows[i])
            mu_g, _ = enc_g(windows[i])
            recon = dec(mu_l, mu_g).data
            err = (windows[i] - recon) ** 2
            sq_sum += np.sum(err * masks[i], axis=1)
            count += masks[i].sum(axis=1)
    per_feature = sq_sum / np.maximum(count, 1)
    aggregate = float(sq_sum.sum() / max(1.0, count.sum()))
    return aggregate, per_feature


def train_dlg(values: np.ndarray, enc_l, enc_g, dec, priors, *, mask: np.ndarray | None = None,
              lr: float = 0.001, batch_size: int = 5, epochs: int = 30,
              kl_weight: float = 0.01, reg_weight: float = 0.8,
              train_fraction: float = 0.8, seed: int = 0) -> list[dict]:
    """Adam training of the generative objective on a temporal 80/20 split.

    Batches are consecutive window chunks (the GP priors span each chunk's
    grid).  Every epoch logs the loss-term breakdown and the held-out
    posterior-mean reconstruction error.
    """
    ensure_normalized(values)
    window = dec.spec.steps
    train_values, heldout_values, train_mask, heldout_mask = temporal_split(
        values, window, train_fraction, mask)

    train_batch = make_windows(MultivariateSeries(values=train_values, mask=train_mask), window)
    heldout = None
    if heldout_values.shape[1] >= window:
        heldout = make_windows(MultivariateSeries(values=heldout_values, mask=heldout_mask), window)

    chunks = _consecutive_chunks(train_batch.n_windows, batch_size)
    noise_rng = substream(seed, "dlg-reparameterization")
    partner_rng = substream(seed, "dlg-counterfactual")
    order_rng = substream(seed, "dlg-epochs")

    params = {f"enc_l.{k}": v for k, v in enc_l.parameters().items()}
    params.update({f"enc_g.{k}": v for k, v in enc_g.parameters().items()})
    params.update({f"dec.{k}": v for k, v in dec.parameters().items()})
    optimizer = nd.Adam(params, lr=lr)

    grams: dict = {}
    history = []
    for epoch in range(1, epochs + 1):
        chunk_order = np.arange(len(chunks))
        order_rng.shuffle(chunk_order)
        sums = {"train_loss": 0.0, "mse": 0.0, "kl_local": 0.0, "kl_global": 0.0, "l_reg": 0.0}
        for ci in chunk_order:
            idx = chunks[ci]
            optimizer.zero_grad()
            loss, terms = elbo_loss(
                train_batch.windows[idx], train_batch.masks[idx],
                enc_l, enc_g, dec, priors,
                kl_weight=kl_weight, reg_weight=reg_weight,
                noise_rng=noise_rng, partner_rng=partner_rng, grams=grams,
            )
            nd.backward(loss)
            optimizer.step()
            sums["train_loss"] += terms.total
            sums["mse"] += terms.mse
            sums["kl_local"] += terms.kl_local
            sums["kl_global"] += terms.kl_global
            sums["l_reg"] += terms.l_reg
        row = {"epoch": epoch}
        row.update({k: v / len(chunks) for k, v in sums.items()})
        if heldout is not None:
            aggregate, per_feature = _posterior_mean_mse(
                heldout.windows, heldout.masks, enc_l, enc_g, dec)
            row["heldout_mse"] = aggregate
            row["heldout_mse_lat"] = float(per_feature[0])
            row["heldout_mse_lon"] = float(per_feature[1])
        else:
            row["heldout_mse"] = float("nan")
            row["heldout_mse_lat"] = float("nan")
            row["heldout_mse_lon"] = float("nan")
        history.append(row)
    return history


def reconstruct(values: np.ndarray, enc_l, enc_g, dec, *, train_fraction: float = 0.8
                ) -> tuple[np.ndarray, np.ndarray]:
    """Posterior-mean reconstruction of a whole series plus a per-feature sigma band.

    The band is the residual standard deviation over the training portion
    of the series (the part the model was fitted on).
    """
    window = dec.spec.steps
    batch = make_windows(MultivariateSeries(values=values), window)
    pieces = []
    with nd.no_grad():
        for i in range(batch.n_windows):
            mu_l, _ = enc_l(batch.windows[i])
            mu_g, _ = enc_g(batch.windows[i])
            pieces.append(dec(mu_l, mu_g).data)
    recon = np.concatenate(pieces, axis=1)[:, :values.shape[1]]
    n_train = max(1, int(batch.n_windows * train_fraction)) * window
    n_train = min(n_train, values.shape[1])
    sigma = np.std(values[:, :n_train] - recon[:, :n_train], axis=1)
    return recon, sigma


class DlgRepresentationLearner(BaseEstimator, TransformerMixin):
    """Generative local/global representation learner with a fit/transform surface.

    ``fit`` expects a normalized series; ``transform`` returns the local
    posterior means, one row per window; ``encode`` adds the global codes;
    ``reconstruct`` rebuilds the signal with an error band.
    """

    def __init__(self, window: int = 19, repr_size: int = 16, global_size: int = 2,
                 kernel_size: int = 3, channels: tuple = (32, 64, 64), decoder_hidden: int = 64,
                 lr: float = 0.001, batch_size: int = 5, epochs: int = 30,
                 kl_weight: float = 0.01, reg_weight: float = 0.8,
                 prior_kernels: tuple = ("rbf", "matern32"),
                 prior_scales: tuple = (2.0, 1.0, 0.5, 0.25),
                 train_fraction: float = 0.8, seed: int = 0):
        self.window = window
        self.repr_size = repr_size
        self.global_size = global_size
        self.kernel_size = kernel_size
        self.channels = channels
        self.decoder_hidden = decoder_hidden
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.kl_weight = kl_weight
        self.reg_weight = reg_weight
        self.prior_kernels = prior_kernels
        self.prior_scales = prior_scales
        self.train_fraction = train_fraction
        self.seed = seed

    def _validate(self):
        if self.global_size > self.repr_size:
            raise ValueError(f"global_size ({self.global_size}) must be <= repr_size ({self.repr_size})")
        if not 0.0 <= self.kl_weight <= 1.0:
            raise ValueError(f"kl_weight must be in [0, 1], got {self.kl_weight}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")

    def _build_networks(self):
        enc_l = DilatedConvEncoder(
            EncoderSpec(2, self.window, self.repr_size, self.kernel_size,
                        tuple(self.channels), variational=True),
            substream(self.seed, "dlg-init-enc-local"))
        enc_g = DilatedConvEncoder(
            EncoderSpec(2, self.window, self.global_size, self.kernel_size,
                        tuple(self.channels), variational=True),
            substream(self.seed, "dlg-init-enc-global"))
        dec = RnnDecoder(
            DecoderSpec(self.repr_size, self.global_size, self.decoder_hidden, 2, self.window),
            substream(self.seed, "dlg-init-dec"))
        return enc_l, enc_g, dec

    def _priors(self):
        return default_priors(self.repr_size, tuple(self.prior_kernels), tuple(self.prior_scales))

    def fit(self, X, y=None):
        self._validate()
        values = as_feature_matrix(X)
        self.encoder_local_, self.encoder_global_, self.decoder_ = self._build_networks()
        self.priors_ = self._priors()
        self.history_ = train_dlg(
            values, self.encoder_local_, self.encoder_global_, self.decoder_, self.priors_,
            mask=observation_mask(X), lr=self.lr, batch_size=self.batch_size,
            epochs=self.epochs, kl_weight=self.kl_weight, reg_weight=self.reg_weight,
            train_fraction=self.train_fraction, seed=self.seed,
        )
        return self

    def _require_fitted(self):
        if not hasattr(self, "decoder_"):
            raise NotFittedError("this DlgRepresentationLearner instance is not fitted yet")

    def _posterior_means(self, X):
        values = as_feature_matrix(X)
        batch = make_windows(MultivariateSeries(values=values), self.window)
        locals_, globals_ = [], []
        with nd.no_grad():
            for i in range(batch.n_windows):
                locals_.append(self.encoder_local_(batch.windows[i])[0].data)
                globals_.append(self.encoder_global_(batch.windows[i])[0].data)
        return np.stack(locals_), np.stack(globals_), batch.start_indices

    def transform(self, X) -> np.ndarray:
        self._require_fitted()
        return self._posterior_means(X)[0]

    def encode(self, X):
        """Local and global representations plus window bookkeeping."""
        from .evaluation import RepresentationSet

        self._require_fitted()
        z_local, z_global, starts = self._posterior_means(X)
        return RepresentationSet(Z=z_local, z_g=z_global, start_indices=starts, source="dlg")

    def reconstruct(self, X) -> tuple[np.ndarray, np.ndarray]:
        self._require_fitted()
        values = as_feature_matrix(X)
        return reconstruct(values, self.encoder_local_, self.encoder_global_, self.decoder_,
                           train_fraction=self.train_fraction)

    def save(self, path):
        self._require_fitted()
        params = {}
        for prefix, net in (("enc_l", self.encoder_local_), ("enc_g", self.encoder_global_),
                            ("dec", self.decoder_)):
            params.update({f"{prefix}/{k}": v for k, v in net.parameters().items()})
        nd.save_checkpoint(path, params, meta={"model": "dlg", "hyperparams": self.get_params()})

    @classmethod
    def load(cls, path) -> "DlgRepresentationLearner":
        arrays, meta = nd.load_checkpoint(path)
        if meta.get("model") != "dlg":
            raise ValueError(f"checkpoint is for model {meta.get('model')!r}, expected 'dlg'")
        hyper = dict(meta["hyperparams"])
        for key in ("channels", "prior_kernels", "prior_scales"):
            hyper[key] = tuple(hyper[key])
        learner = cls(**hyper)
        learner.encoder_local_, learner.encoder_global_, learner.decoder_ = learner._build_networks()
        learner.priors_ = learner._priors()
        for prefix, net in (("enc_l", learner.encoder_local_), ("enc_g", learner.encoder_global_),
                            ("dec", learner.decoder_)):
            for name, tensor in net.parameters().items():
                tensor.data[...] = arrays[f"{prefix}/{name}"]
        learner.history_ = []
        return learner
