import math

import numpy as np
import pytest

from maneuverlab import ndtensor as nd
from maneuverlab.dlg import (
    DlgRepresentationLearner,
    GpPrior,
    counterfactual_reg,
    default_priors,
    elbo_loss,
    gaussian_logpdf_diag,
    gp_gram,
    kl_gaussian_diag,
    kl_gaussian_gp,
    reconstruct,
    reparameterize,
    train_dlg,
)
from maneuverlab.ndtensor import Tensor
from maneuverlab.nets import DecoderSpec, DilatedConvEncoder, EncoderSpec, RnnDecoder
from maneuverlab.signals import MultivariateSeries, four_state_config, normalize, synthesize
from conftest import check_gradients


class ReplayNoise:
    """Deterministic stand-in for the reparameterization stream (FD checks
    need the loss to be a pure function of the parameters)."""

    BANK = np.random.default_rng(99).standard_normal(4096)

    def __init__(self):
        self.i = 0

    def standard_normal(self, n):
        out = self.BANK[self.i:self.i + n]
        self.i += n
        return out.copy()


class ReplayPartners:
    def __init__(self):
        self.i = 0

    def integers(self, k):
        self.i += 1
        return self.i % k


class TestGpGram:
    @pytest.mark.parametrize("kernel", ["rbf", "matern32"])
    def test_unit_diagonal_plus_jitter(self, kernel):
        gram = gp_gram(kernel, 1.0, np.arange(5.0))
        assert np.allclose(np.diag(gram), 1.0 + 1e-6, atol=1e-15)

    def test_rbf_analytic_value(self):
        gram = gp_gram("rbf", 1.0, np.array([0.0, 1.0]))
        assert abs(gram[0, 1] - math.exp(-0.5)) < 1e-12

    def test_matern_analytic_value(self):
        gram = gp_gram("matern32", 2.0, np.array([0.0, 1.0]))
        s = math.sqrt(3.0) / 2.0
        assert abs(gram[0, 1] - (1.0 + s) * math.exp(-s)) < 1e-12

    def test_random_grid_is_psd(self, rng):
        times = np.sort(rng.uniform(0, 10, size=8))
        for kernel in ("rbf", "matern32"):
            gram = gp_gram(kernel, 0.5, times)
            assert np.linalg.eigvalsh(gram).min() >= -1e-9

    @pytest.mark.parametrize("kernel", ["rbf", "matern32"])
    @pytest.mark.parametrize("scale", [2.0, 1.0, 0.5, 0.25])
    @pytest.mark.parametrize("n", [2, 19, 64])
    def test_configured_kernels_psd_up_to_64(self, kernel, scale, n):
        gram = gp_gram(kernel, scale, np.arange(float(n)))
        assert np.linalg.eigvalsh(gram).min() >= -1e-9
        np.linalg.cholesky(gram)

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            gp_gram("rbf", 0.0, np.arange(3.0))

    def test_bad_kernel(self):
        with pytest.raises(ValueError):
            gp_gram("cauchy", 1.0, np.arange(3.0))


class TestKlGaussianDiag:
    def test_standard_normal_is_zero(self):
        kl = kl_gaussian_diag(Tensor(np.zeros(4)), Tensor(np.zeros(4)))
        assert kl.item() == 0.0

    def test_unit_mean_is_half(self):
        kl = kl_gaussian_diag(Tensor([1.0]), Tensor([0.0]))
        assert abs(kl.item() - 0.5) < 1e-15

    def test_matches_monte_carlo(self, rng):
        mu = rng.normal(size=5)
        logvar = rng.normal(scale=0.5, size=5)
        kl = kl_gaussian_diag(Tensor(mu), Tensor(logvar)).item()
        sigma = np.exp(0.5 * logvar)
        z = mu + sigma * rng.standard_normal((1_000_000, 5))
        log_q = -0.5 * (((z - mu) / sigma) ** 2 + 2 * np.log(sigma) + np.log(2 * np.pi)).sum(axis=1)
        log_p = -0.5 * (z ** 2 + np.log(2 * np.pi)).sum(axis=1)
        estimate = (log_q - log_p).mean()
        assert abs(estimate - kl) / abs(kl) < 0.01


class TestKlGaussianGp:
    def test_identity_gram_standard_normal_is_zero(self):
        kl = kl_gaussian_gp(Tensor(np.zeros(4)), Tensor(np.zeros(4)), np.eye(4))
        assert abs(kl.item()) < 1e-12

    def test_identity_gram_reduces_to_diag(self, rng):
        mu = Tensor(rng.normal(size=6))
        logvar = Tensor(rng.normal(scale=0.5, size=6))
        gp = kl_gaussian_gp(mu, logvar, np.eye(6)).item()
        diag = kl_gaussian_diag(mu, logvar).item()
        assert abs(gp - diag) < 1e-10

    def test_matches_monte_carlo(self, rng):
        times = np.arange(6.0)
        gram = gp_gram("rbf", 1.5, times)
        mu = rng.normal(scale=0.5, size=6)
        logvar = rng.normal(scale=0.3, size=6)
        kl = kl_gaussian_gp(Tensor(mu), Tensor(logvar), gram).item()

        sigma = np.exp(0.5 * logvar)
        z = mu + sigma * rng.standard_normal((1_000_000, 6))
        log_q = -0.5 * (((z - mu) / sigma) ** 2 + 2 * np.log(sigma) + np.log(2 * np.pi)).sum(axis=1)
        chol = np.linalg.cholesky(gram)
        half_logdet = np.log(np.diag(chol)).sum()
        y = np.linalg.solve(chol, z.T).T
        log_p = -0.5 * (y ** 2).sum(axis=1) - half_logdet - 3 * np.log(2 * np.pi)
        estimate = (log_q - log_p).mean()
        assert abs(estimate - kl) / abs(kl) < 0.02

    def test_non_psd_gram_raises(self):
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(np.linalg.LinAlgError):
            kl_gaussian_gp(Tensor(np.zeros(2)), Tensor(np.zeros(2)), bad)

    def test_gradients(self, rng):
        gram = gp_gram("matern32", 1.0, np.arange(5.0))
        mu = Tensor(rng.normal(size=5), requires_grad=True)
        logvar = Tensor(rng.normal(scale=0.3, size=5), requires_grad=True)
        check_gradients(lambda: kl_gaussian_gp(mu, logvar, gram), {"mu": mu, "logvar": logvar}, tol=1e-5)


class CenterOnSecondEncoder:
    """Stub posterior centered on the partner's code with tiny variance."""

    def __init__(self, centers):
        self.centers = centers
        self.calls = 0

    def __call__(self, w_star):
        center = self.centers[self.calls]
        self.calls += 1
        return Tensor(center), Tensor(np.full(center.shape, -10.0))


class TestCounterfactualReg:
    def test_identical_global_codes_give_zero(self, rng):
        z = Tensor(rng.normal(size=3))
        z_locals = [Tensor(rng.normal(size=4)) for _ in range(2)]
        dec = RnnDecoder(DecoderSpec(4, 3, 6, 2, 8), rng)
        enc_g = DilatedConvEncoder(EncoderSpec(2, 8, 3, kernel_size=2, channels=(4, 4, 4),
                                               variational=True), rng)
        out = counterfactual_reg(z_locals, [z, z], dec, enc_g, [1, 0])
        assert abs(out.item()) < 1e-12

    def test_posterior_at_partner_is_strongly_negative(self, rng):
        z0 = np.zeros(3)
        z1 = np.full(3, 5.0)
        z_globals = [Tensor(z0), Tensor(z1)]
        z_locals = [Tensor(rng.normal(size=4)) for _ in range(2)]
        dec = lambda z_l, z_g: Tensor(np.zeros((2, 8)))
        enc_g = CenterOnSecondEncoder([z1, z0])  # centers on the partner each call
        out = counterfactual_reg(z_locals, z_globals, dec, enc_g, [1, 0])
        assert out.item() < -1000

    def test_batch_of_one_rejected(self, rng):
        dec = RnnDecoder(DecoderSpec(4, 3, 6, 2, 8), rng)
        enc_g = DilatedConvEncoder(EncoderSpec(2, 8, 3, kernel_size=2, channels=(4, 4, 4),
                                               variational=True), rng)
        with pytest.raises(ValueError):
            counterfactual_reg([Tensor(np.zeros(4))], [Tensor(np.zeros(3))], dec, enc_g, [0])

    def test_gradients_through_decoder_and_encoder(self, rng):
        dec = RnnDecoder(DecoderSpec(3, 2, 4, 2, 8), rng)
        enc_g = DilatedConvEncoder(EncoderSpec(2, 8, 2, kernel_size=2, channels=(3, 3, 3),
                                               variational=True), rng)
        z_locals = [Tensor(rng.normal(size=3)) for _ in range(2)]
        z_globals = [Tensor(rng.normal(size=2)) for _ in range(2)]
        params = {f"dec.{k}": v for k, v in dec.parameters().items()}
        params.update({f"enc_g.{k}": v for k, v in enc_g.parameters().items()})

        def build():
            return counterfactual_reg(z_locals, z_globals, dec, enc_g, [1, 0])

        assert check_gradients(build, params, tol=1e-4) < 1e-4


def tiny_networks(rng, window=8, repr_size=4, global_size=2):
    enc_l = DilatedConvEncoder(EncoderSpec(2, window, repr_size, kernel_size=2,
                                           channels=(4, 4, 4), variational=True), rng)
    enc_g = DilatedConvEncoder(EncoderSpec(2, window, global_size, kernel_size=2,
                                           channels=(4, 4, 4), variational=True), rng)
    dec = RnnDecoder(DecoderSpec(repr_size, global_size, 6, 2, window), rng)
    return enc_l, enc_g, dec


class TestElboLoss:
    def test_autoencoder_special_case_loss_is_mse(self, rng):
        enc_l, enc_g, dec = tiny_networks(rng)
        windows = rng.normal(size=(4, 2, 8))
        priors = default_priors(4)
        loss, terms = elbo_loss(windows, None, enc_l, enc_g, dec, priors,
                                kl_weight=0.0, reg_weight=0.0, noise_rng=ReplayNoise())
        assert loss.item() == terms.mse
        assert abs(loss.item() - terms.mse) < 1e-12

    def test_perfect_reconstruction_leaves_weighted_kl(self, rng):
        enc_l, enc_g, dec_real = tiny_networks(rng)
        windows = rng.normal(size=(3, 2, 8))
        calls = {"i": 0}

        def dec(z_l, z_g):
            out = Tensor(windows[calls["i"] % 3])
            calls["i"] += 1
            return out

        priors = default_priors(4)
        loss, terms = elbo_loss(windows, None, enc_l, enc_g, dec, priors,
                                kl_weight=0.01, reg_weight=0.0, noise_rng=ReplayNoise())
        assert terms.mse == 0.0
        expected = 0.01 * (terms.kl_local + terms.kl_global)
        assert abs(loss.item() - expected) < 1e-12

    def test_decomposition_recombines_exactly(self, rng):
        enc_l, enc_g, dec = tiny_networks(rng)
        windows = rng.normal(size=(5, 2, 8))
        masks = rng.random(size=(5, 2, 8)) > 0.2
        priors = default_priors(4)
        loss, terms = elbo_loss(windows, masks, enc_l, enc_g, dec, priors,
                                kl_weight=0.01, reg_weight=0.8,
                                noise_rng=ReplayNoise(), partner_rng=ReplayPartners())
        assert abs(loss.item() - terms.recombined()) < 1e-12
        assert terms.kl_local >= 0.0
        assert terms.kl_global >= 0.0

    def test_masked_entries_do_not_contribute(self, rng):
        enc_l, enc_g, dec = tiny_networks(rng)
        windows = rng.normal(size=(2, 2, 8))
        masks = np.ones_like(windows, dtype=bool)
        corrupted = windows.copy()
        corrupted[0, 0, 1] = 1e6
        masks2 = masks.copy()
        masks2[0, 0, 1] = False
        _, terms_clean = elbo_loss(windows, masks2, enc_l, enc_g, dec, default_priors(4),
                                   kl_weight=0.0, reg_weight=0.0, noise_rng=ReplayNoise())
        _, terms_corrupt = elbo_loss(corrupted, masks2, enc_l, enc_g, dec, default_priors(4),
                                     kl_weight=0.0, reg_weight=0.0, noise_rng=ReplayNoise())
        assert abs(terms_clean.mse - terms_corrupt.mse) < 1e-9

    def test_empty_batch_rejected(self, rng):
        enc_l, enc_g, dec = tiny_networks(rng)
        with pytest.raises(ValueError):
            elbo_loss(np.zeros((0, 2, 8)), None, enc_l, enc_g, dec, default_priors(4),
                      kl_weight=0.01, reg_weight=0.8, noise_rng=ReplayNoise())

    def test_single_window_with_reg_rejected(self, rng):
        enc_l, enc_g, dec = tiny_networks(rng)
        with pytest.raises(ValueError):
            elbo_loss(np.zeros((1, 2, 8)), None, enc_l, enc_g, dec, default_priors(4),
                      kl_weight=0.01, reg_weight=0.8, noise_rng=ReplayNoise())

    def test_full_gradient_check(self, rng):
        enc_l, enc_g, dec = tiny_networks(rng)
        windows = rng.normal(size=(3, 2, 8))
        priors = default_priors(4)
        params = {}
        for prefix, net in (("enc_l", enc_l), ("enc_g", enc_g), ("dec", dec)):
            params.update({f"{prefix}.{k}": v for k, v in net.parameters().items()})

        def build():
            loss, _ = elbo_loss(windows, None, enc_l, enc_g, dec, priors,
                                kl_weight=0.01, reg_weight=0.8,
                                noise_rng=ReplayNoise(), partner_rng=ReplayPartners())
            return loss

        assert check_gradients(build, params, tol=1e-4) < 1e-4


class TestReparameterize:
    def test_mean_over_draws_matches_posterior_mean(self):
        gen = np.random.default_rng(4)
        mu = np.array([0.3, -1.2, 2.0])
        logvar = np.array([0.0, -1.0, 0.5])
        draws = np.stack([reparameterize(Tensor(mu), Tensor(logvar), gen).data
                          for _ in range(10_000)])
        sigma = np.exp(0.5 * logvar)
        tolerance = 3.0 * sigma / 100.0  # 3 standard errors at n = 10^4
        assert np.all(np.abs(draws.mean(axis=0) - mu) < tolerance)


class TestDefaultPriors:
    def test_table_configuration_partitions_evenly(self):
        priors = default_priors(16)
        assert len(priors) == 8
        assert all(len(p.dims) == 2 for p in priors)
        covered = sorted(d for p in priors for d in p.dims)
        assert covered == list(range(16))
        assert {p.kernel for p in priors} == {"rbf", "matern32"}
        assert sorted({p.length_scale for p in priors}) == [0.25, 0.5, 1.0, 2.0]

    def test_small_spaces_drop_empty_groups(self):
        priors = default_priors(3)
        assert sum(len(p.dims) for p in priors) == 3
        assert all(len(p.dims) >= 1 for p in priors)


def training_series(seed=0, length=360):
    return normalize(synthesize(four_state_config(length=length, seed=seed)))


class TestTrainDlg:
    def test_terms_logged_and_kl_nonnegative(self):
        series = training_series()
        gen = np.random.default_rng(1)
        enc_l, enc_g, dec = tiny_networks(gen, window=8)
        history = train_dlg(series.values, enc_l, enc_g, dec, default_priors(4),
                            epochs=4, batch_size=5, lr=0.005, seed=0)
        assert len(history) == 4
        for row in history:
            assert row["kl_local"] >= 0.0
            assert row["kl_global"] >= 0.0
            assert math.isfinite(row["heldout_mse"])
        assert history[-1]["mse"] < history[0]["mse"]

    def test_autoencoder_mode_loss_equals_mse(self):
        series = training_series(seed=2)
        gen = np.random.default_rng(2)
        enc_l, enc_g, dec = tiny_networks(gen, window=8)
        history = train_dlg(series.values, enc_l, enc_g, dec, default_priors(4),
                            epochs=3, batch_size=5, kl_weight=0.0, reg_weight=0.0, seed=0)
        for row in history:
            assert abs(row["train_loss"] - row["mse"]) < 1e-12
            assert row["l_reg"] == 0.0

    def test_rerun_is_bit_identical(self):
        series = training_series(seed=3)
        trajectories = []
        for _ in range(2):
            gen = np.random.default_rng(3)
            enc_l, enc_g, dec = tiny_networks(gen, window=8)
            history = train_dlg(series.values, enc_l, enc_g, dec, default_priors(4),
                                epochs=3, batch_size=5, seed=3)
            trajectories.append([row["train_loss"] for row in history])
        assert trajectories[0] == trajectories[1]

    def test_too_short_series_rejected(self, rng):
        gen = np.random.default_rng(0)
        enc_l, enc_g, dec = tiny_networks(gen, window=8)
        short = rng.uniform(-1, 1, size=(2, 8))
        with pytest.raises(ValueError, match="2 windows"):
            train_dlg(short, enc_l, enc_g, dec, default_priors(4), epochs=1, seed=0)

    def test_requires_normalized(self, rng):
        gen = np.random.default_rng(0)
        enc_l, enc_g, dec = tiny_networks(gen, window=8)
        with pytest.raises(ValueError, match="normalize"):
            train_dlg(rng.normal(size=(2, 60)) * 5, enc_l, enc_g, dec, default_priors(4),
                      epochs=1, seed=0)


class TestReconstruct:
    def test_output_length_matches_input(self):
        series = training_series(seed=4, length=100)
        gen = np.random.default_rng(4)
        enc_l, enc_g, dec = tiny_networks(gen, window=8)
        recon, sigma = reconstruct(series.values, enc_l, enc_g, dec)
        assert recon.shape == series.values.shape
        assert sigma.shape == (2,)
        assert np.all(np.isfinite(recon))

    def test_masked_region_still_reconstructed(self):
        series = normalize(synthesize(four_state_config(length=100, seed=5, missing_rate=0.3)))
        gen = np.random.default_rng(5)
        enc_l, enc_g, dec = tiny_networks(gen, window=8)
        recon, _ = reconstruct(series.values, enc_l, enc_g, dec)
        assert np.all(np.isfinite(recon[~series.mask]))

    def test_single_step_autoencoder_converges_to_identity(self):
        # window = 1 with B = 0, lambda = 0 reduces to a per-timestep
        # autoencoder; trained to convergence it must reproduce the part of
        # the signal it was fitted on.
        gen = np.random.default_rng(8)
        t = 40
        values = np.vstack([np.sin(np.linspace(0, 4 * np.pi, t)),
                            np.cos(np.linspace(0, 3 * np.pi, t))])
        values = values / np.abs(values).max(axis=1, keepdims=True)
        enc_l = DilatedConvEncoder(EncoderSpec(2, 1, 4, kernel_size=1, channels=(8, 8, 8),
                                               variational=True), gen)
        enc_g = DilatedConvEncoder(EncoderSpec(2, 1, 1, kernel_size=1, channels=(4, 4, 4),
                                               variational=True), gen)
        dec = RnnDecoder(DecoderSpec(4, 1, 16, 2, 1), gen)
        train_dlg(values, enc_l, enc_g, dec, default_priors(4), epochs=600, batch_size=5,
                  lr=0.003, kl_weight=0.0, reg_weight=0.0, seed=0)
        recon, _ = reconstruct(values, enc_l, enc_g, dec)
        fitted = slice(0, 32)  # the 80% training portion
        mse = float(np.mean((values[:, fitted] - recon[:, fitted]) ** 2))
        assert mse < 1e-3


class TestLearnerApi:
    def test_fit_transform_encode_shapes(self):
        series = training_series(seed=7, length=240)
        learner = DlgRepresentationLearner(window=8, repr_size=4, global_size=2,
                                           kernel_size=2, channels=(4, 4, 4),
                                           decoder_hidden=6, epochs=2, seed=0)
        reps = learner.fit(series).transform(series)
        assert reps.shape == (30, 4)
        rep_set = learner.encode(series)
        assert rep_set.source == "dlg"
        assert rep_set.z_g.shape == (30, 2)
        recon, sigma = learner.reconstruct(series)
        assert recon.shape == series.values.shape
        assert sigma.shape == (2,)

    def test_global_size_validation(self):
        learner = DlgRepresentationLearner(repr_size=16, global_size=32)
        with pytest.raises(ValueError, match="global_size"):
            learner.fit(np.zeros((100, 2)))

    def test_not_fitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            DlgRepresentationLearner().transform(np.zeros((100, 2)))

    def test_save_load_round_trip(self, tmp_path):
        series = training_series(seed=8, length=240)
        learner = DlgRepresentationLearner(window=8, repr_size=4, global_size=2,
                                           kernel_size=2, channels=(4, 4, 4),
                                           decoder_hidden=6, epochs=2, seed=0)
        learner.fit(series)
        path = tmp_path / "dlg.npz"
        learner.save(path)
        loaded = DlgRepresentationLearner.load(path)
        assert np.array_equal(loaded.transform(series), learner.transform(series))
        recon_a, sigma_a = learner.reconstruct(series)
        recon_b, sigma_b = loaded.reconstruct(series)
        assert np.array_equal(recon_a, recon_b)
        assert np.array_equal(sigma_a, sigma_b)
