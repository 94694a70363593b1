import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iob import datasets, nn, training
from iob.bottleneck import IobConfig
from iob.errors import DimensionError, DomainError
from iob.intrinsic import (
    IdReport,
    MaskOptConfig,
    MaskParams,
    chi2_threshold,
    encode_dataset,
    estimate_id,
    latent_loglik,
    latent_loglik_grad,
    maximize_masked_loglik,
    wilks_sweep,
)

VAR = 0.01


def linear_decoder(w, b):
    layer = nn.DenseLayer(w.shape[1], w.shape[0], "identity", dtype=np.float64)
    layer.weight.data = np.array(w, dtype=np.float64)
    layer.bias.data = np.array(b, dtype=np.float64)
    return nn.Sequential([layer])


def linear_problem(seed, scales=(1.0, 0.8, 1.2, 0.0), n=400, p=6, noise=0.1):
    rng = np.random.default_rng(seed)
    k_max = len(scales)
    w = rng.standard_normal((p, k_max))
    b = rng.standard_normal(p)
    z = rng.standard_normal((n, k_max))
    y = b + (z * np.asarray(scales)) @ w.T + noise * rng.standard_normal((n, p))
    return linear_decoder(w, b), z, y, w, b


def oracle_loglik(w, b, z, y, e, variance=VAR):
    r = y - b - (z * e) @ w.T
    n, p = y.shape
    return -(np.sum(r * r) / (2 * variance) + n * p / 2 * math.log(2 * math.pi * variance))


def oracle_best(w, b, z, y, k, variance=VAR):
    """Closed-form maximizer over the first ``k`` mask entries (least squares)."""
    e = np.zeros(w.shape[1])
    if k:
        # y_i - b = sum_j e_j z_ij w_j, one column per free entry
        cols = np.stack([(z[:, j : j + 1] * w[:, j]).ravel() for j in range(k)], axis=1)
        e[:k] = np.linalg.lstsq(cols, (y - b).ravel(), rcond=None)[0]
    return e, oracle_loglik(w, b, z, y, e, variance)


class TestThreshold:
    def test_chi2_95(self):
        assert chi2_threshold(0.05) == pytest.approx(3.841, abs=1e-3)

    def test_other_levels(self):
        assert chi2_threshold(0.01) == pytest.approx(6.635, abs=1e-3)
        assert chi2_threshold(0.05, dof=2) == pytest.approx(5.991, abs=1e-3)

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1])
    def test_bad_alpha(self, alpha):
        with pytest.raises(DomainError):
            chi2_threshold(alpha)


class TestMaskParams:
    def test_constraint_enforced(self):
        m = MaskParams([1.0, 2.0, 3.0, 4.0], 2)
        np.testing.assert_array_equal(m.e, [1, 2, 0, 0])

    def test_initial(self):
        np.testing.assert_array_equal(MaskParams.initial(2, 4).e, [1, 1, 0, 0])

    def test_extended(self):
        m = MaskParams([0.5, 0.7, 0, 0], 2).extended()
        assert m.k == 3
        np.testing.assert_array_equal(m.e, [0.5, 0.7, 1, 0])

    def test_range(self):
        with pytest.raises(DomainError):
            MaskParams(np.ones(3), 4)


class TestLatentLoglik:
    def test_matches_oracle(self):
        dec, z, y, w, b = linear_problem(0)
        e = np.array([0.9, 1.1, 0.3, 0.0])
        assert latent_loglik(dec, z, y, MaskParams(e, 3), VAR) == pytest.approx(oracle_loglik(w, b, z, y, e), rel=1e-10)

    def test_ones_is_open_model(self):
        model = training.build_autoencoder(training.scurve_spec(4), seed=1)
        x = datasets.sample_scurve(datasets.ScurveConfig(n_samples=300, seed=1)).val
        z = encode_dataset(model, x)
        got = latent_loglik(model.decoder, z, x, MaskParams.initial(4, 4), 0.7)
        want = -float(nn.gaussian_nll(model.reconstruct(x, 4), x, 0.7).data) * len(x)
        assert got == pytest.approx(want, rel=1e-6)

    def test_zeros_is_closed_model(self):
        model = training.build_autoencoder(training.scurve_spec(4), seed=2)
        x = datasets.sample_scurve(datasets.ScurveConfig(n_samples=300, seed=1)).val
        z = encode_dataset(model, x)
        got = latent_loglik(model.decoder, z, x, MaskParams(np.zeros(4), 0), 0.7)
        want = -float(nn.gaussian_nll(model.reconstruct(x, 0), x, 0.7).data) * len(x)
        assert got == pytest.approx(want, rel=1e-6)

    def test_chunking_invariant(self):
        dec, z, y, *_ = linear_problem(1)
        m = MaskParams(np.ones(4), 4)
        assert latent_loglik(dec, z, y, m, VAR, chunk=7) == pytest.approx(latent_loglik(dec, z, y, m, VAR), rel=1e-12)

    def test_gradient_finite_difference(self):
        dec, z, y, *_ = linear_problem(2)
        e = np.array([0.8, 1.3, 0.6, 0.0])
        value, grad = latent_loglik_grad(dec, z, y, MaskParams(e, 3), VAR)
        assert value == pytest.approx(latent_loglik(dec, z, y, MaskParams(e, 3), VAR))
        h = 1e-5
        for j in range(3):
            ep, em = e.copy(), e.copy()
            ep[j] += h
            em[j] -= h
            fd = (latent_loglik(dec, z, y, ep, VAR) - latent_loglik(dec, z, y, em, VAR)) / (2 * h)
            assert grad[j] == pytest.approx(fd, rel=1e-5)

    def test_constrained_gradient_projected(self):
        dec, z, y, *_ = linear_problem(3, scales=(1.0, 1.0, 1.0, 1.0))
        _, grad = latent_loglik_grad(dec, z, y, MaskParams(np.ones(4), 2), VAR)
        assert np.all(grad[2:] == 0) and np.any(grad[:2] != 0)

    def test_decoder_left_trainable(self):
        dec, z, y, *_ = linear_problem(4)
        latent_loglik_grad(dec, z, y, MaskParams(np.ones(4), 4), VAR)
        assert all(p.requires_grad for p in dec.params())
        assert all(p.grad is None or not np.any(p.grad) for p in dec.params())

    def test_shape_mismatch(self):
        dec, z, y, *_ = linear_problem(5)
        with pytest.raises(DimensionError):
            latent_loglik(dec, z[:, :3], y, np.ones(3), VAR)
        with pytest.raises(DimensionError):
            latent_loglik(dec, z, y[:-1], np.ones(4), VAR)


class TestMaximize:
    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_reaches_least_squares_optimum(self, k):
        dec, z, y, w, b = linear_problem(10)
        fit = maximize_masked_loglik(dec, z, y, k, VAR, MaskOptConfig(max_iter=2000))
        e_star, l_star = oracle_best(w, b, z, y, k)
        assert fit.loglik <= l_star + 1e-6 * abs(l_star)
        assert fit.loglik == pytest.approx(l_star, rel=1e-4)
        np.testing.assert_allclose(fit.mask.e, e_star, atol=0.02)
        assert np.all(fit.mask.e[k:] == 0)

    def test_k0_is_evaluation(self):
        dec, z, y, w, b = linear_problem(11)
        fit = maximize_masked_loglik(dec, z, y, 0, VAR)
        assert fit.iterations == 0 and fit.converged
        assert fit.loglik == pytest.approx(oracle_loglik(w, b, z, y, np.zeros(4)), rel=1e-10)

    def test_iteration_cap_flags(self):
        dec, z, y, *_ = linear_problem(12)
        fit = maximize_masked_loglik(dec, z, y, 3, VAR, MaskOptConfig(max_iter=3))
        assert not fit.converged and fit.iterations == 3
        start = latent_loglik(dec, z, y, MaskParams.initial(3, 4), VAR)
        assert fit.loglik >= start

    def test_floor_is_respected(self):
        dec, z, y, *_ = linear_problem(13)
        fit = maximize_masked_loglik(dec, z, y, 2, VAR, MaskOptConfig(max_iter=1),
                                     floor=(MaskParams(np.ones(4), 2), 1e300))
        assert fit.loglik == 1e300

    def test_init_width_checked(self):
        dec, z, y, *_ = linear_problem(14)
        with pytest.raises(DomainError):
            maximize_masked_loglik(dec, z, y, 2, VAR, init=MaskParams.initial(3, 4))


class TestSweep:
    @pytest.fixture(scope="class")
    @staticmethod
    def problem():
        return linear_problem(20, scales=(1.0, 1.0, 0.5, 0.0, 0.0))

    def test_matches_closed_form(self, problem):
        dec, z, y, w, b = problem
        rep = wilks_sweep(dec, z, y, variance=VAR, full=True, opt_config=MaskOptConfig(max_iter=2000))
        exact = [oracle_best(w, b, z, y, k)[1] for k in range(6)]
        np.testing.assert_allclose(rep.loglik, exact, rtol=1e-4)
        d_exact = [2 * (b_ - a) for a, b_ in zip(exact, exact[1:])]
        k_exact = next(k for k, d in enumerate(d_exact) if d <= chi2_threshold())
        assert rep.k_hat == k_exact == 3
        assert not rep.saturated

    def test_nested_monotone(self, problem):
        dec, z, y, *_ = problem
        rep = wilks_sweep(dec, z, y, variance=VAR, full=True)
        assert all(b >= a for a, b in zip(rep.loglik, rep.loglik[1:]))
        assert len(rep.statistic) == 5 and len(rep.masks) == 6

    def test_early_exit_same_estimate(self, problem):
        dec, z, y, *_ = problem
        short = wilks_sweep(dec, z, y, variance=VAR)
        full = wilks_sweep(dec, z, y, variance=VAR, full=True)
        assert short.k_hat == full.k_hat
        assert len(short.statistic) == short.k_hat + 1
        np.testing.assert_allclose(short.loglik, full.loglik[: len(short.loglik)])

    def test_averaged_mode_scales(self, problem):
        dec, z, y, *_ = problem
        tot = wilks_sweep(dec, z, y, variance=VAR, full=True)
        avg = wilks_sweep(dec, z, y, variance=VAR, full=True, mode="averaged")
        np.testing.assert_allclose(np.array(avg.statistic) * len(z), tot.statistic, rtol=1e-9)
        assert avg.mode == "averaged" and avg.n_test == len(z)

    def test_statistic_free_of_normalizing_constant(self, problem):
        dec, z, y, w, b = problem
        rep = wilks_sweep(dec, z, y, variance=VAR, full=True, opt_config=MaskOptConfig(max_iter=2000))
        for k, d in enumerate(rep.statistic):
            sse = [np.sum((y - b - (z * rep.masks[j]) @ w.T) ** 2) for j in (k, k + 1)]
            assert d == pytest.approx((sse[0] - sse[1]) / VAR, rel=1e-8, abs=1e-6)

    def test_saturation(self):
        dec, z, y, *_ = linear_problem(21, scales=(1.0, 1.0, 1.0))
        rep = wilks_sweep(dec, z, y, variance=VAR)
        assert rep.k_hat == 3 and rep.saturated and rep.summary() == "k_hat=3 saturated"

    def test_nothing_to_explain(self):
        rng = np.random.default_rng(22)
        dec = linear_decoder(rng.standard_normal((4, 3)), np.zeros(4))
        z = rng.standard_normal((300, 3))
        y = 0.1 * rng.standard_normal((300, 4))
        # the decoder maps latents to unrelated directions; opening them cannot help much
        rep = wilks_sweep(dec, z, y, variance=VAR)
        assert rep.k_hat == 0

    def test_bad_arguments(self, problem):
        dec, z, y, *_ = problem
        with pytest.raises(DomainError):
            wilks_sweep(dec, z, y, mode="mean")
        with pytest.raises(DimensionError):
            wilks_sweep(dec, z, y, k_max=3)

    @given(st.integers(0, 10**6))
    @settings(max_examples=10, deadline=None)
    def test_monotone_random_problems(self, seed):
        rng = np.random.default_rng(seed)
        scales = tuple(rng.uniform(0, 1.5, size=4))
        dec, z, y, *_ = linear_problem(seed, scales=scales, n=100, p=5)
        rep = wilks_sweep(dec, z, y, variance=VAR, full=True, opt_config=MaskOptConfig(max_iter=100))
        assert all(b >= a for a, b in zip(rep.loglik, rep.loglik[1:]))
        assert all(d >= 0 for d in rep.statistic)


class TestReport:
    def _report(self):
        rep = IdReport(0.05, chi2_threshold(), "total", 10, loglik=[-10.0, -4.0, -3.5], statistic=[12.0, 1.0], k_hat=1)
        rep.masks = [np.zeros(2), np.array([1, 0]), np.ones(2)]
        return rep

    def test_csv(self):
        lines = self._report().to_csv().strip().splitlines()
        assert lines[0] == "k,L_k,D_k,threshold,reject"
        assert lines[1] == "0,-10,12,3.841459,1"
        assert lines[2] == "1,-4,1,3.841459,0"
        assert lines[3] == "2,-3.5,,3.841459,"

    def test_flags(self):
        rep = self._report()
        assert rep.reject == [True, False]
        assert rep.p_values[0] == pytest.approx(5.32e-4, rel=1e-2)
        assert rep.summary() == "k_hat=1"


class TestTrainedModel:
    @pytest.fixture(scope="class")
    @staticmethod
    def run():
        b = datasets.sample_linear_gaussian(datasets.LinearGaussianConfig(rank=2, dim=8, n_samples=3000, seed=5))
        model, _ = training.train_iob(training.linear_spec(8, 4), IobConfig.linear(4), b,
                                      training.TrainConfig(lr=1e-3, max_epochs=200))
        return model, b

    def test_open_mask_near_one(self, run):
        model, b = run
        rep = estimate_id(model, b, full=True)
        assert np.all(np.abs(rep.masks[-1][:2] - 1) <= 0.1)

    def test_rank_recovered(self, run):
        model, b = run
        assert estimate_id(model, b).k_hat == 2
