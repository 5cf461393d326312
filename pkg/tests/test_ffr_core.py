"""
Tests for ffr_core.py
=====================
Preprocessing, empirical Bayes, the spike-and-slab column sampler and the
FFR fit.
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import PI_MAX, PI_MIN, TAU_MIN, McmcConfig, NumericalError, ValidationError
from ffr_core import (
    FunctionalDataset,
    SpikeSlabHyper,
    estimate_hyperparameters,
    fit_column,
    fit_columns,
    fit_ffr,
    make_stream,
    preprocess,
    to_original_units,
)
from wavelet import WaveletSpec, build_operator, dwt_rows, project_surface


@pytest.fixture
def small_specs():
    return (WaveletSpec(original_length=16, vanishing_moments=2, levels=2),
            WaveletSpec(original_length=8, vanishing_moments=2, levels=2))


@pytest.fixture
def band_dataset():
    """n=80 subjects, T=16, S=8, effect 1.0 at times 6..8 for every site."""
    rng = np.random.default_rng(11)
    X = rng.standard_normal((80, 16))
    beta = np.zeros((16, 8))
    beta[5:8, :] = 1.0
    Y = X @ beta + 0.3 * rng.standard_normal((80, 8))
    dataset, _ = preprocess(FunctionalDataset(Y=Y, X=X), scale=False)
    return dataset, beta


@pytest.fixture
def short_mcmc():
    return McmcConfig(total_draws=120, burn_in=60, seed=7)


# ============================================================================
# TEST: FunctionalDataset
# ============================================================================

class TestFunctionalDataset:
    """Input validation"""

    def test_missing_value_rejected(self):
        """Test NaN entries name the matrix, row and column"""
        Y = np.ones((4, 3))
        Y[2, 1] = np.nan
        with pytest.raises(ValidationError) as exc_info:
            FunctionalDataset(Y=Y, X=np.ones((4, 3)))
        assert "row 3" in str(exc_info.value)

    def test_row_mismatch_rejected(self):
        """Test X must have as many rows as Y"""
        with pytest.raises(ValidationError):
            FunctionalDataset(Y=np.ones((4, 3)), X=np.ones((5, 3)))

    def test_minimum_sizes(self):
        """Test n, S and T must be at least 2"""
        with pytest.raises(ValidationError):
            FunctionalDataset(Y=np.ones((1, 3)), X=np.ones((1, 3)))
        with pytest.raises(ValidationError):
            FunctionalDataset(Y=np.ones((4, 1)), X=np.ones((4, 3)))

    def test_default_labels(self):
        """Test labels default to 1-based positions"""
        data = FunctionalDataset(Y=np.zeros((3, 2)), X=np.zeros((3, 4)))
        assert data.s_labels == ["1", "2"]
        assert data.t_labels == ["1", "2", "3", "4"]
        assert data.q == 0


# ============================================================================
# TEST: preprocess
# ============================================================================

class TestPreprocess:
    """Centering, scaling and covariate compression"""

    def test_centering(self):
        """Test a column [1, 2, 3] centers to [-1, 0, 1]"""
        Y = np.array([[1.0, 5.0], [2.0, 3.0], [3.0, 4.0]])
        processed, report = preprocess(FunctionalDataset(Y=Y, X=Y.copy()), scale=False)
        np.testing.assert_allclose(processed.Y[:, 0], [-1.0, 0.0, 1.0])
        assert report.y_mean[0] == pytest.approx(2.0)

    def test_scaling(self):
        """Test scaled columns have mean 0 and SD 1"""
        rng = np.random.default_rng(0)
        data = FunctionalDataset(Y=rng.normal(3, 2, (50, 4)), X=rng.normal(-1, 5, (50, 6)))
        processed, _ = preprocess(data, scale=True)
        assert np.max(np.abs(processed.Y.mean(axis=0))) < 1e-10
        np.testing.assert_allclose(processed.X.std(axis=0, ddof=1), 1.0)

    def test_zero_variance_column_named(self):
        """Test scaling a constant column names it"""
        Y = np.column_stack([np.arange(5.0), np.full(5, 2.0)])
        data = FunctionalDataset(Y=Y, X=np.random.default_rng(0).normal(size=(5, 3)), s_labels=["cg1", "cg2"])
        with pytest.raises(ValidationError) as exc_info:
            preprocess(data, scale=True)
        assert "cg2" in str(exc_info.value)

    def test_correlated_covariates_give_one_component(self):
        """Test two perfectly correlated columns keep one component"""
        rng = np.random.default_rng(1)
        base = rng.standard_normal(40)
        W = np.column_stack([base, 3.0 * base + 1.0])
        data = FunctionalDataset(Y=rng.standard_normal((40, 3)), X=rng.standard_normal((40, 3)), W=W)
        processed, report = preprocess(data, pca_fraction=0.95)
        assert report.retained_components == 1
        assert processed.q == 1

    def test_component_count_matches_eigen_oracle(self):
        """Test k is the smallest count reaching 95% of the variance"""
        rng = np.random.default_rng(2)
        W = rng.standard_normal((400, 5)) @ np.diag([3.0, 2.0, 1.0, 0.5, 0.2])
        data = FunctionalDataset(Y=rng.standard_normal((400, 2)), X=rng.standard_normal((400, 2)), W=W)
        _, report = preprocess(data, pca_fraction=0.95)
        eigvals = np.sort(np.linalg.eigvalsh(np.cov(W, rowvar=False)))[::-1]
        expected = int(np.argmax(np.cumsum(eigvals) / eigvals.sum() >= 0.95) + 1)
        assert report.retained_components == expected
        assert report.variance_explained >= 0.95

    def test_scores_reproducible_from_report(self):
        """Test the recorded mean and orthonormal loadings regenerate the component scores"""
        rng = np.random.default_rng(5)
        W = rng.standard_normal((60, 4)) @ rng.standard_normal((4, 4))
        data = FunctionalDataset(Y=rng.standard_normal((60, 2)), X=rng.standard_normal((60, 2)), W=W)
        processed, report = preprocess(data, pca_fraction=0.9)
        k = report.retained_components
        np.testing.assert_allclose(report.pca_loadings.T @ report.pca_loadings, np.eye(k), atol=1e-10)
        np.testing.assert_allclose(processed.W, (W - report.pca_mean) @ report.pca_loadings, atol=1e-10)
        np.testing.assert_allclose(processed.W.mean(axis=0), 0.0, atol=1e-10)

    def test_constant_covariates_dropped(self):
        """Test continuous covariates without variance leave no component"""
        rng = np.random.default_rng(6)
        data = FunctionalDataset(Y=rng.standard_normal((20, 2)), X=rng.standard_normal((20, 2)),
                                 W=np.full((20, 2), 4.0))
        processed, report = preprocess(data)
        assert report.retained_components == 0
        assert processed.q == 0

    def test_categorical_columns_pass_through(self):
        """Test categorical covariates are left untouched"""
        rng = np.random.default_rng(3)
        group = rng.integers(0, 2, 30).astype(float)
        W = np.column_stack([rng.standard_normal(30), group])
        data = FunctionalDataset(Y=rng.standard_normal((30, 2)), X=rng.standard_normal((30, 2)), W=W,
                                 w_labels=["age", "sex"], w_types=["continuous", "categorical"])
        processed, report = preprocess(data)
        np.testing.assert_array_equal(processed.W[:, -1], group)
        assert processed.w_labels[-1] == "sex"
        assert report.categorical_columns == ["sex"]

    def test_back_transformation(self):
        """Test a standardized surface rescales by sd_y(s) / sd_x(t)"""
        rng = np.random.default_rng(4)
        data = FunctionalDataset(Y=rng.normal(0, 2, (30, 3)), X=rng.normal(0, 4, (30, 2)))
        _, report = preprocess(data, scale=True)
        surface = np.ones((2, 3))
        expected = report.y_sd[None, :] / report.x_sd[:, None]
        np.testing.assert_allclose(to_original_units(surface, report), expected)


# ============================================================================
# TEST: empirical Bayes
# ============================================================================

class TestEmpiricalBayes:
    """Hyperparameter estimation"""

    def test_pure_noise_has_low_inclusion(self):
        """Test null data gives inclusion rates near the z > 2 tail"""
        rng = np.random.default_rng(5)
        Xstar = rng.standard_normal((400, 8))
        Ystar = rng.standard_normal((400, 64))
        hyper = estimate_hyperparameters(Xstar, Ystar, np.zeros(64, dtype=int))
        assert hyper.pi.mean() <= 0.10
        assert np.all(hyper.tau >= TAU_MIN)

    def test_strong_coefficient_hits_pi_max(self):
        """Test a huge coefficient present in every column clips to pi_max"""
        rng = np.random.default_rng(6)
        Xstar = rng.standard_normal((400, 4))
        Ystar = 10.0 * Xstar[:, [0]] + rng.standard_normal((400, 16))
        hyper = estimate_hyperparameters(Xstar, Ystar, np.zeros(16, dtype=int))
        assert hyper.pi[0, 0] == PI_MAX
        assert hyper.tau[0, 0] == pytest.approx(100.0, rel=0.05)
        assert np.all((hyper.pi >= PI_MIN) & (hyper.pi <= PI_MAX))

    def test_levels_grouped_separately(self):
        """Test each level pools only its own columns"""
        rng = np.random.default_rng(7)
        Xstar = rng.standard_normal((300, 3))
        Ystar = np.hstack([5.0 * Xstar[:, [1]] + rng.standard_normal((300, 4)), rng.standard_normal((300, 4))])
        hyper = estimate_hyperparameters(Xstar, Ystar, np.array([0] * 4 + [1] * 4))
        assert hyper.levels == (0, 1)
        tau0, pi0 = hyper.for_level(0)
        tau1, pi1 = hyper.for_level(1)
        assert pi0[1] == PI_MAX
        assert pi1[1] < 0.5

    def test_missing_level_uses_defaults(self):
        """Test a level without columns falls back to (pi_min, tau_min)"""
        hyper = SpikeSlabHyper(tau=np.ones((3, 1)), pi=np.full((3, 1), 0.5), levels=(2,))
        tau, pi = hyper.for_level(5)
        assert np.all(tau == TAU_MIN)
        assert np.all(pi == PI_MIN)

    def test_singular_design(self):
        """Test an all-zero design cannot be stabilized"""
        with pytest.raises(NumericalError):
            estimate_hyperparameters(np.zeros((10, 3)), np.ones((10, 2)), np.zeros(2, dtype=int))


# ============================================================================
# TEST: column sampler
# ============================================================================

class TestColumnSampler:
    """fit_column and the Gibbs updates"""

    def test_streams_are_reproducible_and_distinct(self):
        """Test streams depend on (seed, index, kind) only"""
        a = make_stream(1, 3).standard_normal(4)
        np.testing.assert_array_equal(a, make_stream(1, 3).standard_normal(4))
        assert not np.array_equal(a, make_stream(1, 4).standard_normal(4))
        assert not np.array_equal(a, make_stream(1, 3, kind=1).standard_normal(4))

    def test_conjugate_oracle(self):
        """Test forced-inclusion draws match the closed-form posterior"""
        rng = np.random.default_rng(8)
        n, p = 200, 3
        X = rng.standard_normal((n, p))
        y = X @ np.array([0.5, -1.0, 0.2]) + rng.standard_normal(n)
        hyper = SpikeSlabHyper(tau=np.full((p, 1), 1e6), pi=np.full((p, 1), 0.5), levels=(0,))
        mcmc = McmcConfig(total_draws=10_500, burn_in=500, seed=3)
        draws = fit_column(y, X, None, hyper, 0, mcmc, make_stream(3, 0), force_inclusion=True)

        xtx_inv = np.linalg.inv(X.T @ X)
        ols = xtx_inv @ X.T @ y
        s2 = np.sum((y - X @ ols) ** 2) / (n - p)
        cov = s2 * xtx_inv * (n - p) / (n - p - 2)

        assert draws.gamma.all()
        batches = draws.beta.reshape(50, -1, p).mean(axis=1)
        se = batches.std(axis=0, ddof=1) / np.sqrt(50)
        assert np.all(np.abs(draws.beta.mean(axis=0) - ols) < 3 * se + 1e-4)
        np.testing.assert_allclose(np.var(draws.beta, axis=0, ddof=1), np.diag(cov), rtol=0.1)

    def test_point_mass_is_exact(self):
        """Test excluded coefficients are stored as exact zeros"""
        rng = np.random.default_rng(9)
        X = rng.standard_normal((60, 6))
        y = X[:, 0] + rng.standard_normal(60)
        hyper = SpikeSlabHyper(tau=np.ones((6, 1)), pi=np.full((6, 1), 0.3), levels=(0,))
        draws = fit_column(y, X, None, hyper, 0, McmcConfig(total_draws=300, burn_in=100), make_stream(0, 0))
        assert np.all(draws.beta[~draws.gamma] == 0.0)
        assert np.all(draws.beta[draws.gamma] != 0.0)

    def test_strong_single_predictor(self):
        """Test b=1 with sigma2=0.01 and n=400 is recovered and always included"""
        rng = np.random.default_rng(10)
        X = rng.standard_normal((400, 1))
        y = X[:, 0] + 0.1 * rng.standard_normal(400)
        hyper = estimate_hyperparameters(X, y[:, None], np.zeros(1, dtype=int))
        draws = fit_column(y, X, None, hyper, 0, McmcConfig(total_draws=600, burn_in=200), make_stream(2, 0))
        assert 0.9 <= draws.beta.mean() <= 1.1
        assert draws.gamma.mean() > 0.99
        assert draws.sigma2.mean() == pytest.approx(0.01, rel=0.2)

    def test_prior_dominates_without_signal(self):
        """Test inclusion stays near pi_min on pure noise"""
        rng = np.random.default_rng(12)
        X = rng.standard_normal((100, 8))
        y = rng.standard_normal(100)
        hyper = SpikeSlabHyper(tau=np.ones((8, 1)), pi=np.full((8, 1), PI_MIN), levels=(0,))
        draws = fit_column(y, X, None, hyper, 0, McmcConfig(total_draws=600, burn_in=200), make_stream(4, 0))
        assert draws.gamma.mean() <= PI_MIN + 0.05

    def test_flat_response(self):
        """Test a response unrelated to X gives small coefficients"""
        rng = np.random.default_rng(13)
        X = rng.standard_normal((400, 4))
        y = 0.01 * rng.standard_normal(400)
        hyper = SpikeSlabHyper(tau=np.ones((4, 1)), pi=np.full((4, 1), 0.1), levels=(0,))
        draws = fit_column(y, X, None, hyper, 0, McmcConfig(total_draws=200, burn_in=100), make_stream(5, 0))
        assert np.all(np.abs(draws.beta.mean(axis=0)) < 3 / np.sqrt(400))
        assert np.all(np.isfinite(draws.sigma2))

    def test_scalar_covariates_always_sampled(self):
        """Test scalar effects are drawn under the weak prior"""
        rng = np.random.default_rng(14)
        X = rng.standard_normal((150, 4))
        W = rng.standard_normal((150, 1))
        y = 2.0 * W[:, 0] + rng.standard_normal(150)
        hyper = SpikeSlabHyper(tau=np.ones((4, 1)), pi=np.full((4, 1), 0.1), levels=(0,))
        draws = fit_column(y, X, W, hyper, 0, McmcConfig(total_draws=400, burn_in=100), make_stream(6, 0))
        assert draws.theta.shape == (300, 1)
        assert draws.theta.mean() == pytest.approx(2.0, abs=0.3)

    def test_columns_are_order_free(self):
        """Test a column's draws do not depend on which other columns are fitted"""
        rng = np.random.default_rng(15)
        X = rng.standard_normal((50, 8))
        Y = X[:, :3] @ rng.standard_normal((3, 40)) + rng.standard_normal((50, 40))
        levels = np.zeros(40, dtype=int)
        hyper = estimate_hyperparameters(X, Y, levels)
        mcmc = McmcConfig(total_draws=80, burn_in=40, seed=9)
        full = fit_columns(Y, X, None, levels, mcmc, hyper=hyper)
        head = fit_columns(Y[:, :5], X, None, levels[:5], mcmc, hyper=hyper)
        np.testing.assert_array_equal(full.beta[:, :, :5], head.beta)
        np.testing.assert_array_equal(full.sigma2[:, :5], head.sigma2)


# ============================================================================
# TEST: fit_ffr
# ============================================================================

class TestFitFFR:
    """End-to-end wavelet-space fit"""

    def test_shapes_and_provenance(self, band_dataset, small_specs, short_mcmc):
        """Test draw dimensions and seed bookkeeping"""
        dataset, _ = band_dataset
        draws = fit_ffr(dataset, *small_specs, short_mcmc)
        assert draws.surfaces.shape == (60, 16, 8)
        assert draws.sigma2.shape == (60, 8)
        assert draws.scalar_curves.shape == (60, 0, 8)
        assert draws.seed == 7
        assert len(draws.config_hash) == 16

    def test_recovers_band(self, band_dataset, small_specs, short_mcmc):
        """Test the posterior mean finds the signal"""
        dataset, beta = band_dataset
        mean = fit_ffr(dataset, *small_specs, short_mcmc).mean_surface()
        assert np.abs(mean[beta != 0] - 1.0).mean() < 0.2
        assert np.abs(mean[beta == 0]).mean() < 0.2

    def test_identical_across_thread_counts(self, band_dataset, small_specs):
        """Test draws are bit-identical for 1 and 3 threads"""
        dataset, _ = band_dataset
        rng = np.random.default_rng(16)
        wide = FunctionalDataset(Y=np.hstack([dataset.Y] * 10) + 0.01 * rng.standard_normal((80, 80)),
                                 X=dataset.X)
        s_spec = WaveletSpec(original_length=80, vanishing_moments=2, levels=2)
        mcmc = McmcConfig(total_draws=40, burn_in=20, seed=1)
        one = fit_ffr(wide, small_specs[0], s_spec, mcmc, threads=1)
        three = fit_ffr(wide, small_specs[0], s_spec, mcmc, threads=3)
        np.testing.assert_array_equal(one.surfaces, three.surfaces)
        np.testing.assert_array_equal(one.sigma2, three.sigma2)

    def test_projection_consistency(self, band_dataset, small_specs):
        """Test stored wavelet draws project to the stored surfaces"""
        dataset, _ = band_dataset
        mcmc = McmcConfig(total_draws=30, burn_in=20, store_wavelet=True)
        draws = fit_ffr(dataset, *small_specs, mcmc)
        phi, omega = build_operator(small_specs[0]), build_operator(small_specs[1])
        for m in (0, 5, 9):
            np.testing.assert_allclose(project_surface(draws.wavelet[m], phi, omega), draws.surfaces[m],
                                       atol=1e-10)

    def test_null_surface(self, small_specs):
        """Test pure noise gives a flat posterior mean"""
        rng = np.random.default_rng(17)
        data, _ = preprocess(FunctionalDataset(Y=rng.standard_normal((200, 8)), X=rng.standard_normal((200, 16))),
                             scale=False)
        mean = fit_ffr(data, *small_specs, McmcConfig(total_draws=120, burn_in=60)).mean_surface()
        assert np.max(np.abs(mean)) < 0.15

    def test_hyper_override_used(self, band_dataset, small_specs, short_mcmc):
        """Test supplied hyperparameters replace the estimates"""
        dataset, _ = band_dataset
        hyper = SpikeSlabHyper(tau=np.full((16, 3), TAU_MIN), pi=np.full((16, 3), PI_MIN), levels=(0, 1, 2))
        draws = fit_ffr(dataset, *small_specs, short_mcmc, hyper_override=hyper)
        assert draws.hyper is hyper
        assert np.max(np.abs(draws.mean_surface())) < 0.05

    def test_untransformed_outcome_axis(self, band_dataset, small_specs, short_mcmc):
        """Test s_spec=None fits every site in one pooled level"""
        dataset, _ = band_dataset
        draws = fit_ffr(dataset, small_specs[0], None, short_mcmc)
        assert draws.surfaces.shape == (60, 16, 8)
        assert draws.hyper.levels == (0,)

    def test_scalar_curves_projected(self, small_specs, short_mcmc):
        """Test covariate effects come back as curves over sites"""
        rng = np.random.default_rng(18)
        X = rng.standard_normal((80, 16))
        age = rng.standard_normal(80)
        Y = np.outer(age, np.linspace(0.0, 2.0, 8)) + 0.2 * rng.standard_normal((80, 8))
        data = FunctionalDataset(Y=Y, X=X, W=age[:, None])
        processed, _ = preprocess(data, scale=False)
        draws = fit_ffr(processed, *small_specs, short_mcmc)
        curve = draws.mean_scalar_curves()[0]
        assert curve.shape == (8,)
        assert curve[-1] - curve[0] == pytest.approx(2.0, abs=0.5)
