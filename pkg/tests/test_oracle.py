import numpy as np
import pytest

from privreg.model import Dataset, Example, ModelSpec, ParameterSet
from privreg.numerics import RngStream, SingularMatrixError, bessel_k0
from privreg.optimizers import NoiseSpec
from privreg.oracle import (analytic_post_update_loss, backprop_grad_check,
                            check_cross_term_vanishes, check_moment_identities,
                            check_product_density, equivalence_chain_residuals,
                            finite_difference_gradient, mc_post_update_loss,
                            post_update_identity_checks, random_linear_setups,
                            regularized_least_squares_oracle)

LINEAR2 = ModelSpec(layer_sizes=(2, 1), activation="identity", include_bias=False)
THETA = ParameterSet(LINEAR2, np.array([0.5, -1.0]))
X = np.array([2.0, 1.0])
IID = NoiseSpec(mode="iid", sigma=0.2)
PROP = NoiseSpec(mode="proportional", sigma=0.2)


class TestAnalyticPostUpdateLoss:
    def test_iid_hand_value(self):
        # clean one-step loss is 0 here; iid adds eta^2*sigma^2*sum(x^2) = 4e-4*5
        assert analytic_post_update_loss(THETA, X, 1.0, 0.1, IID) == pytest.approx(0.002)

    def test_proportional_hand_value(self):
        # sum(theta^2 x^2) = 0.25*4 + 1*1 = 2 -> 4e-4*2
        assert analytic_post_update_loss(THETA, X, 1.0, 0.1, PROP) == pytest.approx(0.0008)

    def test_no_noise_returns_clean_loss(self):
        none = NoiseSpec(mode="none")
        assert analytic_post_update_loss(THETA, X, 1.0, 0.1, none) == pytest.approx(0.0)

    def test_rejects_nonlinear_model(self):
        spec = ModelSpec(layer_sizes=(2, 3, 1), activation="tanh")
        p = ParameterSet(spec, np.zeros(2 * 3 + 3 + 3 + 1))
        with pytest.raises(ValueError):
            analytic_post_update_loss(p, X, 1.0, 0.1, IID)


class TestMcPostUpdateLoss:
    def test_zero_sigma_exact(self):
        est = mc_post_update_loss(THETA, X, 1.0, 0.1, NoiseSpec(mode="none"),
                                  replicas=100, seed=1)
        assert est.stderr == 0.0
        assert est.mean == pytest.approx(0.0)

    def test_iid_matches_analytic(self):
        est = mc_post_update_loss(THETA, X, 1.0, 0.1, IID, replicas=200_000, seed=3)
        assert abs(est.mean - 0.002) <= 3 * est.stderr

    def test_proportional_matches_analytic(self):
        est = mc_post_update_loss(THETA, X, 1.0, 0.1, PROP, replicas=200_000, seed=4)
        assert abs(est.mean - 0.0008) <= 3 * est.stderr

    def test_stream_split_reduces_identically(self):
        a = mc_post_update_loss(THETA, X, 1.0, 0.1, IID, replicas=10_000, seed=5)
        b = mc_post_update_loss(THETA, X, 1.0, 0.1, IID, replicas=10_000, seed=5)
        assert (a.mean, a.stderr) == (b.mean, b.stderr)

    def test_bias_folds_into_constant_feature(self):
        spec = ModelSpec(layer_sizes=(2, 1), activation="identity", include_bias=True)
        with_bias = ParameterSet(spec, np.array([0.5, -1.0, 0.3]))
        folded_spec = ModelSpec(layer_sizes=(3, 1), activation="identity",
                                include_bias=False)
        folded = ParameterSet(folded_spec, np.array([0.5, -1.0, 0.3]))
        a = analytic_post_update_loss(with_bias, X, 1.0, 0.1, IID)
        b = analytic_post_update_loss(folded, np.array([2.0, 1.0, 1.0]), 1.0, 0.1, IID)
        assert a == b


class TestCrossTerm:
    def test_zero_mean_at_scale(self):
        check = check_cross_term_vanishes(THETA, X, 0.7, 0.1, IID,
                                          replicas=100_000, seed=6)
        assert check.analytic == 0.0
        assert check.passed

    def test_zero_sigma_exact(self):
        check = check_cross_term_vanishes(THETA, X, 0.7, 0.1,
                                          NoiseSpec(mode="none"), replicas=100, seed=7)
        assert check.estimate.mean == 0.0
        assert check.z == 0.0

    def test_zero_input_annihilates(self):
        check = check_cross_term_vanishes(THETA, np.zeros(2), 0.7, 0.1, IID,
                                          replicas=1000, seed=8)
        assert check.estimate.mean == 0.0


class TestMomentIdentities:
    def test_analytic_triples(self):
        for sigma, triple in ((1.0, (1.0, 3.0, 2.0)), (2.0, (4.0, 48.0, 32.0))):
            checks = check_moment_identities(sigma, replicas=1000, seed=9)
            assert [c.analytic for c in checks] == list(triple)

    @pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0])
    def test_checks_pass_at_scale(self, sigma):
        checks = check_moment_identities(sigma, replicas=200_000, seed=10)
        assert all(c.passed for c in checks)

    def test_invalid_sigma(self):
        with pytest.raises(ValueError):
            check_moment_identities(0.0, replicas=100, seed=0)


class TestProductDensity:
    def test_analytic_density_value(self):
        # unit sigmas: density at u=1 is K0(1)/pi = 0.42102443824/pi
        assert bessel_k0(1.0) / np.pi == pytest.approx(0.1340162410, abs=1e-9)

    def test_histogram_matches_density(self):
        report = check_product_density(1.0, 1.0, replicas=200_000, bins=20, seed=11)
        assert report.max_abs_z <= 4.0
        assert report.counts.size == 40
        assert report.expected.sum() < 1.0

    def test_symmetry(self):
        report = check_product_density(1.0, 1.0, replicas=200_000, bins=20, seed=12)
        assert np.abs(report.symmetry_z).max() <= 3.0

    def test_unequal_sigmas(self):
        report = check_product_density(0.7, 1.3, replicas=200_000, bins=15, seed=13,
                                       support=(0.05, 3.0))
        assert report.max_abs_z <= 4.0

    def test_degenerate_bins_rejected(self):
        with pytest.raises(ValueError):
            check_product_density(1.0, 1.0, replicas=100, bins=20, seed=0,
                                  support=(0.0, 4.0))
        with pytest.raises(ValueError):
            check_product_density(1.0, 1.0, replicas=100, bins=5, seed=0)


class TestRegularizedLeastSquaresOracle:
    def test_kappa_zero_is_least_squares(self):
        rng = RngStream(14)
        x = rng.normal(0.0, 1.0, 30 * 3).reshape(30, 3)
        t = rng.normal(0.0, 1.0, 30)
        data = Dataset([Example(x[i], np.array([t[i]])) for i in range(30)], dim=3)
        theta = regularized_least_squares_oracle(data, 0.0).flat
        lstsq, *_ = np.linalg.lstsq(x, t, rcond=None)
        assert np.abs(theta - lstsq).max() <= 1e-10

    def test_hand_instance(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        t = np.array([1.0, 1.0, 2.0])
        data = Dataset([Example(x[i], np.array([t[i]])) for i in range(3)], dim=2)
        theta = regularized_least_squares_oracle(data, 0.5).flat
        assert np.allclose(theta, [0.75, 0.75], atol=1e-12)

    def test_shrinkage_toward_zero(self):
        rng = RngStream(15)
        x = rng.normal(0.0, 1.0, 20 * 3).reshape(20, 3)
        t = rng.normal(0.0, 1.0, 20)
        data = Dataset([Example(x[i], np.array([t[i]])) for i in range(20)], dim=3)
        norms = [np.linalg.norm(regularized_least_squares_oracle(data, k).flat)
                 for k in (0.0, 1.0, 10.0, 100.0)]
        assert all(a > b for a, b in zip(norms, norms[1:]))

    def test_singular_system_raises(self):
        x = np.array([[1.0, 1.0], [2.0, 2.0]])
        data = Dataset([Example(x[i], np.array([1.0])) for i in range(2)], dim=2)
        with pytest.raises(SingularMatrixError):
            regularized_least_squares_oracle(data, 0.0)


class TestFiniteDifferences:
    def test_quadratic_is_exact(self):
        f = lambda v: float(v @ v)
        grad = finite_difference_gradient(f, np.array([1.0, -2.0, 0.5]))
        assert np.abs(grad - np.array([2.0, -4.0, 1.0])).max() <= 1e-9

    def test_backprop_check_flags_wrong_gradient(self):
        spec = ModelSpec(layer_sizes=(3, 1), activation="identity", include_bias=False)
        p = ParameterSet(spec, np.array([1.0, 2.0, 3.0]))
        x = np.array([0.5, -1.0, 2.0])
        assert backprop_grad_check(spec, p, x, np.array([1.0])) <= 1e-8


class TestRandomizedIdentitySuite:
    def test_fifty_setups_pass_both_modes(self):
        setups = random_linear_setups(50, seed=2024)
        for mode in ("iid", "proportional"):
            checks = post_update_identity_checks(setups, mode, replicas=20_000,
                                                 seed=900)
            zs = np.array([c.z for c in checks])
            assert np.abs(zs).max() <= 3.0, f"{mode}: max |z| = {np.abs(zs).max()}"

    def test_equivalence_chain_is_algebraic(self):
        for setup in random_linear_setups(50, seed=2025):
            iid_resid, prop_resid = equivalence_chain_residuals(setup)
            assert iid_resid <= 1e-12
            assert prop_resid <= 1e-12
