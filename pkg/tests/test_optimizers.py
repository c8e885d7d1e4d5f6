import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from privreg.experiments import generate_dataset
from privreg.model import Dataset, Example, ModelSpec, ParameterSet
from privreg.numerics import RngStream
from privreg.optimizers import (NoiseSpec, TrainConfig, add_iid_noise,
                                add_proportional_noise, clip_gradient,
                                dataset_loss, initial_params_for, sgd_step,
                                train)
from privreg.oracle import regularized_least_squares_oracle
from privreg.regularizers import RegSpec, dp_input_penalty

LINEAR2 = ModelSpec(layer_sizes=(2, 1), activation="identity", include_bias=False)


class TestClipGradient:
    def test_rescales_long_gradient(self):
        assert np.allclose(clip_gradient(np.array([3.0, 4.0]), 2.5), [1.5, 2.0])

    def test_leaves_short_gradient_alone(self):
        g = np.array([3.0, 4.0])
        assert np.array_equal(clip_gradient(g, 10.0), g)

    def test_zero_gradient(self):
        assert np.array_equal(clip_gradient(np.zeros(3), 1.0), np.zeros(3))

    def test_nonpositive_threshold_rejected(self):
        with pytest.raises(ValueError):
            clip_gradient(np.ones(2), 0.0)

    @given(arrays(np.float64, 4, elements=st.floats(-100, 100)),
           st.floats(0.01, 50))
    def test_norm_bound_and_direction(self, g, c):
        clipped = clip_gradient(g, c)
        assert np.linalg.norm(clipped) <= c + 1e-12
        norm = np.linalg.norm(g)
        if norm > 0:
            scale = max(1.0, norm / c)
            assert np.allclose(clipped * scale, g)


class TestNoise:
    def test_iid_zero_sigma_is_identity(self):
        g = np.array([1.0, -2.0])
        assert np.array_equal(add_iid_noise(g, 0.0, RngStream(1)), g)

    def test_iid_statistics(self):
        sigma, replicas = 0.3, 10 ** 5
        g = np.zeros(2)
        rng = RngStream(55)
        deltas = np.array([add_iid_noise(g, sigma, rng) for _ in range(replicas)])
        assert np.abs(deltas.mean(axis=0)).max() <= 3 * sigma / math.sqrt(replicas)
        var = deltas.var(axis=0, ddof=1)
        assert np.abs(var - sigma ** 2).max() <= 0.05 * sigma ** 2

    def test_proportional_zero_parameter_coordinate_gets_no_noise(self):
        p = ParameterSet(LINEAR2, np.array([0.0, 2.0]))
        g = np.array([1.0, 1.0])
        noisy = add_proportional_noise(g, p, 0.8, RngStream(2))
        assert noisy[0] == g[0]
        assert noisy[1] != g[1]

    def test_proportional_statistics(self):
        theta = np.array([1.0, 2.0])
        p = ParameterSet(LINEAR2, theta)
        sigma, replicas = 0.5, 10 ** 5
        rng = RngStream(56)
        deltas = np.array([add_proportional_noise(np.zeros(2), p, sigma, rng)
                           for _ in range(replicas)])
        stds = deltas.std(axis=0, ddof=1)
        assert np.abs(stds - np.array([0.5, 1.0])).max() <= 0.05 * 1.0
        assert abs(stds[0] - 0.5) <= 0.05 * 0.5

    def test_proportional_zero_sigma_is_identity(self):
        p = ParameterSet(LINEAR2, np.array([1.0, 2.0]))
        g = np.array([3.0, 4.0])
        assert np.array_equal(add_proportional_noise(g, p, 0.0, RngStream(3)), g)

    def test_shape_mismatch_rejected(self):
        p = ParameterSet(LINEAR2, np.array([1.0, 2.0]))
        with pytest.raises(ValueError):
            add_proportional_noise(np.ones(3), p, 0.1, RngStream(4))

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            add_iid_noise(np.ones(2), -0.1, RngStream(5))


class TestSgdStep:
    def test_hand_case(self):
        p = ParameterSet(LINEAR2, np.array([0.5, -1.0]))
        out = sgd_step(p, np.array([-4.0, -2.0]), 0.1)
        assert np.allclose(out.flat, [0.9, -0.8])

    def test_zero_gradient_is_stationary(self):
        p = ParameterSet(LINEAR2, np.array([0.5, -1.0]))
        assert np.array_equal(sgd_step(p, np.zeros(2), 0.1).flat, p.flat)

    @given(arrays(np.float64, 2, elements=st.floats(-10, 10)))
    def test_opposite_steps_cancel(self, g):
        p = ParameterSet(LINEAR2, np.array([0.5, -1.0]))
        back = sgd_step(sgd_step(p, g, 0.1), -g, 0.1)
        assert np.allclose(back.flat, p.flat, atol=1e-15)

    def test_nonpositive_eta_rejected(self):
        with pytest.raises(ValueError):
            sgd_step(ParameterSet(LINEAR2, np.zeros(2)), np.zeros(2), 0.0)


def small_dataset(seed=9, n=24, d=3, noise=0.0):
    kind = "noisy_linear" if noise > 0 else "linear_regression"
    return generate_dataset(kind, n, d, noise, seed)


class TestTrain:
    def test_same_seed_bit_identical(self):
        data = small_dataset()
        spec = ModelSpec(layer_sizes=(3, 1), activation="identity", include_bias=False)
        config = TrainConfig(eta=0.05, batch_size=6, epochs=4, seed=77,
                             noise=NoiseSpec(mode="iid", sigma=0.2),
                             record_gradients=True)
        a = train(spec, data, config)
        b = train(spec, data, config)
        assert a.epoch_losses == b.epoch_losses
        assert np.array_equal(a.final_params.flat, b.final_params.flat)
        for ra, rb in zip(a.records, b.records):
            assert np.array_equal(ra.noisy, rb.noisy)
            assert np.array_equal(ra.batch_indices, rb.batch_indices)

    def test_noiseless_training_solves_realizable_data(self):
        data = small_dataset(n=40, d=4)
        spec = ModelSpec(layer_sizes=(4, 1), activation="identity", include_bias=False)
        config = TrainConfig(eta=0.05, batch_size=40, epochs=400, seed=3)
        report = train(spec, data, config)
        assert report.epoch_losses[-1] <= 1e-10
        ols = regularized_least_squares_oracle(data, 0.0)
        assert np.abs(report.final_params.flat - ols.flat).max() <= 1e-8

    def test_pdp_training_matches_normal_equations_hand_instance(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        t = np.array([1.0, 1.0, 2.0])
        data = Dataset([Example(x[i], np.array([t[i]])) for i in range(3)], dim=2)
        config = TrainConfig(eta=0.2, batch_size=3, epochs=300, seed=5,
                             reg=RegSpec(kappa=0.5))
        report = train(LINEAR2, data, config)
        assert np.abs(report.final_params.flat - 0.75).max() <= 1e-6
        oracle = regularized_least_squares_oracle(data, 0.5)
        assert np.allclose(oracle.flat, [0.75, 0.75], atol=1e-12)

    def test_pdp_training_matches_normal_equations_random_instance(self):
        data = small_dataset(seed=29, n=30, d=4, noise=0.3)
        spec = ModelSpec(layer_sizes=(4, 1), activation="identity", include_bias=False)
        kappa = 0.35
        config = TrainConfig(eta=0.02, batch_size=30, epochs=4000, seed=6,
                             reg=RegSpec(kappa=kappa))
        report = train(spec, data, config)
        oracle = regularized_least_squares_oracle(data, kappa)
        assert np.abs(report.final_params.flat - oracle.flat).max() <= 1e-6

    def test_input_penalty_shifts_loss_but_not_trajectory(self):
        data = small_dataset(seed=11, n=30, d=3, noise=0.2)
        spec = ModelSpec(layer_sizes=(3, 1), activation="identity", include_bias=True)
        base = TrainConfig(eta=0.05, batch_size=5, epochs=3, seed=13,
                           noise=NoiseSpec(mode="iid", sigma=0.1),
                           record_gradients=True)
        shifted_config = replace(base, reg=RegSpec(input_kappa=0.4))
        plain = train(spec, data, base)
        shifted = train(spec, data, shifted_config)
        assert np.array_equal(plain.final_params.flat, shifted.final_params.flat)
        for ra, rb in zip(plain.records, shifted.records):
            assert np.array_equal(ra.clean, rb.clean)
            assert np.array_equal(ra.noisy, rb.noisy)
        mean_shift = np.mean([dp_input_penalty(ex.x, 0.4) for ex in data])
        for la, lb in zip(plain.epoch_losses, shifted.epoch_losses):
            assert lb - la == pytest.approx(mean_shift, abs=1e-12)

    def test_per_example_clipping_bounds_recorded_gradient(self):
        data = small_dataset(seed=15, n=16, d=3, noise=0.5)
        spec = ModelSpec(layer_sizes=(3, 1), activation="identity", include_bias=False)
        c = 0.25
        config = TrainConfig(eta=0.05, batch_size=1, epochs=1, seed=21,
                             noise=NoiseSpec(mode="none", clip_c=c),
                             record_gradients=True)
        report = train(spec, data, config)
        assert len(report.records) == 16
        for record in report.records:
            assert np.linalg.norm(record.clean) <= c + 1e-12

    def test_mean_of_clipped_gradients_stays_bounded(self):
        data = small_dataset(seed=15, n=16, d=3, noise=0.5)
        spec = ModelSpec(layer_sizes=(3, 1), activation="identity", include_bias=False)
        c = 0.25
        config = TrainConfig(eta=0.05, batch_size=8, epochs=1, seed=21,
                             noise=NoiseSpec(mode="none", clip_c=c),
                             record_gradients=True)
        for record in train(spec, data, config).records:
            assert np.linalg.norm(record.clean) <= c + 1e-12

    def test_proportional_noise_vanishes_on_zero_parameters_iid_does_not(self):
        data = small_dataset(seed=17, n=8, d=3)
        spec = ModelSpec(layer_sizes=(3, 1), activation="identity", include_bias=False)
        zeros = ParameterSet(spec, np.zeros(3))
        for mode, expect_equal in (("proportional", True), ("iid", False)):
            config = TrainConfig(eta=0.05, batch_size=8, epochs=1, seed=19,
                                 noise=NoiseSpec(mode=mode, sigma=0.5),
                                 record_gradients=True)
            [record] = train(spec, data, config, init=zeros).records
            assert np.array_equal(record.noisy, record.clean) == expect_equal

    def test_one_noisy_step_averages_to_clean_step(self):
        eta, sigma, replicas = 0.1, 0.3, 2000
        data = small_dataset(seed=23, n=8, d=3, noise=0.1)
        spec = ModelSpec(layer_sizes=(3, 1), activation="identity", include_bias=False)
        base = TrainConfig(eta=eta, batch_size=8, epochs=1, seed=25)
        init = initial_params_for(spec, base)
        clean = train(spec, data, base, init=init).final_params.flat
        total = np.zeros(3)
        for k in range(replicas):
            noisy_config = replace(base, seed=1000 + k,
                                   noise=NoiseSpec(mode="iid", sigma=sigma))
            total += train(spec, data, noisy_config, init=init).final_params.flat
        err = np.abs(total / replicas - clean).max()
        assert err <= 3 * eta * sigma / math.sqrt(replicas)

    def test_derived_kappa_equals_explicit_eta_sq_sigma_sq(self):
        data = small_dataset(seed=27, n=20, d=3, noise=0.2)
        spec = ModelSpec(layer_sizes=(3, 1), activation="identity", include_bias=False)
        eta, sigma = 0.05, 0.4
        derived = TrainConfig(eta=eta, batch_size=5, epochs=5, seed=31,
                              noise=NoiseSpec(mode="none", sigma=sigma),
                              reg=RegSpec(kappa_mode="derived"))
        explicit = TrainConfig(eta=eta, batch_size=5, epochs=5, seed=31,
                               reg=RegSpec(kappa=eta * eta * sigma * sigma))
        a = train(spec, data, derived)
        b = train(spec, data, explicit)
        assert np.array_equal(a.final_params.flat, b.final_params.flat)
        assert a.epoch_losses == b.epoch_losses

    def test_epoch_count_matches_config(self):
        data = small_dataset()
        spec = ModelSpec(layer_sizes=(3, 1), activation="identity", include_bias=False)
        report = train(spec, data, TrainConfig(eta=0.05, batch_size=6, epochs=7, seed=1))
        assert len(report.epoch_losses) == 7
        assert len(report.epoch_seconds) == 7

    def test_validation_errors(self):
        data = small_dataset(n=4)
        spec = ModelSpec(layer_sizes=(3, 1), activation="identity", include_bias=False)
        with pytest.raises(ValueError):
            train(spec, data, TrainConfig(eta=0.1, batch_size=5, epochs=1, seed=0))
        with pytest.raises(ValueError):
            train(spec, Dataset(examples=[], dim=3),
                  TrainConfig(eta=0.1, batch_size=1, epochs=1, seed=0))
        wrong_dim = ModelSpec(layer_sizes=(4, 1), activation="identity",
                              include_bias=False)
        with pytest.raises(ValueError):
            train(wrong_dim, data, TrainConfig(eta=0.1, batch_size=1, epochs=1, seed=0))

    def test_schedule_callable_is_honored(self):
        data = small_dataset(n=8)
        spec = ModelSpec(layer_sizes=(3, 1), activation="identity", include_bias=False)
        config = TrainConfig(eta=lambda step: 0.1 / (1 + step), batch_size=8,
                             epochs=2, seed=2)
        report = train(spec, data, config)
        assert len(report.epoch_losses) == 2

    def test_dataset_loss_matches_epoch_loss(self):
        data = small_dataset(seed=33, n=10, d=3)
        spec = ModelSpec(layer_sizes=(3, 1), activation="identity", include_bias=False)
        config = TrainConfig(eta=0.05, batch_size=10, epochs=1, seed=3)
        report = train(spec, data, config)
        assert report.epoch_losses[-1] == pytest.approx(
            dataset_loss(spec, report.final_params, data), abs=1e-15)


class TestSpecs:
    def test_noise_spec_validation(self):
        with pytest.raises(ValueError):
            NoiseSpec(mode="laplace")
        with pytest.raises(ValueError):
            NoiseSpec(sigma=-1.0)
        with pytest.raises(ValueError):
            NoiseSpec(clip_c=0.0)

    def test_train_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(eta=0.0)
        with pytest.raises(ValueError):
            TrainConfig(eta=0.1, batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(eta=0.1, epochs=0)
