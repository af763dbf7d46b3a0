import numpy as np
import pytest

from epiforge import cleirnet, geo, nn

from conftest import synthetic_table


def make_setup(n_c=5, seed=7, **cfg_kwargs):
    table = synthetic_table(n_c, seed=seed)
    x = geo.build_feature_matrix(table).values.T
    defaults = dict(n_c=n_c, n_tf=2, n_d=4, n_f=3, n_x=6, max_epochs=50)
    defaults.update(cfg_kwargs)
    config = cleirnet.CleirConfig(**defaults)
    return table, x, config


def growing_series(table, days=40, seed=0):
    rng = np.random.default_rng(seed)
    n = len(table)
    base = rng.uniform(1, 5, size=n)
    rates = rng.uniform(0.5, 2.0, size=n)
    t = np.arange(days)
    return np.cumsum(base[:, None] + rates[:, None] * t[None, :] / 10, axis=1)


class TestForwardHorizon:
    def test_zero_network_is_naive_no_change(self):
        table, x, config = make_setup()
        store = cleirnet.init_params(config, seed=1, zero=True)
        i_t = np.array([3.0, 1.0, 4.0, 1.0, 5.0])
        frame, state = cleirnet.forward_horizon(
            i_t, 10.0, cleirnet.BackboneState.zeros(config), x, store, config)
        expect = np.repeat(i_t[:, None], config.n_f, axis=1)
        assert np.array_equal(frame.predictions, expect)
        assert np.all(frame.deltas == 0.0)
        for field in ("c0", "h0", "c1", "h1"):
            assert np.all(getattr(state, field) == 0.0)

    def test_shape_contract(self):
        table, x, config = make_setup(n_c=3, n_f=2)
        store = cleirnet.init_params(config, seed=2)
        frame, _ = cleirnet.forward_horizon(
            np.array([1.0, 2.0, 3.0]), 0.0,
            cleirnet.BackboneState.zeros(config), x, store, config)
        assert frame.predictions.shape == (3, 2)
        assert frame.deltas.shape == (3, 2)

    def test_cumulative_chain_is_prefix_sum(self):
        table, x, config = make_setup(n_c=4, n_f=6)
        store = cleirnet.init_params(config, seed=3)
        i_t = np.array([10.0, 0.0, 7.5, 2.0])
        frame, _ = cleirnet.forward_horizon(
            i_t, 4.0, cleirnet.BackboneState.zeros(config), x, store, config)
        oracle = i_t[:, None] + np.cumsum(frame.deltas, axis=1)
        assert np.allclose(frame.predictions, oracle, atol=1e-12)
        # chain identity holds bitwise step by step
        prev = i_t
        for i in range(config.n_f):
            prev = prev + frame.deltas[:, i]
            assert np.array_equal(frame.predictions[:, i], prev)

    def test_variant_i_uses_time_distributed_output(self):
        table, x, config = make_setup(variant="I")
        store = cleirnet.init_params(config, seed=4)
        assert "cd0.w" not in store.names()
        i_t = np.ones(5)
        frame, _ = cleirnet.forward_horizon(
            i_t, 0.0, cleirnet.BackboneState.zeros(config), x, store, config)
        assert frame.predictions.shape == (5, config.n_f)

    def test_dimension_mismatch(self):
        table, x, config = make_setup()
        store = cleirnet.init_params(config, seed=5)
        with pytest.raises(cleirnet.CleirError):
            cleirnet.forward_horizon(np.ones(4), 0.0,
                                     cleirnet.BackboneState.zeros(config),
                                     x, store, config)


class TestWeightedMse:
    def test_perfect_prediction(self):
        pred = np.ones((3, 4))
        assert cleirnet.weighted_mse_loss(pred, pred,
                                          np.array([10.0, 20.0, 30.0])) == 0.0

    def test_fractional_index_example(self):
        # pop = e^2 - 1 and day index e - 1 give w = 1/(2*1) = 0.5
        pop = np.array([np.e ** 2 - 1.0])
        pred = np.array([[2.0]])
        target = np.array([[0.0]])
        loss = cleirnet.weighted_mse_loss(pred, target, pop,
                                          day_indices=np.array([np.e - 1.0]))
        assert loss == pytest.approx(2.0, abs=1e-12)

    def test_weights_decrease_with_horizon(self):
        w = cleirnet.weight_matrix(np.array([100.0, 1000.0]), 5)
        assert np.all(np.diff(w, axis=1) < 0)

    def test_all_masked_returns_none(self):
        pred = np.ones((2, 2))
        out = cleirnet.weighted_mse_loss(pred, pred + 1, np.array([5.0, 5.0]),
                                         mask=np.zeros((2, 2)))
        assert out is None

    def test_tape_loss_matches_numpy(self):
        table, x, config = make_setup(n_c=3, n_f=2)
        store = cleirnet.init_params(config, seed=6)
        i_t = np.array([5.0, 2.0, 8.0])
        targets = i_t[:, None] + np.array([[1.0, 2.0], [0.5, 1.5], [2.0, 2.5]])
        pops = table.populations
        w = cleirnet.weight_matrix(pops, config.n_f)
        mask = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        tape = nn.Tape()
        res = cleirnet._forward(i_t, 1.0, cleirnet.BackboneState.zeros(config),
                                x, store, config, tape)
        loss = cleirnet._loss_on_tape(res, targets, w, mask)
        expect = cleirnet.weighted_mse_loss(res.frame.predictions, targets,
                                            pops, mask=mask)
        assert float(loss.value) == pytest.approx(expect, rel=1e-12)


class TestTargetDropout:
    def test_rate_zero_all_ones(self):
        mask = cleirnet.target_dropout_mask((10, 10), 0.0, seed=1)
        assert np.all(mask == 1.0)

    def test_empirical_rate(self):
        mask = cleirnet.target_dropout_mask((1000, 1000), 0.25, seed=2)
        zero_frac = np.mean(mask == 0.0)
        assert abs(zero_frac - 0.25) < 0.002

    def test_same_seed_identical(self):
        a = cleirnet.target_dropout_mask((50, 50), 0.25, seed=3)
        b = cleirnet.target_dropout_mask((50, 50), 0.25, seed=3)
        assert np.array_equal(a, b)


class TestGradients:
    @pytest.mark.parametrize("variant", ["I", "II"])
    def test_finite_difference_suite(self, variant):
        config = cleirnet.CleirConfig(n_c=3, n_tf=2, n_d=4, n_f=2, n_x=2,
                                      variant=variant)
        store = cleirnet.init_params(config, seed=11)
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 3))
        i_t = np.abs(rng.normal(size=3)) * 20
        targets = i_t[:, None] + rng.normal(size=(3, 2))
        w = cleirnet.weight_matrix(np.array([1e3, 5e3, 2e4]), 2)
        mask = np.ones((3, 2))
        state = cleirnet.BackboneState.zeros(config)
        state.c0[:] = rng.normal(size=2) * 0.1
        state.h1[:] = rng.normal(size=2) * 0.1

        def loss_fn(s, tape):
            t = tape if tape is not None else nn.Tape()
            res = cleirnet._forward(i_t, 3.0, state, x, s, config, t)
            return cleirnet._loss_on_tape(res, targets, w, mask)

        worst = nn.finite_difference_check(store, loss_fn)
        assert max(worst.values()) < 1e-4


class TestTraining:
    def test_constant_series_converges_to_no_change(self):
        table, x, config = make_setup(n_c=5, n_f=3, max_epochs=50, patience=50)
        series = np.full((5, 80), 7.0)
        store, log = cleirnet.train_cleirnet(series, table, x, config, seed=1)
        assert log.best_valid_loss < 1e-6

    def test_restored_weights_reproduce_best_validation_loss(self):
        table, x, config = make_setup(max_epochs=8, patience=3)
        series = growing_series(table)
        store, log = cleirnet.train_cleirnet(series, table, x, config, seed=2)
        revalidated = cleirnet._validation_loss(
            store, [series], [], x, config, table.populations)
        assert revalidated == log.best_valid_loss

    def test_same_seed_identical_logs_and_weights(self):
        table, x, config = make_setup(max_epochs=4)
        series = growing_series(table)
        runs = [cleirnet.train_cleirnet(series, table, x, config, seed=5)
                for _ in range(2)]
        assert runs[0][1].epochs == runs[1][1].epochs
        for name in runs[0][0].names():
            assert np.array_equal(runs[0][0].values[name],
                                  runs[1][0].values[name])

    def test_state_carry_changes_training(self):
        table, x, config = make_setup(max_epochs=3)
        series = growing_series(table)
        _, log_carry = cleirnet.train_cleirnet(series, table, x, config,
                                               seed=6, carry_state=True)
        _, log_zero = cleirnet.train_cleirnet(series, table, x, config,
                                              seed=6, carry_state=False)
        assert log_carry.epochs != log_zero.epochs

    def test_too_short_series_rejected(self):
        table, x, config = make_setup(n_f=14)
        with pytest.raises(cleirnet.CleirError):
            cleirnet.train_cleirnet(np.ones((5, 10)), table, x, config, seed=1)


class TestForecast:
    def test_zero_params_equal_naive(self):
        table, x, config = make_setup()
        store = cleirnet.init_params(config, seed=1, zero=True)
        series = growing_series(table, days=20)
        frame = cleirnet.forecast_cleirnet(store, series, x, config)
        assert frame.base_day == 19
        expect = np.repeat(series[:, -1][:, None], config.n_f, axis=1)
        assert np.array_equal(frame.predictions, expect)

    def test_replay_deterministic(self):
        table, x, config = make_setup()
        store = cleirnet.init_params(config, seed=9)
        series = growing_series(table, days=25)
        a = cleirnet.forecast_cleirnet(store, series, x, config)
        b = cleirnet.forecast_cleirnet(store, series, x, config)
        assert np.array_equal(a.predictions, b.predictions)

    def test_horizon_columns(self):
        table, x, config = make_setup(n_f=14)
        store = cleirnet.init_params(config, seed=10)
        series = growing_series(table, days=30)
        frame = cleirnet.forecast_cleirnet(store, series, x, config)
        assert frame.predictions.shape[1] == 14

    def test_empty_series_rejected(self):
        table, x, config = make_setup()
        store = cleirnet.init_params(config, seed=1)
        with pytest.raises(cleirnet.CleirError):
            cleirnet.forecast_cleirnet(store, np.zeros((5, 0)), x, config)


class TestEnsemble:
    def frame_from(self, base, deltas):
        return cleirnet.ForecastFrame.from_deltas(0, base, deltas)

    def test_single_frame_identity(self):
        f = self.frame_from(np.array([1.0, 2.0]), np.ones((2, 3)))
        e = cleirnet.ensemble_forecasts([f])
        assert np.array_equal(e.predictions, f.predictions)

    def test_mean_of_two(self):
        base = np.array([1.0, 2.0])
        a = self.frame_from(base, np.ones((2, 3)))
        b = self.frame_from(base, np.ones((2, 3)) + 2.0)
        e = cleirnet.ensemble_forecasts([a, b])
        assert np.allclose(e.predictions, self.frame_from(
            base, np.ones((2, 3)) + 1.0).predictions, atol=1e-12)

    def test_ensemble_mse_bounded_by_max_member(self):
        rng = np.random.default_rng(20)
        for _ in range(25):
            base = rng.uniform(0, 10, size=4)
            truth = base[:, None] + rng.normal(size=(4, 5))
            frames = [self.frame_from(base, rng.normal(size=(4, 5)))
                      for _ in range(rng.integers(2, 6))]
            mses = [np.mean((f.predictions - truth) ** 2) for f in frames]
            ens = cleirnet.ensemble_forecasts(frames)
            assert np.mean((ens.predictions - truth) ** 2) <= max(mses) + 1e-12

    def test_mismatched_shapes_rejected(self):
        a = self.frame_from(np.ones(2), np.ones((2, 3)))
        b = self.frame_from(np.ones(2), np.ones((2, 4)))
        with pytest.raises(cleirnet.CleirError):
            cleirnet.ensemble_forecasts([a, b])


class TestCountParameters:
    def test_hand_sum_minimal_config(self):
        config = cleirnet.CleirConfig(n_c=1, n_tf=1, n_d=1, n_f=1, n_x=0)
        # encode 4*(2+1+1)*1 + remember/forecast 4*(1+1+1)*1 each
        # + td (1+1)*1 + cd (0+2)*1 + (1+1)*1 + (1+1)*1
        expect = 16 + 12 + 12 + 2 + 2 + 2 + 2
        assert cleirnet.count_parameters(config) == expect

    def test_affine_in_county_count(self):
        for n_tf in (1, 2, 5):
            counts = [cleirnet.count_parameters(
                cleirnet.CleirConfig(n_c=n_c, n_tf=n_tf, n_d=8, n_f=1))
                for n_c in (10, 11, 50)]
            assert counts[1] - counts[0] == n_tf + 1
            assert counts[2] - counts[0] == 40 * (n_tf + 1)

    def test_published_total_not_reproduced_at_companion_county_count(self):
        # the companion model's output head implies 3140 counties; the
        # published 10945 total is inconsistent with that count
        config = cleirnet.CleirConfig(n_c=3140, n_tf=2, n_d=24, n_f=14, n_x=6)
        assert cleirnet.count_parameters(config) != 10945


class TestParamStore:
    def test_init_deterministic(self):
        config = cleirnet.CleirConfig(n_c=4, n_tf=3, n_d=5, n_f=2)
        a = cleirnet.init_params(config, seed=21)
        b = cleirnet.init_params(config, seed=21)
        for name in a.names():
            assert np.array_equal(a.values[name], b.values[name])

    def test_shapes_match_spec(self):
        config = cleirnet.CleirConfig(n_c=7, n_tf=3, n_d=5, n_f=2, n_x=6)
        store = cleirnet.init_params(config, seed=1)
        assert store.values["encode.wx"].shape == (12, 2)
        assert store.values["encode.wh"].shape == (12, 3)
        assert store.values["td.w"].shape == (7, 3)
        assert store.values["cd0.w"].shape == (5, 7)
        assert store.values["cd2.w"].shape == (1, 5)
        assert store.n_parameters() == cleirnet.count_parameters(config)
