import numpy as np
import pytest

from epiforge import geo, seir

from conftest import synthetic_table


def two_county_table(p0=100, p1=200):
    recs = [geo.CountyRecord("00001", "a", "XX", 0.0, 0.0, p0, 5.0),
            geo.CountyRecord("00002", "b", "XX", 0.0, 1.0, p1, 5.0)]
    return geo.CountyTable.from_records(recs)


class TestSeirDerivative:
    def test_disease_free_equilibrium(self):
        d = seir.seir_derivative((1000.0, 0.0, 0.0, 0.0),
                                 seir.SeirParams(0.5, 0.2, 0.1), 1000.0)
        assert d == (0.0, 0.0, 0.0, 0.0)

    def test_direct_substitution(self):
        d = seir.seir_derivative((900.0, 0.0, 100.0, 0.0),
                                 seir.SeirParams(0.5, 0.2, 0.1), 1000.0)
        assert d == pytest.approx((-45.0, 45.0, -10.0, 10.0), abs=1e-12)

    def test_component_sum_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            state = rng.uniform(0, 1000, size=4)
            n = state.sum()
            params = seir.SeirParams(*rng.uniform(0, 1, size=3))
            d = seir.seir_derivative(tuple(state), params, n)
            assert abs(sum(d)) <= 1e-12 * n

    def test_nonpositive_population_rejected(self):
        with pytest.raises(seir.SeirError):
            seir.seir_derivative((0.0, 0.0, 0.0, 0.0),
                                 seir.SeirParams(0.5, 0.2, 0.1), 0.0)


class TestFlowMatrix:
    def test_direct_formula(self):
        table = two_county_table(100, 200)
        distances = np.array([[0.0, 10.0], [10.0, 0.0]])
        fm = seir.build_flow_matrix(table, distances, mu_flow=1.0)
        assert fm.raw[0, 1] == fm.raw[1, 0] == 10.0
        assert fm.raw[0, 0] == fm.raw[1, 1] == 0.0

    def test_resistance_limit(self):
        table = two_county_table()
        distances = np.array([[0.0, 10.0], [10.0, 0.0]])
        fm = seir.build_flow_matrix(table, distances, mu_flow=1e12)
        assert np.all(fm.raw < 1e-9)

    def test_symmetry_random_tables(self):
        table = synthetic_table(8, seed=3)
        distances = geo.distance_matrix(table)
        fm = seir.build_flow_matrix(table, distances, mu_flow=123.0)
        assert np.array_equal(fm.raw, fm.raw.T)

    def test_zero_distance_error_names_pair(self):
        table = two_county_table()
        distances = np.zeros((2, 2))
        with pytest.raises(seir.SeirError, match="0 and 1"):
            seir.build_flow_matrix(table, distances, mu_flow=1.0)


class TestBalanceFlow:
    def test_hand_computation(self):
        balanced = seir.balance_flow(np.array([[0.0, 2.0], [2.0, 0.0]]))
        assert np.array_equal(balanced, [[-2.0, 2.0], [2.0, -2.0]])

    def test_zero_matrix(self):
        assert np.array_equal(seir.balance_flow(np.zeros((3, 3))),
                              np.zeros((3, 3)))

    def test_row_sums_vanish_on_random_symmetric(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = rng.integers(2, 12)
            raw = rng.uniform(0, 10, size=(n, n))
            raw = raw + raw.T
            np.fill_diagonal(raw, 0.0)
            balanced = seir.balance_flow(raw)
            assert np.max(np.abs(balanced.sum(axis=1))) <= 1e-9 * raw.max()

    def test_asymmetric_rejected(self):
        raw = np.array([[0.0, 1.0], [2.0, 0.0]])
        with pytest.raises(seir.SeirError, match="symmetric"):
            seir.balance_flow(raw)


class TestMixingDerivative:
    def test_decoupled_limit_matches_scalar_bitwise(self):
        table = two_county_table(1000, 1000)
        pops = table.populations
        flow = seir.FlowMatrix(raw=np.zeros((2, 2)), balanced=np.zeros((2, 2)))
        state = seir.CompartmentMatrix(
            np.array([[700.0, 100.0, 150.0, 50.0],
                      [600.0, 200.0, 100.0, 100.0]]))
        beta = np.array([0.37, 0.11])
        deriv = seir.mixing_derivative(state, flow, beta, 0.21, 0.13, pops)
        for c in range(2):
            scalar = seir.seir_derivative(tuple(state.values[c]),
                                          seir.SeirParams(beta[c], 0.21, 0.13),
                                          pops[c])
            assert tuple(deriv[c]) == scalar  # bitwise

    def test_identical_fractions_cancel_flow(self):
        table = two_county_table(1000, 1000)
        pops = table.populations
        distances = np.array([[0.0, 5.0], [5.0, 0.0]])
        flow = seir.build_flow_matrix(table, distances, mu_flow=1.0)
        state = seir.CompartmentMatrix(
            np.array([[700.0, 100.0, 150.0, 50.0]] * 2))
        beta = np.array([0.0, 0.0])
        deriv = seir.mixing_derivative(state, flow, beta, 0.0, 0.0, pops)
        assert np.max(np.abs(deriv)) < 1e-12

    def test_matches_per_county_loop_oracle(self):
        # brute-force evaluation of the non-vectorized per-county sums
        rng = np.random.default_rng(5)
        n = 3
        table = synthetic_table(n, seed=9, pop_range=(1e3, 1e4))
        pops = table.populations
        raw = rng.uniform(0, 3, size=(n, n))
        raw = raw + raw.T
        np.fill_diagonal(raw, 0.0)
        flow = seir.FlowMatrix(raw=raw, balanced=seir.balance_flow(raw))
        values = rng.uniform(10, 100, size=(n, 4))
        values *= (pops / values.sum(axis=1))[:, None]
        state = seir.CompartmentMatrix(values)
        beta = rng.uniform(0.05, 0.5, size=n)
        sigma, gamma = 0.2, 0.1
        deriv = seir.mixing_derivative(state, flow, beta, sigma, gamma, pops)

        x = values / pops[:, None]
        for i in range(n):
            inflow = np.array([sum(raw[i, j] * x[j, k] for j in range(n))
                               for k in range(4)])
            outflow = np.array([x[i, k] * sum(raw[j, i] for j in range(n))
                                for k in range(4)])
            infection = beta[i] * values[i, seir.I] * x[i, seir.S]
            expect = inflow - outflow
            expect[seir.S] -= infection
            expect[seir.E] += infection - sigma * values[i, seir.E]
            expect[seir.I] += sigma * values[i, seir.E] - gamma * values[i, seir.I]
            expect[seir.R] += gamma * values[i, seir.I]
            assert np.allclose(deriv[i], expect, atol=1e-10)


class TestEulerStep:
    def test_zero_derivative_keeps_state(self):
        state = seir.CompartmentMatrix(np.array([[10.0, 1.0, 2.0, 3.0]]))
        out, clamps = seir.euler_step(state, np.zeros((1, 4)), 0.5)
        assert np.array_equal(out.values, state.values)
        assert clamps == 0

    def test_scalar_case(self):
        state = seir.CompartmentMatrix(np.array([[100.0, 0.0, 0.0, 0.0]]))
        deriv = np.array([[10.0, 0.0, 0.0, 0.0]])
        out, _ = seir.euler_step(state, deriv, 0.1)
        assert out.values[0, 0] == pytest.approx(101.0, abs=1e-12)

    def test_clamp_preserves_county_total(self):
        state = seir.CompartmentMatrix(np.array([[1.0, 5.0, 4.0, 0.0]]))
        deriv = np.array([[-30.0, 10.0, 0.0, 0.0]])  # S overshoots below 0
        out, clamps = seir.euler_step(state, deriv, 0.1)
        assert clamps == 1
        assert np.all(out.values >= 0.0)
        assert out.values.sum() == pytest.approx(10.0 + 0.1 * (-20.0), rel=1e-12)

    def test_nonpositive_h_rejected(self):
        state = seir.CompartmentMatrix(np.ones((1, 4)))
        with pytest.raises(seir.SeirError):
            seir.euler_step(state, np.zeros((1, 4)), 0.0)

    def test_first_order_convergence_on_decay(self):
        # dp/dt = -gamma p against the h/64 reference trajectory
        gamma = 0.1

        def integrate(h, days=10):
            value = np.array([[100.0, 0.0, 0.0, 0.0]])
            state = seir.CompartmentMatrix(value)
            steps = int(round(days / h))
            out = []
            for _ in range(steps):
                deriv = np.zeros((1, 4))
                deriv[0, 0] = -gamma * state.values[0, 0]
                state, _ = seir.euler_step(state, deriv, h)
                out.append(state.values[0, 0])
            return np.array(out)

        h = 0.5
        coarse = integrate(h)
        ref = integrate(h / 64)[63::64]          # h/64 reference on the h grid
        err_h = np.max(np.abs(coarse - ref))
        fine = integrate(h / 2)[1::2]            # halved step, same grid
        ref2 = integrate(h / 2 / 64)[127::128]
        err_h2 = np.max(np.abs(fine - ref2))
        ratio = err_h / err_h2
        assert 1.7 <= ratio <= 2.3


class TestInitialState:
    def test_zero_lambda_gives_susceptible_only(self, table5):
        params = seir.MixParams(1e5, 1e4, 0.2, 0.1, 0.0, 0.0)
        state = seir.sample_initial_state(table5, params, seed=1)
        assert np.all(state.values[:, seir.E] == 0)
        assert np.all(state.values[:, seir.I] == 0)
        assert np.array_equal(state.values[:, seir.S], table5.populations)

    def test_recovered_starts_at_zero(self, table5):
        params = seir.MixParams(1e5, 1e4, 0.2, 0.1, 1e-3, 0.5)
        for s in range(5):
            state = seir.sample_initial_state(table5, params, seed=s)
            assert np.all(state.values[:, seir.R] == 0.0)

    def test_deterministic_per_seed(self, table5):
        params = seir.MixParams(1e5, 1e4, 0.2, 0.1, 1e-3, 0.5)
        a = seir.sample_initial_state(table5, params, seed=9)
        b = seir.sample_initial_state(table5, params, seed=9)
        assert np.array_equal(a.values, b.values)


class TestSimulateScenario:
    def make_flow(self, table, mu_flow=1e5):
        return seir.build_flow_matrix(table, geo.distance_matrix(table),
                                      mu_flow)

    def test_no_dynamics_gives_zero_cases(self, table5):
        params = seir.MixParams(1e5, 1e4, 0.0, 0.0, 0.0, 0.0)
        sc = seir.simulate_scenario(table5, self.make_flow(table5), params,
                                    days=10, h=0.5, seed=1)
        assert np.all(sc.cumulative == 0.0)

    def test_single_county_matches_scalar_euler_oracle(self):
        recs = [geo.CountyRecord("00001", "a", "XX", 0.0, 0.0, 10000, 250.0)]
        table = geo.CountyTable.from_records(recs)
        flow = seir.FlowMatrix(raw=np.zeros((1, 1)), balanced=np.zeros((1, 1)))
        params = seir.MixParams(1e5, 1e3, 0.2, 0.1, 1e-3, 0.5)
        sc = seir.simulate_scenario(table, flow, params, days=30, h=0.25,
                                    seed=4)

        # independently coded scalar SEIR Euler loop
        init = seir.sample_initial_state(table, params, seed=4).values[0]
        s, e, i, r = init
        n = 10000.0
        beta = 250.0 / 1e3
        expect = [i + r]
        for _ in range(30):
            for _ in range(4):
                inf = beta * i * (s / n)
                s, e, i, r = (s - 0.25 * inf,
                              e + 0.25 * (inf - 0.2 * e),
                              i + 0.25 * (0.2 * e - 0.1 * i),
                              r + 0.25 * (0.1 * i))
            expect.append(i + r)
        assert np.allclose(sc.cumulative[0], expect, atol=1e-10)

    def test_population_conserved(self, table20):
        params = seir.MixParams(1e5, 8e3, 0.2, 0.1, 1e-4, 0.3)
        sc = seir.simulate_scenario(table20, self.make_flow(table20), params,
                                    days=60, h=0.25, seed=2)
        pops = table20.populations
        err = np.abs(sc.trajectory.sum(axis=2) - pops[None, :])
        assert np.all(err <= 1e-6 * pops[None, :])

    def test_national_cumulative_monotone(self, table20):
        params = seir.MixParams(1e5, 8e3, 0.3, 0.15, 1e-4, 0.3)
        sc = seir.simulate_scenario(table20, self.make_flow(table20), params,
                                    days=80, h=0.25, seed=3)
        assert sc.clamp_events == 0  # clamping would be allowed to move I+R
        national = sc.cumulative.sum(axis=0)
        assert np.all(np.diff(national) >= -1e-9)

    def test_bad_h_rejected(self, table5):
        params = seir.MixParams(1e5, 1e4, 0.2, 0.1, 0.0, 0.0)
        with pytest.raises(seir.SeirError):
            seir.simulate_scenario(table5, self.make_flow(table5), params,
                                   days=5, h=0.3, seed=1)


class TestCorpus:
    def test_degenerate_ranges_share_parameters(self, table5):
        ranges = seir.ParamRanges(mu_flow=(1e5, 1e5), mu_spread=(1e4, 1e4),
                                  sigma=(0.2, 0.2), gamma=(0.1, 0.1),
                                  lambda_e=(1e-4, 1e-4), lambda_i=(0.3, 0.3))
        corpus = seir.generate_corpus(table5, ranges, 3, 1, days=10, h=0.5,
                                      seed=1)
        params = {sc.params for sc in corpus.scenarios}
        assert len(params) == 1

    def test_requested_sizes(self, table5):
        corpus = seir.generate_corpus(table5, seir.ParamRanges(), 4, 2,
                                      days=8, h=0.5, seed=1)
        assert len(corpus.train) == 4
        assert len(corpus.valid) == 2

    def test_same_seed_byte_identical(self, table5, tmp_path):
        ranges = seir.ParamRanges()
        paths = []
        for tag in ("a", "b"):
            corpus = seir.generate_corpus(table5, ranges, 3, 1, days=12,
                                          h=0.25, seed=77)
            path = tmp_path / f"corpus-{tag}.jsonl"
            seir.save_corpus(corpus, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_parallel_generation_identical(self, table5, tmp_path):
        ranges = seir.ParamRanges()
        serial = seir.generate_corpus(table5, ranges, 4, 2, days=10, h=0.5,
                                      seed=33, jobs=1)
        parallel = seir.generate_corpus(table5, ranges, 4, 2, days=10, h=0.5,
                                        seed=33, jobs=3)
        for a, b in zip(serial.scenarios, parallel.scenarios):
            assert a.role == b.role
            assert a.params == b.params
            assert np.array_equal(a.cumulative, b.cumulative)

    def test_round_trip_bit_exact(self, table5, tmp_path):
        corpus = seir.generate_corpus(table5, seir.ParamRanges(), 2, 1,
                                      days=9, h=0.25, seed=5)
        first = tmp_path / "c1.jsonl"
        seir.save_corpus(corpus, first)
        loaded = seir.load_corpus(first)
        second = tmp_path / "c2.jsonl"
        seir.save_corpus(loaded, second)
        assert first.read_bytes() == second.read_bytes()
        for a, b in zip(corpus.scenarios, loaded.scenarios):
            assert np.array_equal(a.cumulative, b.cumulative)
            assert a.params == b.params

    def test_incidence_derivation(self):
        sc = seir.Scenario(params=seir.MixParams(1e5, 1e4, 0.2, 0.1, 0, 0),
                           seed=0, role="train",
                           cumulative=np.array([[1.0, 3.0, 2.0, 6.0]]))
        assert np.array_equal(sc.incidence, [[1.0, 2.0, 0.0, 4.0]])
