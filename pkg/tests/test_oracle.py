import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import logsumexp

from oracles import empirical, total_variation
from partmc.errors import InvalidInputError, ResourceLimitError
from partmc.model import HyperParams, log_posterior_unnorm, simulate_data
from partmc.oracle import (
    BENCH_HYPER,
    MINOR_ISLAND,
    ChainFixture,
    MassTable,
    adversarial_two_island_fixture,
    benchmark_allocation,
    benchmark_dataset,
    exact_consensus,
    exact_posterior_table,
    exact_top_k,
    exact_top_k_scheme,
    metropolis_fixture,
    simulate_fixture_chain,
    stationary_distribution,
    stream_posterior_summary,
    streaming_logsumexp,
)
from partmc.partitions import Allocation


def mp_stationary(P):
    """Stationary vector by a 50-digit linear solve of pi Q = 0, sum(pi) = 1.

    Q is rebuilt from the off-diagonal entries of P, with the diagonal set to
    minus the exact row sum: the stored diagonal of P carries rounding error
    far larger than the escape probabilities.
    """
    mpmath.mp.dps = 50
    m = P.shape[0]
    A = mpmath.matrix(m, m)
    for i in range(m):
        for j in range(m):
            if i != j:
                A[j, i] = mpmath.mpf(float(P[i, j]))
    for i in range(m):
        A[i, i] = -mpmath.fsum(mpmath.mpf(float(P[i, j])) for j in range(m) if j != i)
    for j in range(m):
        A[m - 1, j] = 1
    b = mpmath.matrix(m, 1)
    b[m - 1] = 1
    return np.array([float(x) for x in mpmath.lu_solve(A, b)])


class TestTwoIslandFixture:
    def setup_method(self):
        self.fx = adversarial_two_island_fixture(0.01)

    def test_invariants(self):
        P, pi = self.fx.P, self.fx.pi
        assert len(self.fx.states) == 15
        assert np.all(P >= 0)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-14)
        np.testing.assert_allclose(pi @ P, pi, atol=1e-15)
        flow = pi[:, None] * P
        np.testing.assert_allclose(flow, flow.T, atol=1e-16)

    def test_minor_mass(self):
        minor = np.array([s in MINOR_ISLAND for s in self.fx.states])
        assert self.fx.pi[minor].sum() == pytest.approx(0.01, abs=1e-15)
        gth = stationary_distribution(self.fx.P)
        ref = mp_stationary(self.fx.P)
        assert abs(gth[minor].sum() - 0.01) < 1e-10
        np.testing.assert_allclose(gth, ref, rtol=1e-10)

    def test_minor_states_rank_second_to_fourth(self):
        order = np.argsort(-self.fx.pi)
        assert self.fx.states[order[0]] == "1111"
        assert {self.fx.states[k] for k in order[1:4]} == set(MINOR_ISLAND)

    def test_trapped_in_minor_island(self):
        trace = simulate_fixture_chain(self.fx, 1_000_000, "1122", seed=0)
        assert set(trace.keys) == set(MINOR_ISLAND)
        minor = np.array([s in MINOR_ISLAND for s in self.fx.states])
        cond = self.fx.pi[minor] / self.fx.pi[minor].sum()
        target = dict(zip([s for s in self.fx.states if s in MINOR_ISLAND], cond))
        assert total_variation(empirical(trace), target) < 0.02

    def test_bad_epsilon(self):
        with pytest.raises(InvalidInputError):
            adversarial_two_island_fixture(0.7)


class TestSmallChains:
    def test_two_state_switch_rate(self):
        a, b = 0.1, 0.3
        P = np.array([[1 - a, a], [b, 1 - b]])
        pi = stationary_distribution(P)
        np.testing.assert_allclose(pi, [0.75, 0.25], rtol=1e-14)
        trace = simulate_fixture_chain(ChainFixture(("11", "12"), P, pi), 100_000, "11", seed=3)
        path = trace.index
        rate = np.mean(path[1:] != path[:-1])
        assert rate == pytest.approx(pi[0] * a + pi[1] * b, rel=0.05)

    def test_well_mixed_five_states(self):
        states = ("11111", "11112", "11121", "11122", "11123")
        w = np.array([5.0, 4.0, 3.0, 2.0, 1.0])
        fx = metropolis_fixture(states, w)
        trace = simulate_fixture_chain(fx, 100_000, states[0], seed=4)
        assert total_variation(empirical(trace), dict(zip(states, w / w.sum()))) < 0.01

    def test_eig_method_agrees_on_well_conditioned_chain(self):
        fx = metropolis_fixture(("1", "2", "3"), [1.0, 2.0, 3.0])
        np.testing.assert_allclose(stationary_distribution(fx.P, "eig"), fx.pi, rtol=1e-12)
        with pytest.raises(InvalidInputError):
            stationary_distribution(fx.P, "power")

    def test_fixture_validation_and_csv(self, tmp_path):
        with pytest.raises(InvalidInputError):
            ChainFixture(("1", "2"), np.array([[0.5, 0.5], [0.5, 0.4]]), np.array([0.5, 0.5]))
        with pytest.raises(InvalidInputError):
            ChainFixture(("1", "2"), np.array([[0.5, 0.5], [0.1, 0.9]]), np.array([0.5, 0.5]))
        fx = adversarial_two_island_fixture(0.02)
        fx.to_csv(tmp_path / "fx.csv")
        back = ChainFixture.from_csv(tmp_path / "fx.csv")
        assert back.states == fx.states
        np.testing.assert_array_equal(back.P, fx.P)
        np.testing.assert_array_equal(back.pi, fx.pi)


class TestLogSumExp:
    @given(st.lists(st.floats(-700, 700), min_size=1, max_size=40), st.randoms())
    def test_permutation_invariant(self, values, rnd):
        shuffled = list(values)
        rnd.shuffle(shuffled)
        expected = float(logsumexp(values))
        assert streaming_logsumexp(values) == pytest.approx(expected, rel=1e-12, abs=1e-12)
        assert streaming_logsumexp(shuffled) == pytest.approx(expected, rel=1e-12, abs=1e-12)

    def test_no_overflow(self):
        assert streaming_logsumexp([1000.0, 1000.0]) == pytest.approx(1000.0 + math.log(2))


class TestTables:
    def test_single_observation(self):
        data = simulate_data(BENCH_HYPER, Allocation((1,)), 3, 2, 0)
        table = exact_posterior_table(data, BENCH_HYPER)
        assert table.keys == ("1",)
        np.testing.assert_allclose(table.probabilities(), [1.0])

    def test_three_observations(self):
        data = benchmark_dataset(3, seed=2)
        table = exact_posterior_table(data, BENCH_HYPER)
        assert table.keys == ("111", "112", "121", "122", "123")
        for key, lm in zip(table.keys, table.log_mass):
            assert lm == pytest.approx(log_posterior_unnorm(data, Allocation.from_key(key), BENCH_HYPER), abs=1e-12)
        assert table.probabilities().sum() == pytest.approx(1.0, abs=1e-14)

    def test_save_load(self, tmp_path):
        table = exact_posterior_table(benchmark_dataset(4, seed=1), BENCH_HYPER)
        table.save(tmp_path / "t.csv")
        back = MassTable.load(tmp_path / "t.csv")
        assert back.keys == table.keys and back.log_Z == table.log_Z
        np.testing.assert_array_equal(back.log_mass, table.log_mass)

    def test_cap(self):
        data = simulate_data(BENCH_HYPER, Allocation(tuple(range(1, 12))), 2, 2, 0)
        with pytest.raises(ResourceLimitError):
            exact_posterior_table(data, BENCH_HYPER)

    def test_top_k(self):
        table = MassTable(("11", "12", "21"), np.array([0.0, 1.0, 1.0]))
        assert exact_top_k(table, 2) == ["12", "21"]
        s = exact_top_k_scheme(table, 3)
        assert s.sets == (("12",), ("21",), ("11",))

    def test_stream_matches_table(self, tmp_path):
        data = benchmark_dataset(5, seed=3)
        table = exact_posterior_table(data, BENCH_HYPER)
        ck = tmp_path / "ck.json"
        first = stream_posterior_summary(data, BENCH_HYPER, top_k=4, checkpoint=ck, checkpoint_every=7)
        assert ck.exists()
        resumed = stream_posterior_summary(data, BENCH_HYPER, top_k=4, checkpoint=ck, checkpoint_every=7)
        for out in (first, resumed):
            assert out["log_Z"] == pytest.approx(table.log_Z, abs=1e-12)
            np.testing.assert_allclose(out["consensus"].rho, exact_consensus(table).rho, atol=1e-12)
            assert [k for k, _, _ in out["top"]] == exact_top_k(table, 4)

    def test_benchmark_allocation(self):
        assert benchmark_allocation(6).labels == (1, 1, 2, 2, 3, 3)
        assert benchmark_allocation(2).labels == (1, 2)
        assert benchmark_allocation(8).n_clusters == 3

    def test_bench_hyper_is_valid(self):
        assert isinstance(BENCH_HYPER, HyperParams)
