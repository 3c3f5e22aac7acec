import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import chi2_tail_mp
from partmc.diagnostics import (
    DiagnosticResult,
    PartitionScheme,
    chi2_upper_tail,
    cv_diagnostic,
    cv_from_estimates,
    cv_matrix,
    hotelling_rs,
    projection_a,
    projection_b,
    t2_projection,
    t2_quadratic,
    top_k_scheme,
    weights,
)
from partmc.errors import InsufficientRegenerationError, InsufficientStatesError, InvalidInputError
from partmc.oracle import metropolis_fixture, simulate_fixture_chain
from partmc.regen import find_tours

STATES = ("1111", "1112", "1121", "1122")
PI = np.array([0.4, 0.3, 0.2, 0.1])


def random_spd(rng, k):
    a = rng.normal(size=(k, k))
    return a @ a.T + 0.1 * np.eye(k)


@pytest.fixture(scope="module")
def mixed_trace():
    return simulate_fixture_chain(metropolis_fixture(STATES, PI), 100_000, STATES[0], seed=1)


class TestStatisticAlgebra:
    def test_two_set_example(self):
        g = np.array([1.2, 0.8])
        assert t2_quadratic(g, np.eye(2), 100) == pytest.approx(8.0, rel=1e-12)
        assert t2_projection(g, np.eye(2), 100) == pytest.approx(8.0, rel=1e-12)
        assert chi2_upper_tail(8.0, 1) == pytest.approx(0.0046777349810472645, rel=1e-10)

    @pytest.mark.parametrize("x, dof", [(0.5, 1), (8.0, 1), (3.0, 2), (20.0, 4), (60.0, 9), (200.0, 3)])
    def test_chi2_tail_matches_high_precision(self, x, dof):
        assert chi2_upper_tail(x, dof) == pytest.approx(chi2_tail_mp(x, dof), rel=1e-10)

    def test_chi2_edges(self):
        assert chi2_upper_tail(0.0, 3) == 1.0
        assert chi2_upper_tail(math.inf, 3) == 0.0
        with pytest.raises(InvalidInputError):
            chi2_upper_tail(1.0, 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 10_000))
    def test_projections(self, k, seed):
        rng = np.random.default_rng(seed)
        sigma = random_spd(rng, k)
        a = projection_a(sigma)
        np.testing.assert_allclose(a @ np.ones(k), 0.0, atol=1e-8 * np.abs(a).max())
        b = projection_b(sigma)
        np.testing.assert_allclose(b, b.T, atol=1e-12)
        np.testing.assert_allclose(b @ b, b, atol=1e-10)
        assert np.trace(b) == pytest.approx(k - 1, abs=1e-10)
        assert weights(sigma).sum() == pytest.approx(1.0, abs=1e-12)
        g = rng.normal(size=k)
        assert t2_projection(g, sigma, 50) == pytest.approx(t2_quadratic(g, sigma, 50), rel=1e-8, abs=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 10_000), st.floats(1e-3, 1e3))
    def test_scale_equivariance(self, k, seed, c):
        rng = np.random.default_rng(seed)
        sigma, g = random_spd(rng, k), rng.normal(size=k)
        assert t2_quadratic(c * g, c * c * sigma, 30) == pytest.approx(t2_quadratic(g, sigma, 30), rel=1e-8)

    def test_constant_vector_gives_zero(self):
        sigma = random_spd(np.random.default_rng(3), 4)
        assert t2_quadratic(np.full(4, 2.5), sigma, 100) == pytest.approx(0.0, abs=1e-9)

    def test_singular_covariance(self):
        with pytest.raises(InsufficientRegenerationError):
            t2_quadratic(np.ones(2), np.ones((2, 2)), 10)


class TestScheme:
    def test_validation(self):
        with pytest.raises(InvalidInputError):
            PartitionScheme((("1",),), np.zeros(1))
        with pytest.raises(InvalidInputError):
            PartitionScheme((("11",), ("11", "12")), np.zeros(2))
        with pytest.raises(InvalidInputError):
            PartitionScheme((("11",), ()), np.zeros(2))
        with pytest.raises(InvalidInputError):
            PartitionScheme((("11",), ("12",)), np.array([0.0, -np.inf]))

    def test_from_log_masses(self):
        s = PartitionScheme.from_log_masses([["11"], ["12", "21"]], {"11": 0.0, "12": math.log(2), "21": math.log(3)})
        np.testing.assert_allclose(s.log_q, [0.0, math.log(5)])
        np.testing.assert_allclose(s.q, [0.2, 1.0])

    def test_top_k(self, mixed_trace):
        s = top_k_scheme(mixed_trace, 3)
        assert s.sets == (("1111",), ("1112",), ("1121",))
        with pytest.raises(InsufficientStatesError):
            top_k_scheme(mixed_trace, 5)

    def test_top_k_ties_go_to_smaller_key(self):
        from partmc.trace import Trace

        t = Trace.from_states(["11", "12", "11"], {"11": -1.0, "12": -1.0})
        assert top_k_scheme(t, 2).sets == (("11",), ("12",))


class TestHotellingRS:
    def test_on_mixed_chain(self, mixed_trace):
        tours = find_tours(mixed_trace, "1111")
        scheme = PartitionScheme.from_log_masses([[s] for s in STATES[:3]], dict(zip(STATES, np.log(PI))))
        res = hotelling_rs(mixed_trace, tours, scheme)
        assert res.K == 3 and res.dof == 2 and res.R == tours.R
        assert math.isfinite(res.t2) and 0.0 <= res.p_value <= 1.0
        assert res.t2_projection == pytest.approx(res.t2, rel=1e-8)
        # masses are normalized, so 1/Z = 1
        assert res.log_z_inv == pytest.approx(0.0, abs=0.05)
        assert not res.unvisited

    def test_sets_covering_every_state_are_degenerate(self, mixed_trace):
        # sum_i q_i g_i = 1 on every step, so the covariance is singular
        tours = find_tours(mixed_trace, "1111")
        scheme = PartitionScheme.from_log_masses([[s] for s in STATES], dict(zip(STATES, np.log(PI))))
        with pytest.raises(InsufficientRegenerationError):
            hotelling_rs(mixed_trace, tours, scheme)

    def test_needs_enough_tours(self):
        from partmc.trace import Trace

        t = Trace.from_states(["11", "12", "11", "12", "11"], {"11": 0.0, "12": -1.0})
        tours = find_tours(t, "11")
        assert tours.R == 2
        with pytest.raises(InsufficientRegenerationError, match="K \\+ 1"):
            hotelling_rs(t, tours, PartitionScheme((("11",), ("12",)), np.array([0.0, -1.0])))

    def test_unvisited_set_forces_rejection(self, mixed_trace):
        tours = find_tours(mixed_trace, "1111")
        lm = dict(zip(STATES, np.log(PI)))
        lm["1123"] = math.log(0.05)
        scheme = PartitionScheme.from_log_masses([["1112"], ["1121"], ["1123"]], lm)
        with pytest.warns(RuntimeWarning, match="never visited"):
            res = hotelling_rs(mixed_trace, tours, scheme)
        assert res.unvisited == [2]
        assert res.z_inv_hat == 0.0 and res.log_z_inv == -math.inf
        assert res.p_value < 1e-10

    def test_unvisited_with_covering_sets_is_infinite(self, mixed_trace):
        tours = find_tours(mixed_trace, "1111")
        lm = dict(zip(STATES, np.log(PI)))
        lm["1123"] = math.log(0.05)
        scheme = PartitionScheme.from_log_masses([["1111", "1112"], ["1121", "1122"], ["1123"]], lm)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = hotelling_rs(mixed_trace, tours, scheme)
        assert res.t2 == math.inf and res.p_value == 0.0

    def test_nothing_visited(self, mixed_trace):
        tours = find_tours(mixed_trace, "1111")
        scheme = PartitionScheme((("1123",), ("1223",)), np.zeros(2))
        with pytest.raises(InsufficientRegenerationError):
            hotelling_rs(mixed_trace, tours, scheme)

    def test_json_round_trip(self, mixed_trace):
        tours = find_tours(mixed_trace, "1111")
        res = hotelling_rs(mixed_trace, tours, top_k_scheme(mixed_trace, 3))
        back = DiagnosticResult.from_record(json.loads(res.to_json()))
        np.testing.assert_array_equal(back.g_bar, res.g_bar)
        np.testing.assert_array_equal(back.sigma_hat, res.sigma_hat)
        assert back.t2 == res.t2 and back.p_value == res.p_value and back.delta == res.delta


class TestCV:
    def test_hand_values(self):
        np.testing.assert_allclose(cv_from_estimates(np.array([0.5, 0.9, 0.1]), np.array([0.25, 0.25, 0.25]), 100),
                                   [0.1, 0.05 / 0.9, 0.05 / 0.9])

    def test_matrix(self, mixed_trace):
        tours = find_tours(mixed_trace, "1111")
        cv = cv_matrix(mixed_trace, tours, 4)
        np.testing.assert_array_equal(np.diag(cv), 0.0)
        np.testing.assert_array_equal(cv, cv.T)
        assert cv[2, 3] == pytest.approx(cv_diagnostic(mixed_trace, tours, (2, 3)), rel=1e-12)
        # pair (0, 1) is together in every state
        assert cv[0, 1] == 0.0
