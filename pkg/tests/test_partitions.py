import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partmc.errors import InvalidInputError, ResourceLimitError
from partmc.partitions import (
    Allocation,
    bell,
    canonicalize,
    decode_key,
    encode_key,
    enumerate_partitions,
    is_canonical,
    key_from_array,
    partition_array,
    stirling2,
)


def bell_binomial(n):
    """Bell numbers from B(m + 1) = sum_k C(m, k) B(k)."""
    b = [1]
    for m in range(n):
        b.append(sum(math.comb(m, k) * b[k] for k in range(m + 1)))
    return b[n]


def brute_partitions(n):
    """Distinct set partitions from all label vectors in {1..n}^n."""
    seen = set()
    for labels in itertools.product(range(n), repeat=n):
        blocks = {}
        for i, lab in enumerate(labels):
            blocks.setdefault(lab, []).append(i)
        seen.add(frozenset(frozenset(b) for b in blocks.values()))
    return seen


class TestCounting:
    def test_small_bell_numbers(self):
        assert [bell(n) for n in range(1, 11)] == [1, 2, 5, 15, 52, 203, 877, 4140, 21147, 115975]

    def test_bell_14(self):
        assert bell(14) == 190_899_322
        assert bell(14) == bell_binomial(14)

    def test_bell_large_is_exact(self):
        assert bell(100) == bell_binomial(100)
        assert bell(100) > 2**64

    @pytest.mark.parametrize("n", range(1, 7))
    def test_bell_matches_brute_force(self, n):
        assert bell(n) == len(brute_partitions(n))

    @pytest.mark.parametrize("n", range(1, 13))
    def test_stirling_rows_sum_to_bell(self, n):
        assert sum(stirling2(n, c) for c in range(1, n + 1)) == bell(n)

    def test_stirling_examples(self):
        assert stirling2(4, 2) == 7
        assert stirling2(5, 3) == 25
        for n in range(1, 9):
            assert stirling2(n, 1) == 1
            assert stirling2(n, n) == 1

    def test_stirling_matches_brute_force(self):
        parts = brute_partitions(5)
        for c in range(1, 6):
            assert stirling2(5, c) == sum(len(p) == c for p in parts)

    @pytest.mark.parametrize("n, c", [(3, 0), (3, 4), (0, 1)])
    def test_stirling_rejects_bad_arguments(self, n, c):
        with pytest.raises(InvalidInputError):
            stirling2(n, c)


class TestCanonical:
    @pytest.mark.parametrize(
        "raw, expected",
        [([1, 1, 1], (1, 1, 1)), ([2, 2, 1], (1, 1, 2)), ([3, 1, 2, 3], (1, 2, 3, 1)), (["b", "a", "b"], (1, 2, 1))],
    )
    def test_examples(self, raw, expected):
        assert canonicalize(raw).labels == expected

    def test_empty_input(self):
        with pytest.raises(InvalidInputError):
            canonicalize([])

    def test_noncanonical_allocation_rejected(self):
        with pytest.raises(InvalidInputError):
            Allocation((2, 1))
        with pytest.raises(InvalidInputError):
            Allocation((1, 3))

    @given(st.lists(st.integers(0, 6), min_size=1, max_size=12))
    def test_idempotent(self, raw):
        a = canonicalize(raw)
        assert canonicalize(a.labels) == a
        assert is_canonical(a.labels)

    @given(st.lists(st.integers(0, 6), min_size=1, max_size=12), st.permutations(list(range(7))))
    def test_alphabet_permutation_invariance(self, raw, perm):
        assert canonicalize([perm[x] for x in raw]) == canonicalize(raw)

    @given(st.lists(st.integers(0, 5), min_size=1, max_size=10))
    def test_same_partition_pattern(self, raw):
        a = canonicalize(raw)
        n = len(raw)
        for i in range(n):
            for j in range(n):
                assert (raw[i] == raw[j]) == a.co_clustered(i, j)

    def test_derived_fields(self):
        a = Allocation((1, 2, 1, 3, 2))
        assert a.n == 5 and a.n_clusters == 3
        assert a.sizes == (2, 2, 1)
        assert a.blocks == [[0, 2], [1, 4], [3]]
        np.testing.assert_array_equal(a.as_array(), [0, 1, 0, 2, 1])
        assert str(a) == a.key == "12132"


class TestKeys:
    @given(st.lists(st.integers(0, 70), min_size=1, max_size=70))
    def test_round_trip(self, raw):
        a = canonicalize(raw)
        if a.n_clusters > 61:
            with pytest.raises(InvalidInputError):
                a.key
            return
        assert decode_key(a.key) == a.labels
        assert Allocation.from_key(a.key) == a
        assert key_from_array(a.as_array()) == a.key

    def test_key_order_is_label_order(self):
        labels = list(enumerate_partitions(6))
        keys = [a.key for a in labels]
        assert keys == sorted(keys)
        assert [a.labels for a in labels] == sorted(a.labels for a in labels)

    def test_wide_labels_sort_correctly(self):
        a = encode_key([1, 2, 3, 4, 5, 6, 7, 8, 9, 10])
        b = encode_key([1, 2, 3, 4, 5, 6, 7, 8, 9, 9])
        assert b < a

    def test_invalid_key(self):
        with pytest.raises(InvalidInputError):
            decode_key("1-2")


class TestEnumeration:
    def test_n1(self):
        assert [a.labels for a in enumerate_partitions(1)] == [(1,)]

    def test_n3_listing(self):
        got = [a.labels for a in enumerate_partitions(3)]
        assert got == [(1, 1, 1), (1, 1, 2), (1, 2, 1), (1, 2, 2), (1, 2, 3)]

    @pytest.mark.parametrize("n", range(1, 9))
    def test_distinct_canonical_and_complete(self, n):
        keys = [a.key for a in enumerate_partitions(n)]
        assert len(keys) == len(set(keys)) == bell(n)
        assert all(is_canonical(decode_key(k)) for k in keys)

    def test_n8_has_4140_states(self):
        assert len({a.key for a in enumerate_partitions(8)}) == 4140

    def test_matches_brute_force_partitions(self):
        got = {frozenset(frozenset(b) for b in a.blocks) for a in enumerate_partitions(5)}
        assert got == brute_partitions(5)

    def test_cap(self):
        with pytest.raises(ResourceLimitError):
            next(enumerate_partitions(16))
        with pytest.raises(ResourceLimitError):
            next(enumerate_partitions(9, cap=8))

    def test_partition_array(self):
        arr = partition_array(4)
        assert arr.shape == (15, 4)
        assert arr[0].tolist() == [0, 0, 0, 0]
        assert arr[-1].tolist() == [0, 1, 2, 3]

    @settings(max_examples=20)
    @given(st.integers(1, 7))
    def test_consecutive_states_increase(self, n):
        prev = None
        for a in enumerate_partitions(n):
            if prev is not None:
                assert a.labels > prev
            prev = a.labels
