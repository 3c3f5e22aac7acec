"""Set partitions of N observations: canonical labels, keys, enumeration, counting.

An allocation is stored as a tuple of 1-based cluster labels in restricted-growth
form: the first observation is in cluster 1, and each later observation either
joins an earlier cluster or opens cluster ``max(previous) + 1``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np

from .errors import InvalidInputError, ResourceLimitError

log = logging.getLogger(__name__)

#: Default ceiling for full enumeration; bell(15) is about 1.4e9.
ENUMERATION_CAP = 15
#: Enumerations at or above this size are logged as long-running.
LONG_RUNNING_N = 13

# Label l is written as _ALPHABET[l - 1]; ASCII order keeps key order equal to
# lexicographic order on the label sequences.
_ALPHABET = "123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz"
_DECODE = {ch: i + 1 for i, ch in enumerate(_ALPHABET)}
MAX_KEY_LABEL = len(_ALPHABET)


@dataclass(frozen=True)
class Allocation:
    """Canonically labelled assignment of N observations to clusters."""

    labels: tuple[int, ...]

    def __post_init__(self):
        if not is_canonical(self.labels):
            raise InvalidInputError(f"labels {self.labels!r} are not in canonical form")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def n_clusters(self) -> int:
        return max(self.labels)

    @property
    def sizes(self) -> tuple[int, ...]:
        counts = [0] * self.n_clusters
        for lab in self.labels:
            counts[lab - 1] += 1
        return tuple(counts)

    @property
    def blocks(self) -> list[list[int]]:
        """Member indices (0-based) of each cluster, ordered by label."""
        out: list[list[int]] = [[] for _ in range(self.n_clusters)]
        for i, lab in enumerate(self.labels):
            out[lab - 1].append(i)
        return out

    @property
    def key(self) -> str:
        return encode_key(self.labels)

    def co_clustered(self, i: int, j: int) -> bool:
        return self.labels[i] == self.labels[j]

    def as_array(self) -> np.ndarray:
        """0-based labels as an int64 array."""
        return np.asarray(self.labels, dtype=np.int64) - 1

    @classmethod
    def from_key(cls, key: str) -> "Allocation":
        return cls(decode_key(key))

    def __len__(self):
        return len(self.labels)

    def __str__(self):
        return self.key


def is_canonical(labels: Sequence[int]) -> bool:
    top = 0
    for lab in labels:
        if lab < 1 or lab > top + 1:
            return False
        top = max(top, lab)
    return len(labels) > 0


def canonicalize(raw_labels: Sequence) -> Allocation:
    """Relabel clusters by order of first appearance.

    Any hashable label values are accepted; only the induced partition matters.

    >>> canonicalize([3, 1, 2, 3]).labels
    (1, 2, 3, 1)
    """
    if len(raw_labels) == 0:
        raise InvalidInputError("cannot canonicalize an empty label vector")
    seen: dict = {}
    out = []
    for lab in raw_labels:
        lab = lab.item() if isinstance(lab, np.generic) else lab
        if lab not in seen:
            seen[lab] = len(seen) + 1
        out.append(seen[lab])
    return Allocation(tuple(out))


def encode_key(labels: Sequence[int]) -> str:
    try:
        return "".join(_ALPHABET[lab - 1] for lab in labels)
    except IndexError:
        raise InvalidInputError(
            f"state keys support at most {MAX_KEY_LABEL} clusters"
        ) from None


def decode_key(key: str) -> tuple[int, ...]:
    try:
        return tuple(_DECODE[ch] for ch in key)
    except KeyError as exc:
        raise InvalidInputError(f"invalid state key {key!r}") from exc


def key_from_array(labels0: np.ndarray) -> str:
    """Key for a canonical 0-based label array."""
    return "".join(_ALPHABET[int(lab)] for lab in labels0)


def enumerate_partitions(n: int, cap: int = ENUMERATION_CAP) -> Iterator[Allocation]:
    """Yield every set partition of ``n`` items once, lexicographic in label order."""
    if n < 1:
        raise InvalidInputError("n must be at least 1")
    if n > cap:
        raise ResourceLimitError(
            f"enumerating bell({n}) = {bell(n):,} partitions exceeds the cap n <= {cap}"
        )
    if n >= LONG_RUNNING_N:
        log.warning("enumerating %s partitions of n=%d; this is long-running", f"{bell(n):,}", n)

    labels = [1] * n
    # running maxima: prefix_max[t] = max(labels[:t + 1])
    prefix_max = [1] * n
    while True:
        yield Allocation(tuple(labels))
        # rightmost position that can still be incremented
        t = n - 1
        while t > 0 and labels[t] > prefix_max[t - 1]:
            t -= 1
        if t == 0:
            return
        labels[t] += 1
        prefix_max[t] = max(prefix_max[t - 1], labels[t])
        for u in range(t + 1, n):
            labels[u] = 1
            prefix_max[u] = prefix_max[t]


def partition_array(n: int, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """All partitions of ``n`` as a ``(bell(n), n)`` array of 0-based labels."""
    out = np.empty((bell(n), n), dtype=np.int8)
    for row, alloc in enumerate(enumerate_partitions(n, cap=cap)):
        out[row] = alloc.labels
    out -= 1
    return out


@lru_cache(maxsize=None)
def _bell_row(n: int) -> tuple[int, ...]:
    # Bell triangle; the first entry of row n is bell(n).
    if n == 0:
        return (1,)
    prev = _bell_row(n - 1)
    row = [prev[-1]]
    for v in prev:
        row.append(row[-1] + v)
    return tuple(row)


def bell(n: int) -> int:
    """Number of set partitions of ``n`` items, as an exact integer."""
    if n < 0:
        raise InvalidInputError("bell(n) needs n >= 0")
    return _bell_row(n)[0]


def stirling2(n: int, c: int) -> int:
    """Stirling number of the second kind: partitions of n items into exactly c blocks."""
    if c < 1 or c > n:
        raise InvalidInputError(f"stirling2 needs 1 <= c <= n, got n={n}, c={c}")
    row = [1] + [0] * c  # S(0, k)
    for m in range(1, n + 1):
        for k in range(min(m, c), 0, -1):
            row[k] = k * row[k] + row[k - 1]
        row[0] = 0
    return row[c]
