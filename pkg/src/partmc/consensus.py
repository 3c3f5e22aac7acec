"""Consensus-clustering summaries: co-occurrence matrix, MAP allocation, cumulative mass."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidInputError
from .ioutil import atomic_write
from .partitions import Allocation, decode_key
from .regen import GSpec, Tours, rs_variances
from .trace import Trace


def all_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def cocluster_gspec(pairs: Sequence[tuple[int, int]]) -> GSpec:
    """Indicators that observations i and j share a cluster, one per pair."""
    pairs = list(pairs)
    ii = np.array([p[0] for p in pairs], dtype=np.int64)
    jj = np.array([p[1] for p in pairs], dtype=np.int64)

    def fn(keys):
        labels = np.array([decode_key(k) for k in keys], dtype=np.int64)
        return (labels[:, ii] == labels[:, jj]).astype(float)

    return GSpec(fn, len(pairs), [f"rho_{i}_{j}" for i, j in pairs])


@dataclass
class ConsensusMatrix:
    rho: np.ndarray
    ids: tuple[str, ...] | None = None

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        n = self.rho.shape[0]
        if self.rho.shape != (n, n):
            raise InvalidInputError("consensus matrix must be square")
        if self.ids is None:
            self.ids = tuple(f"obs{i + 1}" for i in range(n))

    def pairs(self, rho_min: float = 0.0) -> list[tuple[str, str, float]]:
        n = self.rho.shape[0]
        return [(self.ids[i], self.ids[j], float(self.rho[i, j]))
                for i, j in all_pairs(n) if self.rho[i, j] > rho_min]

    def to_csv(self, path) -> None:
        lines = [",".join(["id", *self.ids])]
        for name, row in zip(self.ids, self.rho):
            lines.append(",".join([name, *(repr(float(v)) for v in row)]))
        atomic_write(Path(path), "\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "ConsensusMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        ids = tuple(rows[0][1:])
        rho = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(rho, ids)


def _square(n: int, pairs, values, diag: float) -> np.ndarray:
    out = np.full((n, n), diag)
    for (i, j), v in zip(pairs, values):
        out[i, j] = out[j, i] = v
    return out


def co_occurrence_rs(trace: Trace, tours: Tours, ids=None) -> tuple[ConsensusMatrix, np.ndarray]:
    """RS estimate of the co-occurrence matrix and its entrywise standard errors."""
    n = len(trace.keys[0])
    pairs = all_pairs(n)
    if not pairs:
        return ConsensusMatrix(np.ones((1, 1)), ids), np.zeros((1, 1))
    rho, var = rs_variances(trace, tours, cocluster_gspec(pairs))
    se = np.sqrt(np.clip(var, 0.0, None) / tours.R)
    return ConsensusMatrix(_square(n, pairs, rho, 1.0), ids), _square(n, pairs, se, 0.0)


def map_allocation(trace: Trace) -> tuple[Allocation, float]:
    """Visited state of highest cached log posterior; ties go to the smallest key."""
    if len(trace) == 0:
        raise InvalidInputError("empty trace")
    visited = np.flatnonzero(trace.visit_counts() > 0)
    best = min(visited, key=lambda k: (-trace.log_post[k], trace.keys[k]))
    return Allocation.from_key(trace.keys[best]), float(trace.log_post[best])


def cumulative_mass_curve(table) -> list[tuple[int, float]]:
    """(rank, cumulative probability) with states sorted by decreasing mass.

    ``table`` is a :class:`~partmc.oracle.MassTable`, a trace (visited states,
    cached log posteriors), or a mapping of key to log mass.
    """
    if isinstance(table, Mapping):
        keys, log_mass = list(table), np.array(list(table.values()), dtype=float)
    elif isinstance(table, Trace):
        visited = np.flatnonzero(table.visit_counts() > 0)
        keys, log_mass = [table.keys[k] for k in visited], table.log_post[visited]
    else:
        keys, log_mass = list(table.keys), np.asarray(table.log_mass)
    if len(keys) == 0:
        raise InvalidInputError("empty mass table")
    order = sorted(range(len(keys)), key=lambda k: (-log_mass[k], keys[k]))
    top = log_mass.max()
    mass = np.exp(log_mass[order] - top)
    cum = np.cumsum(mass) / mass.sum()
    return [(r + 1, float(c)) for r, c in enumerate(cum)]


def mass_from_log(log_mass: np.ndarray) -> np.ndarray:
    top = np.max(log_mass)
    w = np.exp(np.asarray(log_mass) - top)
    return w / w.sum()


__all__ = [
    "ConsensusMatrix", "all_pairs", "co_occurrence_rs", "cocluster_gspec",
    "cumulative_mass_curve", "map_allocation", "mass_from_log",
]
