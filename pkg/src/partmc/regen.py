"""Regeneration tours of a discrete-state trace and the regenerative-sampling estimators.

Every estimator here uses the complete-tours window: recorded steps
``tau_0 .. tau_R - 1`` (1-based), i.e. from the first visit to the return
state up to, but excluding, its last visit. Anything recorded before the first
visit is discarded.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from .errors import InsufficientRegenerationError, InvalidInputError
from .ioutil import atomic_write
from .trace import Trace


@dataclass(frozen=True)
class Tours:
    delta: str
    tau: np.ndarray  # 1-based visit times tau_0 < ... < tau_R

    @property
    def R(self) -> int:
        return len(self.tau) - 1

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.tau)

    @property
    def mean_length(self) -> float:
        return float(self.lengths.mean())

    @property
    def window(self) -> slice:
        """0-based slice of recorded steps covered by complete tours."""
        return slice(int(self.tau[0]) - 1, int(self.tau[-1]) - 1)

    def to_csv(self, path) -> None:
        lines = ["r,tau_r,N_r"]
        lines.append(f"0,{self.tau[0]},")
        lines.extend(f"{r},{t},{n}" for r, (t, n) in enumerate(zip(self.tau[1:], self.lengths), 1))
        atomic_write(Path(path), "\n".join(lines) + "\n")


def choose_delta(trace: Trace) -> str:
    """Most frequently visited state; ties go to the smallest key."""
    counts = trace.visit_counts()
    # keys are sorted, and argmax returns the first maximum
    return trace.keys[int(np.argmax(counts))]


def find_tours(trace: Trace, delta: str | None = None) -> Tours:
    if delta is None:
        delta = choose_delta(trace)
    try:
        k = trace.keys.index(delta)
    except ValueError:
        k = -1
    tau = np.flatnonzero(trace.index == k) + 1 if k >= 0 else np.array([], dtype=np.int64)
    if len(tau) < 2:
        raise InsufficientRegenerationError(
            f"return state {delta!r} visited {len(tau)} time(s); at least 2 visits are needed"
        )
    return Tours(delta=delta, tau=tau)


class GSpec:
    """A vector-valued function of the state, ``key -> R^K``.

    ``fn`` maps a list of state keys to an array of shape ``(len(keys), K)``.
    Evaluation happens once per distinct state, never per recorded step.
    """

    def __init__(self, fn: Callable[[Sequence[str]], np.ndarray], k: int, names=None):
        self.fn = fn
        self.k = k
        self.names = list(names) if names is not None else [f"g{i + 1}" for i in range(k)]

    def values(self, keys: Sequence[str]) -> np.ndarray:
        out = np.asarray(self.fn(list(keys)), dtype=float).reshape(len(keys), self.k)
        if not np.all(np.isfinite(out)):
            raise InvalidInputError("g produced non-finite values")
        return out

    @classmethod
    def scalar(cls, fn: Callable[[str], float], name="g") -> "GSpec":
        return cls(lambda keys: np.array([[fn(key)] for key in keys]), 1, [name])

    @classmethod
    def indicators(cls, sets: Sequence[Sequence[str]], weights=None) -> "GSpec":
        """``g_i(x) = weights[i] * 1(x in sets[i])``."""
        sets = [tuple(s) for s in sets]
        w = np.ones(len(sets)) if weights is None else np.asarray(weights, dtype=float)

        def fn(keys):
            row_of = {key: r for r, key in enumerate(keys)}
            out = np.zeros((len(keys), len(sets)))
            for i, members in enumerate(sets):
                for key in members:
                    r = row_of.get(key)
                    if r is not None:
                        out[r, i] = w[i]
            return out

        return cls(fn, len(sets))

    def linear(self, a) -> "GSpec":
        """The scalar function ``a' g(x)``."""
        a = np.asarray(a, dtype=float)
        return GSpec(lambda keys: self.values(keys) @ a, 1)


def tour_sums(trace: Trace, tours: Tours, g: GSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-tour sums ``s_r`` (R x K) and tour lengths ``N_r``."""
    lengths = tours.lengths
    steps = trace.index[tours.window]
    tour_id = np.repeat(np.arange(tours.R), lengths)
    counts = sparse.csr_matrix(
        (np.ones(len(steps)), (tour_id, steps)), shape=(tours.R, len(trace.keys))
    )
    values = g.values(trace.keys)
    return np.asarray(counts @ values), lengths


def rs_mean(trace: Trace, tours: Tours, g: GSpec) -> np.ndarray:
    s, lengths = tour_sums(trace, tours, g)
    return _column_sums(s) / float(lengths.sum())


_BLOCK = 256


def _column_sums(x: np.ndarray) -> np.ndarray:
    # numpy sums pairwise only along a contiguous axis
    return np.ascontiguousarray(x.T).sum(axis=1)


def _gram(dev: np.ndarray) -> np.ndarray:
    """``dev' dev`` from short BLAS blocks whose partial sums are added pairwise.

    One long matrix product accumulates rounding error in proportion to the
    number of tours; blocking keeps the error near machine precision.
    """
    r, k = dev.shape
    n_blocks = -(-r // _BLOCK)
    partial = np.empty((n_blocks, k, k))
    for b in range(n_blocks):
        blk = dev[b * _BLOCK:(b + 1) * _BLOCK]
        partial[b] = blk.T @ blk
    return np.ascontiguousarray(partial.transpose(1, 2, 0)).sum(axis=2)


def _cov_from_sums(s: np.ndarray, lengths: np.ndarray, diagonal_only=False):
    r = len(lengths)
    total = float(_column_sums(lengths[:, None].astype(float))[0])
    gbar = _column_sums(s) / total
    # second pass on the centred tour sums
    dev = s - lengths[:, None] * gbar[None, :]
    scale = r * (total / r) ** 2
    if diagonal_only:
        return gbar, _column_sums(dev * dev) / scale
    return gbar, _gram(dev) / scale


def rs_estimate(trace: Trace, tours: Tours, g: GSpec) -> tuple[np.ndarray, np.ndarray]:
    """RS mean and the regenerative covariance estimate, from a single pass over tours."""
    if tours.R < 2:
        raise InsufficientRegenerationError(f"covariance needs R >= 2 tours, got {tours.R}")
    s, lengths = tour_sums(trace, tours, g)
    gbar, cov = _cov_from_sums(s, lengths)
    return gbar, 0.5 * (cov + cov.T)


def rs_cov(trace: Trace, tours: Tours, g: GSpec) -> np.ndarray:
    """Estimate of the limiting covariance of ``sqrt(R) * (gbar - E g)``."""
    return rs_estimate(trace, tours, g)[1]


def rs_variances(trace: Trace, tours: Tours, g: GSpec) -> tuple[np.ndarray, np.ndarray]:
    """RS mean and the diagonal of the covariance estimate; O(R K) memory."""
    if tours.R < 2:
        raise InsufficientRegenerationError(f"variance needs R >= 2 tours, got {tours.R}")
    s, lengths = tour_sums(trace, tours, g)
    return _cov_from_sums(s, lengths, diagonal_only=True)
