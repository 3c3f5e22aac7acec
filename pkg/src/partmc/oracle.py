"""Brute-force ground truth for small problems.

Full posterior tables by enumeration, exact consensus matrices and top-K
schemes, and small Markov-chain fixtures with known stationary vectors,
including a two-island chain whose minor island is practically inescapable.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .consensus import ConsensusMatrix
from .diagnostics import PartitionScheme, rank_states
from .errors import InvalidInputError, ResourceLimitError
from .ioutil import atomic_write
from .model import DataMatrix, HyperParams, block_terms, cluster_mixture_term, log_prior, simulate_data
from .partitions import ENUMERATION_CAP, Allocation, bell, decode_key, enumerate_partitions
from .trace import Trace

log = logging.getLogger(__name__)

ORACLE_CAP = 10


def streaming_logsumexp(values) -> float:
    """Log-sum-exp accumulated one value at a time, in the order given."""
    top = -math.inf
    acc = 0.0
    for v in values:
        if v > top:
            acc = acc * math.exp(top - v) + 1.0 if top > -math.inf else 1.0
            top = v
        else:
            acc += math.exp(v - top)
    return top + math.log(acc)


@dataclass
class MassTable:
    keys: tuple[str, ...]
    log_mass: np.ndarray
    log_Z: float = field(default=float("nan"))

    def __post_init__(self):
        self.keys = tuple(self.keys)
        self.log_mass = np.asarray(self.log_mass, dtype=float)
        if math.isnan(self.log_Z):
            self.log_Z = streaming_logsumexp(self.log_mass.tolist())

    def probabilities(self) -> np.ndarray:
        return np.exp(self.log_mass - self.log_Z)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.keys, self.log_mass.tolist()))

    def labels(self) -> np.ndarray:
        return np.array([decode_key(k) for k in self.keys], dtype=np.int64)

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        """Indices into ``keys`` drawn from the normalized table."""
        p = self.probabilities()
        return rng.choice(len(p), size=size, p=p / p.sum())

    def save(self, path) -> None:
        lines = [f"# log_Z: {self.log_Z!r}", "state,log_mass"]
        lines.extend(f"{k},{v!r}" for k, v in zip(self.keys, self.log_mass.tolist()))
        atomic_write(Path(path), "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "MassTable":
        keys, vals, log_z = [], [], float("nan")
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line.startswith("# log_Z:"):
                    log_z = float(line.split(":", 1)[1])
                elif line and not line.startswith("#") and line != "state,log_mass":
                    k, v = line.split(",")
                    keys.append(k)
                    vals.append(float(v))
        return cls(tuple(keys), np.array(vals), log_z)


class _CachedPosterior:
    """log posterior of allocations with cluster factors memoized by member set."""

    def __init__(self, data: DataMatrix, hyper: HyperParams):
        self.terms = block_terms(data, hyper)
        self.const = float(self.terms.const.sum())
        self.cache: dict[tuple[int, ...], float] = {}

    def __call__(self, alloc: Allocation) -> float:
        total = self.const + log_prior(alloc)
        for members in alloc.blocks:
            key = tuple(members)
            term = self.cache.get(key)
            if term is None:
                term = self.cache[key] = cluster_mixture_term(self.terms, members)
            total += term
        return total


def exact_posterior_table(data: DataMatrix, hyper: HyperParams, cap: int = ORACLE_CAP,
                          allow_long: bool = False) -> MassTable:
    """Unnormalized log posterior of every allocation, in enumeration order."""
    n = data.n_obs
    if n > cap and not allow_long:
        raise ResourceLimitError(
            f"exact table for n={n} ({bell(n):,} states) exceeds the oracle cap {cap}; pass allow_long"
        )
    post = _CachedPosterior(data, hyper)
    keys, vals = [], []
    for count, alloc in enumerate(enumerate_partitions(n, cap=ENUMERATION_CAP), 1):
        keys.append(alloc.key)
        vals.append(post(alloc))
        if count % 1_000_000 == 0:
            log.info("enumerated %s of %s allocations", f"{count:,}", f"{bell(n):,}")
    return MassTable(tuple(keys), np.array(vals), streaming_logsumexp(vals))


def stream_posterior_summary(data: DataMatrix, hyper: HyperParams, top_k: int = 10,
                             checkpoint: str | Path | None = None, checkpoint_every: int = 5_000_000) -> dict:
    """log Z, exact consensus matrix and top-K states without materializing the table.

    Meant for n = 14 (190,899,322 allocations). With ``checkpoint`` the running
    accumulators are saved periodically and a rerun resumes after the last
    saved position of the deterministic enumeration order.
    """
    n = data.n_obs
    post = _CachedPosterior(data, hyper)
    state = {"done": 0, "top": -math.inf, "acc": 0.0, "co": np.zeros((n, n)).tolist(), "best": []}
    if checkpoint and Path(checkpoint).exists():
        state = json.loads(Path(checkpoint).read_text())
        log.info("resuming after %s allocations", f"{state['done']:,}")
    top, acc = state["top"], state["acc"]
    co = np.array(state["co"])
    best = [tuple(b) for b in state["best"]]  # (log mass, key)
    total = bell(n)
    for count, alloc in enumerate(enumerate_partitions(n, cap=ENUMERATION_CAP), 1):
        if count <= state["done"]:
            continue
        v = post(alloc)
        if v > top:
            scale = math.exp(top - v) if top > -math.inf else 0.0
            acc = acc * scale + 1.0
            co *= scale
            top = v
            w = 1.0
        else:
            w = math.exp(v - top)
            acc += w
        lab = np.asarray(alloc.labels)
        co += w * (lab[:, None] == lab[None, :])
        if len(best) < top_k or (v, alloc.key) > min(best):
            best.append((v, alloc.key))
            best = sorted(best, key=lambda b: (-b[0], b[1]))[:top_k]
        if count % 1_000_000 == 0:
            log.info("enumerated %s of %s allocations", f"{count:,}", f"{total:,}")
        if checkpoint and count % checkpoint_every == 0:
            atomic_write(Path(checkpoint), json.dumps(
                {"done": count, "top": top, "acc": acc, "co": co.tolist(), "best": best}))
    log_z = top + math.log(acc)
    return {
        "log_Z": log_z,
        "consensus": ConsensusMatrix(co / acc, data.ids),
        "top": [(k, v, math.exp(v - log_z)) for v, k in best],
    }


def exact_consensus(table: MassTable, ids=None) -> ConsensusMatrix:
    prob = table.probabilities()
    labels = table.labels()
    n = labels.shape[1]
    rho = np.zeros((n, n))
    for i in range(n):
        rho[i] = prob @ (labels == labels[:, [i]])
    return ConsensusMatrix(rho, ids)


def exact_top_k(table: MassTable, K: int) -> list[str]:
    return [table.keys[k] for k in rank_states(table.keys, table.log_mass)[:K]]


def exact_top_k_scheme(table: MassTable, K: int) -> PartitionScheme:
    """Singleton sets on the K states of highest exact mass."""
    order = rank_states(table.keys, table.log_mass)[:K]
    return PartitionScheme(tuple((table.keys[k],) for k in order), table.log_mass[order].copy())


# --- synthetic benchmark data ---------------------------------------------

BENCH_HYPER = HyperParams(mu=0.0, sigma2=0.16, sigma2_eta=0.37, sigma2_theta=2.0, p=0.2)


def benchmark_allocation(n: int) -> Allocation:
    """Roughly three equal consecutive blocks (fewer for tiny n)."""
    c = min(3, n)
    return Allocation(tuple(1 + (i * c) // n for i in range(n)))


def benchmark_dataset(n: int, n_vars: int = 10, replicates: int = 2, seed: int = 0,
                      hyper: HyperParams = BENCH_HYPER) -> DataMatrix:
    return simulate_data(hyper, benchmark_allocation(n), n_vars, replicates, seed)


# --- Markov-chain fixtures ------------------------------------------------

def stationary_distribution(P: np.ndarray, method: str = "gth") -> np.ndarray:
    """Stationary vector of an irreducible transition matrix, normalized to sum 1.

    ``gth`` is Grassmann-Taksar-Heyman state reduction: it uses off-diagonal
    entries only and never subtracts, so it stays entrywise accurate for
    nearly decomposable chains. ``eig`` takes the left eigenvector for the
    eigenvalue closest to 1; its error grows like machine epsilon over the
    spectral gap.
    """
    P = np.array(P, dtype=float)
    m = P.shape[0]
    if method == "eig":
        vals, vecs = np.linalg.eig(P.T)
        k = int(np.argmin(np.abs(vals - 1.0)))
        v = np.real(vecs[:, k])
        return v / v.sum()
    if method != "gth":
        raise InvalidInputError(f"unknown method {method!r}")
    for k in range(m - 1, 0, -1):
        out = P[k, :k].sum()
        P[:k, k] /= out
        P[:k, :k] += np.outer(P[:k, k], P[k, :k])
    pi = np.zeros(m)
    pi[0] = 1.0
    for k in range(1, m):
        pi[k] = pi[:k] @ P[:k, k]
    return pi / pi.sum()


@dataclass
class ChainFixture:
    states: tuple[str, ...]
    P: np.ndarray
    pi: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = tuple(self.states)
        self.P = np.asarray(self.P, dtype=float)
        self.pi = np.asarray(self.pi, dtype=float)
        m = len(self.states)
        if self.P.shape != (m, m) or self.pi.shape != (m,):
            raise InvalidInputError("fixture shapes do not match the state list")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=1) - 1.0)) > 1e-12:
            raise InvalidInputError("transition rows must be non-negative and sum to 1")
        if np.any(self.pi <= 0) or np.max(np.abs(self.pi @ self.P - self.pi)) > 1e-10:
            raise InvalidInputError("pi is not a positive stationary vector of P")

    def index_of(self, state) -> int:
        return state if isinstance(state, (int, np.integer)) else self.states.index(state)

    def to_csv(self, path) -> None:
        lines = [",".join(["from", *self.states, "pi"])]
        for s, row, p in zip(self.states, self.P, self.pi):
            lines.append(",".join([s, *(repr(float(v)) for v in row), repr(float(p))]))
        atomic_write(Path(path), "\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "ChainFixture":
        with open(path) as fh:
            rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
        states = tuple(rows[0][1:-1])
        P = np.array([[float(v) for v in r[1:-1]] for r in rows[1:]])
        pi = np.array([float(r[-1]) for r in rows[1:]])
        return cls(states, P, pi)


def _lazy_metropolis(pi: np.ndarray) -> np.ndarray:
    """Reversible kernel: uniform proposals, Metropolis acceptance, holding prob >= 1/2."""
    m = len(pi)
    P = np.zeros((m, m))
    if m > 1:
        ratio = np.minimum(1.0, pi[None, :] / pi[:, None])
        P = 0.5 * ratio / (m - 1)
        np.fill_diagonal(P, 0.0)
    np.fill_diagonal(P, 1.0 - P.sum(axis=1))
    return P


def metropolis_fixture(states: Sequence[str], weights) -> ChainFixture:
    """Well-mixed reversible chain on ``states`` with stationary vector ∝ ``weights``."""
    pi = np.asarray(weights, dtype=float)
    pi = pi / pi.sum()
    return ChainFixture(tuple(states), _lazy_metropolis(pi), pi)


MINOR_ISLAND = ("1122", "1212", "1221")


def two_island_masses(epsilon: float) -> tuple[tuple[str, ...], np.ndarray, np.ndarray]:
    """States (partitions of 4 items), stationary masses and minor-island flags.

    The minor island holds the three two-plus-two splits with total mass
    epsilon. The major island is dominated by the one-cluster allocation; its
    other states are light enough that the minor states rank 2nd to 4th.
    """
    states = tuple(a.key for a in enumerate_partitions(4))
    minor = np.array([s in MINOR_ISLAND for s in states])
    pi = np.zeros(len(states))
    pi[minor] = epsilon * np.array([0.5, 0.3, 0.2])
    major_idx = np.flatnonzero(~minor)
    w = np.array([0.995] + [0.005 * 0.9 ** k for k in range(len(major_idx) - 1)])
    w[1:] *= 0.005 / w[1:].sum()
    pi[major_idx] = (1.0 - epsilon) * w
    return states, pi, minor


def adversarial_two_island_fixture(epsilon: float = 0.01, escape_prob: float = 1e-8) -> ChainFixture:
    """Two well-mixed islands joined by a tiny reversible bridge.

    From any minor-island state the chain leaves the island with probability
    ``escape_prob`` per step, so the expected first escape time is
    ``1 / escape_prob`` steps.
    """
    if not (0.0 < epsilon < 0.5):
        raise InvalidInputError("epsilon must lie in (0, 0.5)")
    states, pi, minor = two_island_masses(epsilon)
    P = np.zeros((len(states), len(states)))
    for island in (minor, ~minor):
        idx = np.flatnonzero(island)
        sub = pi[idx] / pi[idx].sum()
        P[np.ix_(idx, idx)] = _lazy_metropolis(sub)
    # cross moves i -> j with probability kappa * pi_j satisfy detailed balance
    kappa = escape_prob / (1.0 - epsilon)
    cross = kappa * np.outer(np.ones(len(states)), pi)
    cross[np.ix_(minor, minor)] = 0.0
    cross[np.ix_(~minor, ~minor)] = 0.0
    P += cross
    np.fill_diagonal(P, 0.0)
    np.fill_diagonal(P, 1.0 - P.sum(axis=1))
    return ChainFixture(states, P, pi, {"minor": [s for s, f in zip(states, minor) if f],
                                        "epsilon": epsilon, "escape_prob": escape_prob})


def simulate_fixture_chain(fixture: ChainFixture, n: int, start, seed: int) -> Trace:
    """Exact simulation of ``n`` recorded steps; the first recorded state is ``start``."""
    cum = np.cumsum(fixture.P, axis=1)
    cum[:, -1] = 1.0
    rng = np.random.default_rng(seed)
    path = _kernels.simulate_markov(cum, fixture.index_of(start), n, rng)
    used, index = np.unique(path, return_inverse=True)
    keys = tuple(fixture.states[k] for k in used)
    if list(keys) != sorted(keys):
        order = np.argsort(keys)
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        keys = tuple(keys[k] for k in order)
        index = rank[index]
        used = used[order]
    return Trace(keys, index.ravel(), np.log(fixture.pi[used]), {"fixture": fixture.info, "seed": seed})


def fixture_table(fixture: ChainFixture) -> MassTable:
    return MassTable(fixture.states, np.log(fixture.pi))
