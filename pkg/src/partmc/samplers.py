"""MCMC on allocations: random-scan Gibbs, conjugate split-merge, and the hybrid schedule.

The heavy lifting happens in compiled kernels (:mod:`partmc._kernels`); this
module prepares the per-chain context and converts kernel output into a
:class:`~partmc.trace.Trace`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .errors import InvalidInputError, ResourceLimitError
from .model import DataMatrix, HyperParams, block_terms
from .partitions import Allocation, canonicalize
from .trace import Trace

KERNELS = ("gibbs", "split_merge_hybrid")


class PosteriorContext:
    """Precomputed block terms plus a per-chain cluster-likelihood cache."""

    def __init__(self, data: DataMatrix, hyper: HyperParams):
        if data.n_obs > _kernels.MAX_KERNEL_N:
            raise ResourceLimitError(f"samplers support at most {_kernels.MAX_KERNEL_N} observations")
        terms = block_terms(data, hyper)
        self.n = data.n_obs
        self.args = (
            float(terms.const.sum()),
            np.ascontiguousarray(terms.inv_v),
            np.ascontiguousarray(terms.zw),
            float(terms.sigma2_theta),
            terms.log_p,
            terms.log_1mp,
            _kernels.new_cache(),
        )

    def state(self, alloc: Allocation):
        labels = alloc.as_array()
        masks = np.zeros(self.n, dtype=np.int64)
        sizes = np.zeros(self.n, dtype=np.int64)
        c = _kernels.canonical_state(labels, masks, sizes)
        return labels, masks, sizes, c

    def log_post(self, alloc: Allocation) -> float:
        labels, masks, sizes, c = self.state(alloc)
        return _kernels.log_post_state(masks, sizes, c, self.n, *self.args)


def _context(data, hyper, ctx):
    if ctx is None:
        return PosteriorContext(data, hyper)
    return ctx


def _check(alloc, n):
    alloc = alloc if isinstance(alloc, Allocation) else canonicalize(alloc)
    if alloc.n != n:
        raise InvalidInputError(f"allocation has {alloc.n} observations, data has {n}")
    return alloc


def gibbs_sweep(data: DataMatrix, hyper: HyperParams, alloc, rng: np.random.Generator,
                ctx: PosteriorContext | None = None) -> Allocation:
    """Update every observation once, in a fresh random order, from its full conditional."""
    ctx = _context(data, hyper, ctx)
    alloc = _check(alloc, ctx.n)
    labels, masks, sizes, c = ctx.state(alloc)
    _kernels.gibbs_sweep(labels, masks, sizes, c, *ctx.args, rng)
    return Allocation(tuple(int(x) + 1 for x in labels))


def split_merge_update(data: DataMatrix, hyper: HyperParams, alloc, rng: np.random.Generator,
                       restricted_scans: int = 5,
                       ctx: PosteriorContext | None = None) -> tuple[Allocation, bool]:
    """One split-merge Metropolis-Hastings update with restricted Gibbs launch scans."""
    ctx = _context(data, hyper, ctx)
    alloc = _check(alloc, ctx.n)
    if ctx.n < 2:
        raise InvalidInputError("split-merge needs at least two observations")
    labels, masks, sizes, c = ctx.state(alloc)
    _, accepted = _kernels.split_merge(labels, masks, sizes, c, restricted_scans, *ctx.args, rng)
    return Allocation(tuple(int(x) + 1 for x in labels)), bool(accepted)


@dataclass
class ChainConfig:
    kernel: str = "gibbs"
    n_iterations: int = 1000
    seed: int = 0
    gibbs_cycles_per_splitmerge: int = 5
    restricted_scan_count: int = 5
    initial_allocation: Allocation | None = None

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise InvalidInputError(f"unknown kernel {self.kernel!r}; choose from {KERNELS}")
        if self.n_iterations < 1 or self.gibbs_cycles_per_splitmerge < 1 or self.restricted_scan_count < 1:
            raise InvalidInputError("iteration and cycle counts must be at least 1")

    def as_meta(self) -> dict:
        out = asdict(self)
        init = self.initial_allocation
        out["initial_allocation"] = init.key if init is not None else None
        return out


def initial_allocation(n: int, how: str, seed: int = 0) -> Allocation:
    if how == "singletons":
        return Allocation(tuple(range(1, n + 1)))
    if how == "one-cluster":
        return Allocation((1,) * n)
    if how == "random":
        rng = np.random.default_rng(seed)
        return canonicalize(rng.integers(0, n, size=n))
    raise InvalidInputError(f"unknown initialization {how!r}")


def run_chain(data: DataMatrix, hyper: HyperParams, config: ChainConfig,
              ctx: PosteriorContext | None = None) -> Trace:
    """Run one chain and record its states.

    ``gibbs`` records one state per sweep. ``split_merge_hybrid`` records one
    state after the split-merge update and one after each following Gibbs
    sweep, so each iteration contributes ``1 + gibbs_cycles_per_splitmerge``
    states.
    """
    ctx = _context(data, hyper, ctx)
    init = config.initial_allocation or initial_allocation(ctx.n, "one-cluster")
    init = _check(init, ctx.n)
    rng = np.random.default_rng(config.seed)
    hybrid = config.kernel == "split_merge_hybrid"
    if hybrid and ctx.n < 2:
        raise InvalidInputError("split-merge needs at least two observations")
    states, lp, attempts, accepts = _kernels.run_chain(
        init.as_array(), config.n_iterations, hybrid, config.gibbs_cycles_per_splitmerge,
        config.restricted_scan_count, *ctx.args, rng,
    )
    return _to_trace(states, lp, {
        "config": config.as_meta(),
        "records_per_iteration": 1 + config.gibbs_cycles_per_splitmerge if hybrid else 1,
        "split_merge_attempts": int(attempts),
        "split_merge_accepts": int(accepts),
    })


def _to_trace(states: np.ndarray, lp: np.ndarray, meta: dict) -> Trace:
    from .partitions import key_from_array

    rows, first, index = np.unique(states, axis=0, return_index=True, return_inverse=True)
    keys = tuple(key_from_array(r) for r in rows)
    return Trace(keys, index.ravel(), lp[first], meta)
