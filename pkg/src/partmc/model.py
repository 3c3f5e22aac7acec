"""Spike-slab hierarchical clustering model.

For variable v and cluster c the replicates of observation i are

    y[v, c, i, r] ~ N(mu + gamma[v, c] * theta[v, c] + eta[v, c, i], sigma2)
    gamma ~ Bernoulli(p),  theta ~ N(0, sigma2_theta),  eta ~ N(0, sigma2_eta)

and every latent variable is integrated out in closed form. Within one
(variable, cluster) block the replicate vector is a two-component mixture
(over gamma) of normals with compound-symmetry covariance. All arithmetic is
done on the log scale.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize
from scipy.special import expit, logit, gammaln

from .errors import InvalidHyperparameterError, InvalidInputError, OptimizationFailure
from .partitions import Allocation, canonicalize

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

P_GUARD = 1e-6
VAR_GUARD = 1e-10
# log-likelihood gain below which the spike-slab component counts as absent
NULL_RIDGE_TOL = 1e-6
HYPER_NAMES = ("mu", "sigma2", "sigma2_eta", "sigma2_theta", "p")


@dataclass(frozen=True)
class HyperParams:
    mu: float
    sigma2: float
    sigma2_eta: float
    sigma2_theta: float
    p: float

    def __post_init__(self):
        for name in ("sigma2", "sigma2_eta", "sigma2_theta"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise InvalidHyperparameterError(f"{name} must be positive, got {value!r}")
        if not (0.0 < self.p < 1.0):
            raise InvalidHyperparameterError(f"p must lie in (0, 1), got {self.p!r}")
        if not np.isfinite(self.mu):
            raise InvalidHyperparameterError(f"mu must be finite, got {self.mu!r}")

    def as_dict(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in HYPER_NAMES}

    # Unconstrained coordinates used by the optimizer:
    # (mu, log sigma2, log sigma2_eta, log sigma2_theta, logit p).
    def to_unconstrained(self) -> np.ndarray:
        return np.array([
            self.mu,
            math.log(self.sigma2),
            math.log(self.sigma2_eta),
            math.log(self.sigma2_theta),
            float(logit(self.p)),
        ])

    @classmethod
    def from_unconstrained(cls, x) -> "HyperParams":
        return cls(
            mu=float(x[0]),
            sigma2=float(np.exp(x[1])),
            sigma2_eta=float(np.exp(x[2])),
            sigma2_theta=float(np.exp(x[3])),
            p=float(expit(x[4])),
        )


@dataclass(frozen=True)
class DataMatrix:
    """Replicate measurements, one row per replicate and one column per variable.

    ``unit[k]`` is the 0-based observation that row ``k`` belongs to.
    """

    values: np.ndarray
    unit: np.ndarray
    ids: tuple[str, ...]
    variables: tuple[str, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        unit = np.array(self.unit, dtype=np.int64)
        if values.ndim != 2 or values.shape[1] < 1:
            raise InvalidInputError("data needs a 2-d array with at least one variable")
        if unit.shape != (values.shape[0],):
            raise InvalidInputError("unit must give one observation index per row")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("data contains missing or non-finite values")
        n = len(self.ids)
        if n < 1 or unit.min(initial=0) < 0 or unit.max(initial=-1) >= n:
            raise InvalidInputError("observation indices out of range")
        counts = np.bincount(unit, minlength=n)
        if np.any(counts < 1):
            missing = [self.ids[i] for i in np.flatnonzero(counts < 1)]
            raise InvalidInputError(f"observations without replicates: {missing}")
        if len(self.variables) != values.shape[1]:
            raise InvalidInputError("variable names do not match the number of columns")
        values.setflags(write=False)
        unit.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "unit", unit)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "variables", tuple(self.variables))

    @property
    def n_obs(self) -> int:
        return len(self.ids)

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]

    @property
    def replicates(self) -> np.ndarray:
        return np.bincount(self.unit, minlength=self.n_obs)

    def suff_stats(self):
        """Per-observation replicate counts, means and within sums of squares.

        Returns ``(counts (N,), means (N, V), within (N, V))``; two-pass.
        """
        counts = self.replicates
        sums = np.zeros((self.n_obs, self.n_vars))
        np.add.at(sums, self.unit, self.values)
        means = sums / counts[:, None]
        dev = self.values - means[self.unit]
        within = np.zeros_like(sums)
        np.add.at(within, self.unit, dev * dev)
        return counts, means, within


@dataclass(frozen=True)
class BlockTerms:
    """Allocation-independent pieces of the marginal likelihood.

    ``const[i]`` collects every term that does not depend on the clustering;
    ``inv_v[i] = 1 / (sigma2_eta + sigma2 / R_i)`` and ``zw[i, v]`` is the
    centred observation mean divided by that variance. A cluster's
    contribution then depends only on sums of ``inv_v`` and ``zw`` over its
    members.
    """

    const: np.ndarray
    inv_v: np.ndarray
    zw: np.ndarray
    sigma2_theta: float
    log_p: float
    log_1mp: float


def block_terms(data: DataMatrix, hyper: HyperParams) -> BlockTerms:
    counts, means, within = data.suff_stats()
    r = counts.astype(float)
    s2 = hyper.sigma2
    var_mean = hyper.sigma2_eta + s2 / r  # variance of an observation mean given theta
    z = means - hyper.mu
    per_cell = (
        -0.5 * (r[:, None] - 1.0) * (LOG_2PI + math.log(s2))
        - 0.5 * np.log(r)[:, None]
        - within / (2.0 * s2)
        - 0.5 * (LOG_2PI + np.log(var_mean))[:, None]
        - z * z / (2.0 * var_mean[:, None])
    )
    return BlockTerms(
        const=per_cell.sum(axis=1),
        inv_v=1.0 / var_mean,
        zw=z / var_mean[:, None],
        sigma2_theta=hyper.sigma2_theta,
        log_p=math.log(hyper.p),
        log_1mp=math.log1p(-hyper.p),
    )


def cluster_mixture_term(terms: BlockTerms, members: Sequence[int]) -> float:
    """Log of the gamma-mixture factor of one cluster, summed over variables."""
    members = list(members)
    a = terms.inv_v[members].sum()
    b = terms.zw[members].sum(axis=0)
    st = terms.sigma2_theta
    shrink = 1.0 + st * a
    # log N(z | slab) - log N(z | no slab), per variable
    d = -0.5 * math.log(shrink) + st * b * b / (2.0 * shrink)
    return float(np.logaddexp(terms.log_p + d, terms.log_1mp).sum())


def log_prior(alloc: Allocation) -> float:
    """log of (C-1)! N_1! ... N_C! / (N (N+C-1)!): uniform on C, uniform
    multinomial-Dirichlet on the cluster sizes."""
    n = alloc.n
    c = alloc.n_clusters
    sizes = np.asarray(alloc.sizes, dtype=float)
    return float(gammaln(c) + gammaln(sizes + 1.0).sum() - math.log(n) - gammaln(n + c))


def _as_allocation(alloc) -> Allocation:
    return alloc if isinstance(alloc, Allocation) else canonicalize(alloc)


def log_marglik(data: DataMatrix, alloc, hyper: HyperParams, terms: BlockTerms | None = None) -> float:
    alloc = _as_allocation(alloc)
    if alloc.n != data.n_obs:
        raise InvalidInputError(f"allocation covers {alloc.n} observations, data has {data.n_obs}")
    if terms is None:
        terms = block_terms(data, hyper)
    total = float(terms.const.sum())
    for members in alloc.blocks:
        total += cluster_mixture_term(terms, members)
    return total


def log_posterior_unnorm(data: DataMatrix, alloc, hyper: HyperParams, terms: BlockTerms | None = None) -> float:
    alloc = _as_allocation(alloc)
    return log_prior(alloc) + log_marglik(data, alloc, hyper, terms)


# --- empirical Bayes -------------------------------------------------------

def _eb_value_and_grad(data_stats, x):
    """Objective and gradient in unconstrained coordinates.

    Each (variable, observation) block is one unit: its replicates share eta
    and, when gamma = 1, theta.
    """
    counts, means, within = data_stats
    mu, e = x[0], math.exp(x[1])
    s_eta, s_theta = math.exp(x[2]), math.exp(x[3])
    p = float(expit(x[4]))
    n = counts.astype(float)[:, None]
    z = means - mu
    big_b = n * z * z  # between-replicate-mean sum of squares

    def comp(s):
        lam = e + n * s
        ll = (-0.5 * n * LOG_2PI - 0.5 * (n - 1.0) * math.log(e) - 0.5 * np.log(lam)
              - within / (2.0 * e) - big_b / (2.0 * lam))
        d_e = -(n - 1.0) / (2.0 * e) + within / (2.0 * e * e) - 1.0 / (2.0 * lam) + big_b / (2.0 * lam * lam)
        d_s = n * (-1.0 / (2.0 * lam) + big_b / (2.0 * lam * lam))
        d_mu = n * z / lam
        return ll, d_e, d_s, d_mu

    l0, e0, s0, m0 = comp(s_eta)
    l1, e1, s1, m1 = comp(s_eta + s_theta)
    a1 = math.log(p) + l1
    a0 = math.log1p(-p) + l0
    total = np.logaddexp(a1, a0)
    r1 = np.exp(a1 - total)
    r0 = 1.0 - r1
    grad = np.array([
        np.sum(r1 * m1 + r0 * m0),
        e * np.sum(r1 * e1 + r0 * e0),
        s_eta * np.sum(r1 * s1 + r0 * s0),
        s_theta * np.sum(r1 * s1),
        np.sum(r1 - p),
    ])
    return float(total.sum()), grad


def eb_objective(data: DataMatrix, hyper: HyperParams) -> float:
    """Log marginal likelihood of the hyperparameters, free of any clustering.

    Identical to :func:`log_marglik` under the all-singletons allocation.
    """
    return _eb_value_and_grad(data.suff_stats(), hyper.to_unconstrained())[0]


def eb_gradient(data: DataMatrix, hyper: HyperParams) -> np.ndarray:
    """Gradient of :func:`eb_objective` in (mu, log s2, log s2_eta, log s2_theta, logit p)."""
    return _eb_value_and_grad(data.suff_stats(), hyper.to_unconstrained())[1]


_LOWER = np.array([-np.inf, math.log(VAR_GUARD), math.log(VAR_GUARD), math.log(VAR_GUARD), float(logit(P_GUARD))])
_UPPER = np.array([np.inf, np.inf, np.inf, np.inf, float(logit(1.0 - P_GUARD))])


@dataclass
class EBFit:
    hyper: HyperParams
    se: dict[str, float]
    objective: float
    init_objective: float
    grad_norm: float
    boundary: list[str]
    starts: list[dict] = field(default_factory=list)

    def summary(self) -> str:
        lines = [f"log marginal likelihood {self.objective:.6f} (start {self.init_objective:.6f})"]
        for name in HYPER_NAMES:
            lines.append(f"  {name:<13} {getattr(self.hyper, name):.6g}  (se {self.se[name]:.3g})")
        if self.boundary:
            lines.append(f"  at boundary guard: {', '.join(self.boundary)}")
        return "\n".join(lines)


def _numeric_hessian(grad_fn, x, step=1e-5):
    k = len(x)
    h = np.empty((k, k))
    for j in range(k):
        dx = np.zeros(k)
        dx[j] = step
        h[:, j] = (grad_fn(x + dx) - grad_fn(x - dx)) / (2.0 * step)
    return 0.5 * (h + h.T)


def _at_bounds(x, tol=1e-8):
    return (x <= _LOWER + tol) | (x >= _UPPER - tol)


def _projected_grad(x, g):
    pg = g.copy()
    # ascent problem: at a lower bound only upward pull counts, and vice versa
    pg[(x <= _LOWER + 1e-8) & (g < 0)] = 0.0
    pg[(x >= _UPPER - 1e-8) & (g > 0)] = 0.0
    return pg


def fit_empirical_bayes(
    data: DataMatrix,
    init: HyperParams,
    n_starts: int = 5,
    seed: int = 0,
    gtol: float = 1e-6,
    max_iter: int = 2000,
) -> EBFit:
    """Maximize :func:`eb_objective` with multi-start L-BFGS-B plus Newton polishing.

    Standard errors come from the inverse observed information in the
    unconstrained coordinates and are mapped back by the delta method.
    Coordinates that end on a boundary guard get ``nan`` standard errors.
    """
    stats = data.suff_stats()

    def neg(x):
        f, g = _eb_value_and_grad(stats, x)
        return -f, -g

    def grad(x):
        return _eb_value_and_grad(stats, x)[1]

    x0 = np.clip(init.to_unconstrained(), _LOWER, _UPPER)
    init_obj = _eb_value_and_grad(stats, x0)[0]
    rng = np.random.default_rng(seed)
    starts = [x0] + [np.clip(x0 + rng.normal(0.0, 0.5, size=5), _LOWER, _UPPER) for _ in range(n_starts - 1)]
    bounds = list(zip(np.where(np.isfinite(_LOWER), _LOWER, None), np.where(np.isfinite(_UPPER), _UPPER, None)))

    records = []
    best = None
    for k, xs in enumerate(starts):
        res = optimize.minimize(
            neg, xs, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": max_iter, "ftol": 1e-15, "gtol": gtol * 1e-2},
        )
        x = _polish(grad, res.x)
        f, g = _eb_value_and_grad(stats, x)
        pg = float(np.linalg.norm(_projected_grad(x, g)))
        records.append({"start": k, "objective": f, "grad_norm": pg, "iterations": int(res.nit), "message": str(res.message)})
        log.debug("EB start %d: objective %.6f, |grad| %.2e", k, f, pg)
        if best is None or f > best[0] + 1e-9:
            best = (f, x, pg)

    f, x, pg = best
    if np.isfinite(f) and x[4] > _LOWER[4]:
        # On the null ridge the slab adds nothing; report it at the p guard.
        x_null = x.copy()
        x_null[4] = _LOWER[4]
        f_null = _eb_value_and_grad(stats, x_null)[0]
        if f - f_null < NULL_RIDGE_TOL:
            x_null = _polish(grad, x_null)
            f, x = _eb_value_and_grad(stats, x_null)[0], x_null
            pg = float(np.linalg.norm(_projected_grad(x, grad(x))))
    if not np.isfinite(f) or pg >= gtol:
        raise OptimizationFailure(
            f"empirical Bayes fit did not converge: projected gradient norm {pg:.3e} >= {gtol:g}",
            trace=records,
        )
    hyper = HyperParams.from_unconstrained(x)
    at_bound = _at_bounds(x)
    boundary = [name for name, hit in zip(HYPER_NAMES, at_bound) if hit]
    se = _standard_errors(grad, x, at_bound, hyper)
    return EBFit(hyper=hyper, se=se, objective=f, init_objective=init_obj, grad_norm=pg,
                 boundary=boundary, starts=records)


def _polish(grad_fn, x, n_steps=20):
    """Newton steps on the free coordinates, restricted to directions of clear curvature.

    Flat directions (a ridge where the slab is switched off either by p or by
    sigma2_theta) are left alone. Stops once the gradient stops shrinking.
    """
    x = x.copy()
    for _ in range(n_steps):
        g = grad_fn(x)
        free = ~_at_bounds(x)
        if not free.any() or np.linalg.norm(g[free]) < 1e-10:
            break
        h = _numeric_hessian(grad_fn, x)[np.ix_(free, free)]
        lam, vec = np.linalg.eigh(0.5 * (h + h.T))
        keep = lam < -1e-8 * max(1.0, np.abs(lam).max())
        if not keep.any():
            break
        proj = vec[:, keep].T @ g[free]
        trial = x.copy()
        trial[free] -= vec[:, keep] @ (proj / lam[keep])
        trial = np.clip(trial, _LOWER, _UPPER)
        if np.linalg.norm(_projected_grad(trial, grad_fn(trial))) >= np.linalg.norm(_projected_grad(x, g)):
            break
        x = trial
    return x


def _standard_errors(grad_fn, x, at_bound, hyper: HyperParams) -> dict[str, float]:
    """Delta-method standard errors; ``nan`` for coordinates on a guard or along a flat ridge."""
    se_u = np.full(5, np.nan)
    free = np.flatnonzero(~at_bound)
    if free.size:
        info = -_numeric_hessian(grad_fn, x)[np.ix_(free, free)]
        info = 0.5 * (info + info.T)
        lam, vec = np.linalg.eigh(info)
        flat = lam <= 1e-10 * max(lam.max(), 1e-300)
        unidentified = (np.abs(vec[:, flat]) > 0.1).any(axis=1) if flat.any() else np.zeros(free.size, bool)
        ok = free[~unidentified]
        if ok.size:
            sub = info[np.ix_(~unidentified, ~unidentified)]
            try:
                se_u[ok] = np.sqrt(np.clip(np.diag(np.linalg.inv(sub)), 0.0, None))
            except np.linalg.LinAlgError:
                pass
    jac = np.array([1.0, hyper.sigma2, hyper.sigma2_eta, hyper.sigma2_theta, hyper.p * (1.0 - hyper.p)])
    return {name: float(s * j) for name, s, j in zip(HYPER_NAMES, se_u, jac)}


def moment_start(data: DataMatrix) -> HyperParams:
    """Crude starting values from data moments: grand mean, within and between variances."""
    counts, means, within = data.suff_stats()
    dof = max(int(counts.sum() - len(counts)), 1)
    sigma2 = float(within.sum() / (dof * data.n_vars)) if counts.max() > 1 else float(np.var(means)) / 2
    between = float(np.var(means))
    return HyperParams(
        mu=float(means.mean()),
        sigma2=max(sigma2, 1e-3),
        sigma2_eta=max(between / 2, 1e-3),
        sigma2_theta=max(between, 1e-3),
        p=0.5,
    )


# --- simulation ------------------------------------------------------------

def simulate_data(
    hyper: HyperParams,
    alloc,
    n_vars: int,
    replicates,
    seed: int,
) -> DataMatrix:
    """Draw one data set from the hierarchical model for a fixed allocation."""
    alloc = _as_allocation(alloc)
    n = alloc.n
    reps = np.broadcast_to(np.asarray(replicates, dtype=np.int64), (n,))
    if np.any(reps < 1) or n_vars < 1:
        raise InvalidInputError("need at least one variable and one replicate per observation")
    rng = np.random.default_rng(seed)
    c = alloc.n_clusters
    gamma = rng.random((c, n_vars)) < hyper.p
    theta = rng.normal(0.0, math.sqrt(hyper.sigma2_theta), size=(c, n_vars))
    eta = rng.normal(0.0, math.sqrt(hyper.sigma2_eta), size=(n, n_vars))
    lab = alloc.as_array()
    unit = np.repeat(np.arange(n), reps)
    mean = hyper.mu + (gamma * theta)[lab] + eta
    values = mean[unit] + rng.normal(0.0, math.sqrt(hyper.sigma2), size=(len(unit), n_vars))
    return DataMatrix(
        values=values,
        unit=unit,
        ids=tuple(f"obs{i + 1}" for i in range(n)),
        variables=tuple(f"v{j + 1}" for j in range(n_vars)),
    )

