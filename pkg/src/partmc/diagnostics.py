"""Hotelling-type convergence diagnostic built on regenerative sampling.

Sets ``S_1 .. S_K`` of states with known unnormalized masses ``q_i`` define
``g_i(x) = 1(x in S_i) / q_i``. At equilibrium every component of the RS mean
of ``g`` estimates the same constant ``1/Z``; the statistic measures how far
the components are from a common value, in the metric of the regenerative
covariance estimate, and is referred to chi-square with K - 1 degrees of
freedom.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaincc

from .errors import InsufficientRegenerationError, InsufficientStatesError, InvalidInputError
from .regen import GSpec, Tours, rs_estimate, rs_variances
from .trace import Trace

COND_MAX = 1e12


@dataclass(frozen=True)
class PartitionScheme:
    """K disjoint sets of states and their log masses ``log q_i``."""

    sets: tuple[tuple[str, ...], ...]
    log_q: np.ndarray

    def __post_init__(self):
        if len(self.sets) < 2:
            raise InvalidInputError("a partition scheme needs K >= 2 sets")
        seen: set[str] = set()
        for s in self.sets:
            if not s:
                raise InvalidInputError("empty set in partition scheme")
            if seen.intersection(s):
                raise InvalidInputError("partition scheme sets must be disjoint")
            seen.update(s)
        if len(self.log_q) != len(self.sets) or not np.all(np.isfinite(self.log_q)):
            raise InvalidInputError("need one finite log mass per set")

    @property
    def K(self) -> int:
        return len(self.sets)

    @property
    def shift(self) -> float:
        return float(np.max(self.log_q))

    @property
    def q(self) -> np.ndarray:
        """Masses rescaled so the largest is 1."""
        return np.exp(np.asarray(self.log_q) - self.shift)

    def gspec(self) -> GSpec:
        return GSpec.indicators(self.sets, 1.0 / self.q)

    @classmethod
    def from_log_masses(cls, sets: Sequence[Sequence[str]], log_mass: dict[str, float]) -> "PartitionScheme":
        log_q = []
        for s in sets:
            vals = np.array([log_mass[k] for k in s])
            top = vals.max()
            log_q.append(top + math.log(np.exp(vals - top).sum()))
        return cls(tuple(tuple(s) for s in sets), np.array(log_q))


def rank_states(keys: Sequence[str], log_post: np.ndarray) -> list[int]:
    """Indices sorted by decreasing log posterior, ties broken by key."""
    return sorted(range(len(keys)), key=lambda k: (-log_post[k], keys[k]))


def top_k_scheme(trace: Trace, K: int) -> PartitionScheme:
    """Singleton sets holding the K visited states of highest log posterior."""
    visited = np.flatnonzero(trace.visit_counts() > 0)
    if len(visited) < K:
        raise InsufficientStatesError(f"trace visits {len(visited)} distinct states, K = {K} requested")
    keys = [trace.keys[k] for k in visited]
    lp = trace.log_post[visited]
    top = rank_states(keys, lp)[:K]
    return PartitionScheme(tuple((keys[k],) for k in top), lp[top].copy())


# --- projection algebra ----------------------------------------------------

def _eig_checked(sigma: np.ndarray, cond_max=COND_MAX):
    lam, vec = np.linalg.eigh(0.5 * (sigma + sigma.T))
    if lam[0] <= 0 or lam[-1] / lam[0] > cond_max:
        raise InsufficientRegenerationError(
            f"covariance estimate is singular or ill-conditioned (eigenvalues {lam[0]:.3g} .. {lam[-1]:.3g})"
        )
    return lam, vec


def inv_sqrt(sigma: np.ndarray) -> np.ndarray:
    lam, vec = _eig_checked(sigma)
    return (vec / np.sqrt(lam)) @ vec.T


def inverse(sigma: np.ndarray) -> np.ndarray:
    lam, vec = _eig_checked(sigma)
    return (vec / lam) @ vec.T


def weights(sigma: np.ndarray) -> np.ndarray:
    """GLS weights ``(1' S^-1 1)^-1 S^-1 1``; they sum to one."""
    si1 = inverse(sigma).sum(axis=1)
    return si1 / si1.sum()


def projection_a(sigma: np.ndarray) -> np.ndarray:
    """``S^-1/2 - S^-1/2 1 (1' S^-1 1)^-1 1' S^-1``, which annihilates constant vectors."""
    k = sigma.shape[0]
    one = np.ones((k, 1))
    s_half = inv_sqrt(sigma)
    s_inv = inverse(sigma)
    return s_half - s_half @ one @ (one.T @ s_inv) / s_inv.sum()


def projection_b(sigma: np.ndarray) -> np.ndarray:
    """``I - S^-1/2 1 (1' S^-1 1)^-1 1' S^-1/2``: symmetric, idempotent, rank K - 1."""
    k = sigma.shape[0]
    u = inv_sqrt(sigma) @ np.ones(k)
    return np.eye(k) - np.outer(u, u) / float(u @ u)


def t2_quadratic(gbar: np.ndarray, sigma: np.ndarray, R: int) -> float:
    s_inv = inverse(sigma)
    w = s_inv.sum(axis=1) / s_inv.sum()
    resid = gbar - w @ gbar
    return float(R * resid @ s_inv @ resid)


def t2_projection(gbar: np.ndarray, sigma: np.ndarray, R: int) -> float:
    a = projection_a(sigma) @ gbar
    return float(R * a @ a)


def chi2_upper_tail(x: float, dof: int) -> float:
    """P(X > x) for X ~ chi-square(dof), via the regularized upper incomplete gamma."""
    if dof < 1:
        raise InvalidInputError("dof must be at least 1")
    if x <= 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    return float(gammaincc(0.5 * dof, 0.5 * x))


# --- the statistic ---------------------------------------------------------

@dataclass
class DiagnosticResult:
    g_bar: np.ndarray
    sigma_hat: np.ndarray
    z_inv_hat: float  # on the scale where max q_i = 1; see ``log_z_inv``
    weights: np.ndarray
    t2: float
    dof: int
    p_value: float
    R: int
    delta: str
    log_scale_shift: float = 0.0
    t2_projection: float = float("nan")
    unvisited: list[int] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.g_bar)

    @property
    def log_z_inv(self) -> float:
        """log of the estimated 1/Z on the caller's original mass scale."""
        if self.z_inv_hat <= 0:
            return -math.inf
        return math.log(self.z_inv_hat) - self.log_scale_shift

    def to_record(self) -> dict:
        rec = asdict(self)
        for name in ("g_bar", "sigma_hat", "weights"):
            rec[name] = np.asarray(rec[name]).tolist()
        rec["K"] = self.K
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    @classmethod
    def from_record(cls, rec: dict) -> "DiagnosticResult":
        rec = dict(rec)
        rec.pop("K", None)
        for name in ("g_bar", "sigma_hat", "weights"):
            rec[name] = np.asarray(rec[name], dtype=float)
        return cls(**rec)


def hotelling_rs(trace: Trace, tours: Tours, scheme: PartitionScheme, cond_max: float = COND_MAX) -> DiagnosticResult:
    """Hotelling-RS statistic ``R (gbar - 1 Z^) ' S^-1 (gbar - 1 Z^)`` and its chi2(K-1) p-value.

    A set never visited inside the tour window has ``gbar_i = 0`` and a zero
    row in the covariance estimate. That component is then known exactly,
    which pins the common level to zero: the statistic reduces to
    ``R gbar_V' S_VV^-1 gbar_V`` over the visited sets V, the limit of the
    full statistic as the unvisited variances shrink to zero.
    """
    K = scheme.K
    R = tours.R
    if R < K + 1:
        raise InsufficientRegenerationError(f"need R >= K + 1 = {K + 1} tours, got {R}")
    gbar, sigma = rs_estimate(trace, tours, scheme.gspec())
    visited = gbar > 0
    common = dict(g_bar=gbar, sigma_hat=sigma, dof=K - 1, R=R, delta=tours.delta, log_scale_shift=scheme.shift)

    if visited.all():
        lam, vec = _eig_checked(sigma, cond_max)
        s_inv = (vec / lam) @ vec.T
        w = s_inv.sum(axis=1) / s_inv.sum()
        z_inv = float(w @ gbar)
        resid = gbar - z_inv
        t2 = float(R * resid @ s_inv @ resid)
        return DiagnosticResult(z_inv_hat=z_inv, weights=w, t2=t2, p_value=chi2_upper_tail(t2, K - 1),
                                t2_projection=t2_projection(gbar, sigma, R), **common)

    if not visited.any():
        raise InsufficientRegenerationError("no set of the partition scheme was visited in the tour window")
    unvisited = np.flatnonzero(~visited).tolist()
    warnings.warn(
        f"sets {unvisited} of the partition scheme were never visited; the diagnostic can only "
        "compare relative frequencies of visited states, and an unvisited set whose mass is too small to "
        "be visited in a run of this length also forces a rejection",
        RuntimeWarning,
        stacklevel=2,
    )
    idx = np.flatnonzero(visited)
    t2 = _t2_zero_level(gbar[idx], sigma[np.ix_(idx, idx)], R, cond_max)
    w = (~visited).astype(float) / (~visited).sum()
    return DiagnosticResult(z_inv_hat=0.0, weights=w, t2=t2, p_value=chi2_upper_tail(t2, K - 1),
                            unvisited=unvisited, **common)


def _t2_zero_level(gv: np.ndarray, sub: np.ndarray, R: int, cond_max: float) -> float:
    """``R gv' S^-1 gv``, or infinity when gv leans on a zero-variance direction of S.

    The degenerate case arises when the visited sets absorb every step of the
    window: then ``sum_i q_i g_i = 1`` on every tour, so S is singular along q
    while gv has a unit component there.
    """
    lam, vec = np.linalg.eigh(0.5 * (sub + sub.T))
    null = lam <= lam[-1] / cond_max
    if not null.any():
        return float(R * np.sum((vec.T @ gv) ** 2 / lam))
    proj = vec[:, null].T @ gv
    if np.linalg.norm(proj) > 1e-6 * np.linalg.norm(gv):
        return math.inf
    raise InsufficientRegenerationError(
        f"covariance estimate of the visited sets is singular (eigenvalues {lam[0]:.3g} .. {lam[-1]:.3g})"
    )


# --- coefficient-of-variation baseline --------------------------------------

def cv_from_estimates(rho: np.ndarray, var: np.ndarray, R: int) -> np.ndarray:
    se = np.sqrt(np.clip(var, 0.0, None) / R)
    return se / np.maximum(rho, 1.0 - rho)


def cv_diagnostic(trace: Trace, tours: Tours, pair: tuple[int, int]) -> float:
    """``se(rho_ij) / max(rho_ij, 1 - rho_ij)`` for 0-based observations i, j."""
    from .consensus import cocluster_gspec

    rho, var = rs_variances(trace, tours, cocluster_gspec([pair]))
    return float(cv_from_estimates(rho, var, tours.R)[0])


def cv_matrix(trace: Trace, tours: Tours, n_obs: int) -> np.ndarray:
    """CV for every pair; the diagonal is zero."""
    from .consensus import all_pairs, cocluster_gspec

    pairs = all_pairs(n_obs)
    rho, var = rs_variances(trace, tours, cocluster_gspec(pairs))
    cv = cv_from_estimates(rho, var, tours.R)
    out = np.zeros((n_obs, n_obs))
    for (i, j), v in zip(pairs, cv):
        out[i, j] = out[j, i] = v
    return out
