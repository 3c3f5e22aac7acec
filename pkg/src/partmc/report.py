"""Diagnostic series at regular checkpoints of a trace, and their CSV/JSON exports."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .diagnostics import DiagnosticResult, PartitionScheme, cv_matrix, hotelling_rs, top_k_scheme
from .errors import InsufficientRegenerationError, InsufficientStatesError, InvalidInputError
from .ioutil import atomic_write
from .regen import find_tours
from .trace import Trace

DEFAULT_K_LIST = (2, 3, 5, 10)
DEFAULT_CHECK_EVERY = 1000

SERIES_COLUMNS = ("checkpoint", "K", "R", "delta", "t2", "dof", "p_value", "max_cv", "status")


@dataclass
class SeriesRow:
    checkpoint: int
    K: int
    R: int = 0
    delta: str = ""
    t2: float = math.nan
    dof: int = 0
    p_value: float = math.nan
    max_cv: float = math.nan
    status: str = "ok"
    result: DiagnosticResult | None = field(default=None, repr=False)

    def as_csv_row(self) -> list[str]:
        return [str(self.checkpoint), str(self.K), str(self.R), self.delta, repr(float(self.t2)),
                str(self.dof), repr(float(self.p_value)), repr(float(self.max_cv)), self.status]


def checkpoints(n: int, check_every: int) -> list[int]:
    """Recorded-state counts at which diagnostics are evaluated: every ``check_every`` states."""
    if check_every < 1:
        raise InvalidInputError("check_every must be at least 1")
    return [check_every * j for j in range(1, n // check_every + 1)]


def diagnose(trace: Trace, K: int, scheme: PartitionScheme | None = None,
             delta: str | None = None, n_obs: int | None = None, checkpoint: int | None = None) -> SeriesRow:
    """Hotelling-RS and the largest pairwise CV on ``trace``; failures become a status string."""
    row = SeriesRow(checkpoint=len(trace) if checkpoint is None else checkpoint, K=K)
    try:
        tours = find_tours(trace, delta)
        row.R, row.delta = tours.R, tours.delta
        if n_obs is not None and n_obs > 1:
            row.max_cv = float(cv_matrix(trace, tours, n_obs).max())
        use = scheme if scheme is not None else top_k_scheme(trace, K)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = hotelling_rs(trace, tours, use)
        row.t2, row.dof, row.p_value, row.result = res.t2, res.dof, res.p_value, res
        if res.unvisited:
            row.status = "unvisited-sets"
    except (InsufficientRegenerationError, InsufficientStatesError) as exc:
        row.status = type(exc).__name__
    return row


def diagnostic_series(trace: Trace, k_list: Sequence[int] = DEFAULT_K_LIST,
                      check_every: int = DEFAULT_CHECK_EVERY,
                      schemes: Mapping[int, PartitionScheme] | None = None,
                      delta: str | None = None, n_obs: int | None = None) -> list[SeriesRow]:
    """One row per (checkpoint, K); each checkpoint sees only the states recorded so far.

    ``schemes`` fixes the partition scheme per K (for example the exact top-K
    states); otherwise the top-K visited states of each prefix are used.
    """
    if not k_list:
        raise InvalidInputError("K list must be non-empty")
    rows = []
    for m in checkpoints(len(trace), check_every):
        head = trace.head(m)
        cv = None
        for K in k_list:
            row = diagnose(head, K, (schemes or {}).get(K), delta, n_obs if cv is None else None, m)
            if cv is None:
                cv = row.max_cv
            row.max_cv = cv
            rows.append(row)
    return rows


def write_series_csv(rows: Sequence[SeriesRow], path) -> None:
    lines = [",".join(SERIES_COLUMNS)]
    lines.extend(",".join(r.as_csv_row()) for r in rows)
    atomic_write(Path(path), "\n".join(lines) + "\n")


def read_series_csv(path) -> list[SeriesRow]:
    with open(path, newline="") as fh:
        out = []
        for rec in csv.DictReader(fh):
            out.append(SeriesRow(int(rec["checkpoint"]), int(rec["K"]), int(rec["R"]), rec["delta"],
                                 float(rec["t2"]), int(rec["dof"]), float(rec["p_value"]),
                                 float(rec["max_cv"]), rec["status"]))
        return out


def write_series_jsonl(rows: Sequence[SeriesRow], path) -> None:
    """Full DiagnosticResult records, one JSON object per evaluated (checkpoint, K)."""
    lines = []
    for r in rows:
        rec = {"checkpoint": r.checkpoint, "K": r.K, "status": r.status}
        if r.result is not None:
            rec["result"] = r.result.to_record()
        lines.append(json.dumps(rec, sort_keys=True))
    atomic_write(Path(path), "\n".join(lines) + ("\n" if lines else ""))


def final_p_values(rows: Sequence[SeriesRow]) -> dict[int, float]:
    """p-value per K at the last checkpoint."""
    if not rows:
        return {}
    last = max(r.checkpoint for r in rows)
    return {r.K: r.p_value for r in rows if r.checkpoint == last}


def p_value_table(rows: Sequence[SeriesRow]) -> np.ndarray:
    """Checkpoints by K matrix of p-values, the layout used for plotting."""
    ks = sorted({r.K for r in rows})
    cps = sorted({r.checkpoint for r in rows})
    out = np.full((len(cps), len(ks)), math.nan)
    for r in rows:
        out[cps.index(r.checkpoint), ks.index(r.K)] = r.p_value
    return out
