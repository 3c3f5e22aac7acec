"""Recorded chain output: visited states and their cached log posteriors.

States are stored compressed: ``keys`` lists each distinct state once (sorted),
``index[t]`` points into ``keys`` for recorded step ``t`` (0-based), and
``log_post[k]`` caches the unnormalized log posterior of ``keys[k]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidInputError
from .ioutil import atomic_write


@dataclass
class Trace:
    keys: tuple[str, ...]
    index: np.ndarray
    log_post: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.keys = tuple(self.keys)
        self.index = np.asarray(self.index, dtype=np.int64)
        self.log_post = np.asarray(self.log_post, dtype=float)
        if len(self.log_post) != len(self.keys):
            raise InvalidInputError("one cached log posterior per distinct state is required")
        if self.index.size and (self.index.min() < 0 or self.index.max() >= len(self.keys)):
            raise InvalidInputError("trace index out of range")

    def __len__(self):
        return len(self.index)

    @property
    def states(self) -> list[str]:
        keys = self.keys
        return [keys[k] for k in self.index]

    def log_post_of(self, key: str) -> float:
        return float(self.log_post[self.keys.index(key)])

    def visit_counts(self) -> np.ndarray:
        return np.bincount(self.index, minlength=len(self.keys))

    @classmethod
    def from_states(cls, states: Sequence[str], log_post: Mapping[str, float], meta=None) -> "Trace":
        keys, index = np.unique(np.asarray(states, dtype=object).astype(str), return_inverse=True)
        keys = tuple(str(k) for k in keys)
        return cls(keys, index.ravel(), np.array([log_post[k] for k in keys]), dict(meta or {}))

    def head(self, n: int) -> "Trace":
        """The first ``n`` recorded steps as a view sharing ``keys``; some keys may be unvisited."""
        return Trace(self.keys, self.index[:n], self.log_post, self.meta)

    def prefix(self, n: int) -> "Trace":
        """The first ``n`` recorded steps, restricted to the states they visit."""
        head = self.index[:n]
        used, inverse = np.unique(head, return_inverse=True)
        return Trace(tuple(self.keys[k] for k in used), inverse.ravel(), self.log_post[used], dict(self.meta))

    # --- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        """Write ``# key: json`` meta lines, then ``iteration,state,log_post`` rows."""
        lines = [f"# {k}: {json.dumps(v, sort_keys=True)}" for k, v in sorted(self.meta.items())]
        lines.append("iteration,state,log_post")
        reprs = [repr(float(v)) for v in self.log_post]
        keys = self.keys
        lines.extend(f"{t + 1},{keys[k]},{reprs[k]}" for t, k in enumerate(self.index))
        atomic_write(Path(path), "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Trace":
        meta = {}
        states = []
        cache: dict[str, float] = {}
        with open(path) as fh:
            header_seen = False
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                if line.startswith("#"):
                    name, _, value = line[1:].strip().partition(":")
                    meta[name.strip()] = json.loads(value)
                    continue
                if not header_seen:
                    if line != "iteration,state,log_post":
                        raise InvalidInputError(f"{path}:{lineno}: unexpected trace header {line!r}")
                    header_seen = True
                    continue
                parts = line.split(",")
                if len(parts) != 3:
                    raise InvalidInputError(f"{path}:{lineno}: expected 3 columns")
                key, lp = parts[1], float(parts[2])
                if cache.setdefault(key, lp) != lp:
                    raise InvalidInputError(f"{path}:{lineno}: inconsistent log_post for state {key}")
                states.append(key)
        if not states:
            raise InvalidInputError(f"{path}: empty trace")
        return cls.from_states(states, cache, meta)
