"""File formats: data CSV, hyperparameter key-value files, atomic writes."""
from __future__ import annotations

import csv
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import InvalidInputError


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_data_csv(path):
    """Read replicate rows: observation id first, then one column per variable."""
    from .model import DataMatrix

    ids: dict[str, int] = {}
    unit = []
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidInputError(f"{path}:1: empty file") from None
        if len(header) < 2:
            raise InvalidInputError(f"{path}:1: need an id column and at least one variable")
        width = len(header)
        for row in reader:
            lineno = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != width:
                raise InvalidInputError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                vals = [float(cell) for cell in row[1:]]
            except ValueError:
                raise InvalidInputError(f"{path}:{lineno}: non-numeric measurement") from None
            if not all(np.isfinite(vals)):
                raise InvalidInputError(f"{path}:{lineno}: missing or non-finite measurement")
            obs = row[0].strip()
            if not obs:
                raise InvalidInputError(f"{path}:{lineno}: empty observation id")
            unit.append(ids.setdefault(obs, len(ids)))
            rows.append(vals)
    if not rows:
        raise InvalidInputError(f"{path}: no data rows")
    return DataMatrix(
        values=np.array(rows),
        unit=np.array(unit),
        ids=tuple(ids),
        variables=tuple(h.strip() for h in header[1:]),
    )


def write_data_csv(data, path) -> None:
    lines = [",".join(["id", *data.variables])]
    for row, u in zip(data.values, data.unit):
        lines.append(",".join([data.ids[u], *(repr(float(v)) for v in row)]))
    atomic_write(Path(path), "\n".join(lines) + "\n")


def write_keyvalue(path, values: dict, comments=()) -> None:
    lines = [f"# {c}" for c in comments]
    lines.extend(f"{k} = {v!r}" for k, v in values.items())
    atomic_write(Path(path), "\n".join(lines) + "\n")


def read_keyvalue(path) -> dict[str, float]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, sep, value = line.partition("=")
            if not sep:
                raise InvalidInputError(f"{path}:{lineno}: expected name = value")
            try:
                out[name.strip()] = float(value)
            except ValueError:
                raise InvalidInputError(f"{path}:{lineno}: bad number {value.strip()!r}") from None
    return out


def read_hyper(path):
    from .model import HYPER_NAMES, HyperParams

    kv = read_keyvalue(path)
    missing = [n for n in HYPER_NAMES if n not in kv]
    if missing:
        raise InvalidInputError(f"{path}: missing hyperparameters {missing}")
    return HyperParams(**{n: kv[n] for n in HYPER_NAMES})


def write_hyper(path, hyper, se=None) -> None:
    values = hyper.as_dict()
    if se:
        values.update({f"se_{k}": float(v) for k, v in se.items()})
    write_keyvalue(path, values)
