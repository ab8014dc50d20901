"""Time-indexed data table shared by every stage of the pipeline.

Rows are time steps, columns are named variables. Each column carries a kind:

* ``state``    physical variable that the identification methods model
* ``internal`` integrator state needed to restart the simulation exactly
* ``imposed``  input fixed by the driving cycle (never modeled)
* ``boolean``  module activation column ``X_<Module>``
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

KINDS = ("state", "internal", "imposed", "boolean")
BOOL_PREFIX = "X_"
INTERNAL_PREFIX = "int_"
IMPOSED_NAMES = frozenset({"speed_setpoint"})


class SchemaError(ValueError):
    """Raised when a table lacks required columns or has inconsistent metadata."""


def infer_kind(name: str) -> str:
    if name.startswith(BOOL_PREFIX):
        return "boolean"
    if name.startswith(INTERNAL_PREFIX):
        return "internal"
    if name in IMPOSED_NAMES:
        return "imposed"
    return "state"


@dataclass
class DataTable:
    columns: list[str]
    values: np.ndarray
    kinds: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.columns = list(self.columns)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise SchemaError("values must be a 2-D array")
        if self.values.shape[1] != len(self.columns):
            raise SchemaError(
                f"{len(self.columns)} column names for {self.values.shape[1]} value columns"
            )
        if len(set(self.columns)) != len(self.columns):
            dupes = sorted({c for c in self.columns if self.columns.count(c) > 1})
            raise SchemaError(f"duplicate column names: {dupes}")
        kinds = {c: self.kinds.get(c, infer_kind(c)) for c in self.columns}
        bad = {c: k for c, k in kinds.items() if k not in KINDS}
        if bad:
            raise SchemaError(f"unknown column kinds: {bad}")
        self.kinds = kinds
        for c in self.columns_of("boolean"):
            col = self[c]
            if not np.all((col == 0.0) | (col == 1.0)):
                raise SchemaError(f"boolean column {c} holds values other than 0/1")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.n_rows

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    def index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise SchemaError(f"missing column: {name}") from None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[:, self.index(name)]

    def columns_of(self, *kinds: str) -> list[str]:
        return [c for c in self.columns if self.kinds[c] in kinds]

    def require(self, names: Iterable[str]) -> None:
        missing = [n for n in names if n not in self.columns]
        if missing:
            raise SchemaError(f"missing required columns: {missing}")

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        self.require(names)
        return self.values[:, [self.columns.index(n) for n in names]]

    def select(self, names: Sequence[str]) -> "DataTable":
        return DataTable(list(names), self.matrix(names).copy(),
                         {n: self.kinds[n] for n in names})

    def with_columns(self, names: Sequence[str], values: np.ndarray,
                     kinds: Mapping[str, str] | None = None) -> "DataTable":
        """Return a copy with columns appended (or replaced when names collide)."""
        values = np.asarray(values, dtype=float).reshape(self.n_rows, len(names))
        keep = [c for c in self.columns if c not in names]
        new_kinds = {c: self.kinds[c] for c in keep}
        new_kinds.update({n: (kinds or {}).get(n, infer_kind(n)) for n in names})
        return DataTable(keep + list(names),
                         np.hstack([self.matrix(keep), values]), new_kinds)

    def row(self, t: int) -> dict[str, float]:
        return dict(zip(self.columns, self.values[t].tolist()))

    def rows(self, start: int, stop: int | None = None) -> "DataTable":
        return DataTable(self.columns, self.values[start:stop].copy(), dict(self.kinds))

    def equals(self, other: "DataTable") -> bool:
        """Bit-exact comparison of names, kinds and values."""
        return (self.columns == other.columns and self.kinds == other.kinds
                and self.values.shape == other.values.shape
                and bool(np.array_equal(self.values, other.values)))

    # -- CSV ---------------------------------------------------------------

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", *self.columns])
            for t, row in enumerate(self.values.tolist()):
                # repr() of a float is the shortest string that round-trips
                writer.writerow([t, *(repr(v) for v in row)])

    @classmethod
    def from_csv(cls, path: str | Path,
                 kinds: Mapping[str, str] | None = None) -> "DataTable":
        path = Path(path)
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            body = [row for row in reader if row]
        if not header or header[0] != "t":
            raise SchemaError(f"{path}: first column must be 't'")
        names = header[1:]
        values = np.array([[float(v) for v in row[1:]] for row in body], dtype=float)
        if values.size == 0:
            values = values.reshape(0, len(names))
        return cls(names, values, dict(kinds or {}))


def stack(tables: Sequence[DataTable]) -> tuple[DataTable, np.ndarray]:
    """Concatenate tables row-wise.

    Returns the stacked table and a boolean mask ``valid`` of length
    ``n_total`` where ``valid[i]`` says row ``i`` has a successor in the same
    source table, so no transition pair crosses a table boundary.
    """
    if not tables:
        raise SchemaError("nothing to stack")
    cols = tables[0].columns
    for tb in tables[1:]:
        if tb.columns != cols:
            raise SchemaError("stacked tables must share the same column order")
    values = np.vstack([tb.values for tb in tables])
    valid = np.concatenate([
        np.r_[np.ones(max(len(tb) - 1, 0), dtype=bool), np.zeros(min(len(tb), 1), dtype=bool)]
        for tb in tables
    ])
    return DataTable(cols, values, dict(tables[0].kinds)), valid
