"""Boolean designs over module versions and their unrolling into per-step schedules."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .table import DataTable

ROW_CAP = 2 ** 20


class DesignCapacityError(ValueError):
    pass


@dataclass(frozen=True)
class DoeDesign:
    module_names: tuple[str, ...]
    rows: np.ndarray  # r x m, 0/1

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=np.int8)
        if rows.ndim != 2 or rows.shape[1] != len(self.module_names):
            raise ValueError(f"design rows must be r x {len(self.module_names)}")
        if not np.all((rows == 0) | (rows == 1)):
            raise ValueError("design entries must be 0 or 1")
        object.__setattr__(self, "module_names", tuple(self.module_names))
        object.__setattr__(self, "rows", rows)

    @property
    def r(self) -> int:
        return self.rows.shape[0]

    @property
    def m(self) -> int:
        return len(self.module_names)

    def to_table(self) -> DataTable:
        return DataTable([f"X_{n}" for n in self.module_names], self.rows.astype(float))


def full_factorial(module_names: Sequence[str] | int, cap: int = ROW_CAP) -> DoeDesign:
    """All 2^m version vectors in binary counting order, first module least significant."""
    if isinstance(module_names, int):
        if module_names < 0:
            raise ValueError("module count must be >= 0")
        module_names = [f"M{j + 1}" for j in range(module_names)]
    m = len(module_names)
    if 2 ** m > cap:
        raise DesignCapacityError(f"2^{m} rows exceeds the design cap of {cap}")
    idx = np.arange(2 ** m)[:, None]
    rows = (idx >> np.arange(m)[None, :]) & 1
    return DoeDesign(tuple(module_names), rows)


def complement(design: DoeDesign) -> DoeDesign:
    return DoeDesign(design.module_names, 1 - design.rows)


@dataclass(frozen=True)
class Schedule:
    module_names: tuple[str, ...]
    versions: np.ndarray        # n x m, 0/1
    segment: np.ndarray         # n, segment index of each step
    design_row: np.ndarray      # n, index of the design row active at each step
    segment_length: int
    ordering: str = "sequential"
    seed: int | None = None

    @property
    def n(self) -> int:
        return self.versions.shape[0]

    def boundaries(self) -> np.ndarray:
        """Steps ``t`` such that a new segment starts at ``t + 1``."""
        return np.flatnonzero(self.segment[1:] != self.segment[:-1])

    def to_table(self) -> DataTable:
        return DataTable([f"X_{n}" for n in self.module_names], self.versions.astype(float))

    def to_csv(self, path: str | Path) -> None:
        self.to_table().to_csv(path)


def make_schedule(design: DoeDesign, n: int, segment_length: int,
                  ordering: str = "sequential", seed: int | None = None) -> Schedule:
    """Lay the design rows out in consecutive segments until ``n`` steps are filled.

    With ``ordering="random"`` each repetition of the design uses its own
    permutation drawn from ``seed``. Steps left after the last whole segment
    keep the last segment's vector.
    """
    if segment_length < 1 or n < 1:
        raise ValueError("n and segment_length must be >= 1")
    if ordering not in ("sequential", "random"):
        raise ValueError(f"unknown ordering: {ordering}")
    r = design.r
    n_segments = max(n // segment_length, 1)
    n_reps = -(-n_segments // r)
    rng = np.random.default_rng(seed)
    order = np.concatenate([
        rng.permutation(r) if ordering == "random" else np.arange(r)
        for _ in range(n_reps)
    ])[:n_segments]
    seg = np.minimum(np.arange(n) // segment_length, n_segments - 1)
    design_row = order[seg]
    return Schedule(design.module_names, design.rows[design_row].copy(), seg,
                    design_row, segment_length, ordering, seed)
