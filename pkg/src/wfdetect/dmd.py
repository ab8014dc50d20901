"""Linear dynamics identification with control inputs (DMDc, regression form).

The fitted model is ``x[t+1] = A x[t] + B u[t]`` where ``x`` are state columns
of a :class:`DataTable` and ``u`` the control columns (imposed variables and,
optionally, module Booleans).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

from .table import DataTable, stack


class SingularityError(np.linalg.LinAlgError):
    def __init__(self, message: str, columns: Sequence[str] = ()):
        super().__init__(message)
        self.columns = list(columns)


class DivergenceError(ArithmeticError):
    def __init__(self, step: int):
        super().__init__(f"rollout produced non-finite values at step {step}")
        self.step = step


@dataclass
class LinearModel:
    A: np.ndarray
    B: np.ndarray
    state_cols: list[str]
    control_cols: list[str]
    r2: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float).reshape(len(self.state_cols), len(self.control_cols))
        p = len(self.state_cols)
        if self.A.shape != (p, p):
            raise ValueError(f"A has shape {self.A.shape}, expected {(p, p)}")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ValueError("model matrices must be finite")

    def predict(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return x @ self.A.T + u @ self.B.T

    def to_dict(self) -> dict:
        return {"state_cols": self.state_cols, "control_cols": self.control_cols,
                "A": self.A.tolist(), "B": self.B.tolist(), "r2": self.r2}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        return cls(np.array(d["A"], dtype=float), np.array(d["B"], dtype=float),
                   list(d["state_cols"]), list(d["control_cols"]), dict(d.get("r2", {})))

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_json(cls, path: str | Path) -> "LinearModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _as_stacked(tables) -> tuple[DataTable, np.ndarray]:
    if isinstance(tables, DataTable):
        tables = [tables]
    return stack(list(tables))


def transition_pairs(tables, state_cols: Sequence[str], control_cols: Sequence[str]):
    """Return ``(X, U, Y)`` for every valid transition, never crossing a table boundary."""
    table, valid = _as_stacked(tables)
    idx = np.flatnonzero(valid)
    X = table.matrix(state_cols)
    U = table.matrix(control_cols) if control_cols else np.zeros((len(table), 0))
    return X[idx], U[idx], X[idx + 1]


def prune_variables(table: DataTable, corr_threshold: float = 0.98,
                    columns: Sequence[str] | None = None) -> list[str]:
    """Drop constant columns, then greedily drop one member of each highly correlated pair.

    Of the most correlated pair above the threshold, the column with the larger
    mean absolute correlation to the remaining ones goes; ties drop the later
    column.
    """
    if not 0.0 < corr_threshold <= 1.0:
        raise ValueError("corr_threshold must lie in (0, 1]")
    if len(table) < 2:
        raise ValueError("need at least two rows")
    cols = list(columns) if columns is not None else table.columns_of("state")
    data = table.matrix(cols)
    keep = [j for j in range(len(cols)) if np.ptp(data[:, j]) > 0]
    limit = min(corr_threshold, 1.0 - 1e-12)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.abs(np.corrcoef(data[:, keep], rowvar=False)) if len(keep) > 1 else np.ones((1, 1))
    corr = np.atleast_2d(np.nan_to_num(corr, nan=0.0))
    alive = list(range(len(keep)))
    while len(alive) > 1:
        sub = corr[np.ix_(alive, alive)].copy()
        np.fill_diagonal(sub, -np.inf)
        best = np.max(sub)
        if not best > limit:
            break
        i, j = divmod(int(np.argmax(sub)), len(alive))
        i, j = min(i, j), max(i, j)
        np.fill_diagonal(sub, 0.0)
        mean_i = sub[i].sum() / (len(alive) - 1)
        mean_j = sub[j].sum() / (len(alive) - 1)
        drop = i if mean_i > mean_j else j
        del alive[drop]
    return [cols[keep[a]] for a in alive]


def check_full_rank(Z: np.ndarray, names: Sequence[str], tol: float = 1e-10) -> None:
    """Raise :class:`SingularityError` naming the columns of the first linear dependency."""
    norms = np.linalg.norm(Z, axis=0)
    dead = [names[j] for j in np.flatnonzero(norms == 0)]
    if dead:
        raise SingularityError(f"regressor columns identically zero: {dead}", dead)
    _, R, piv = scipy.linalg.qr(Z / norms, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * diag[0]))
    if rank < Z.shape[1]:
        dep = piv[rank]
        basis = piv[:rank]
        coef, *_ = np.linalg.lstsq(Z[:, basis] / norms[basis], Z[:, dep] / norms[dep], rcond=None)
        involved = {names[dep]} | {names[basis[j]] for j in np.flatnonzero(np.abs(coef) > 1e-8)}
        involved_l = [c for c in names if c in involved]
        raise SingularityError(f"rank-deficient regressors; collinear columns: {involved_l}",
                               involved_l)


def r2_scores(y_true: np.ndarray, y_pred: np.ndarray) -> np.ndarray:
    ss_res = np.sum((y_true - y_pred) ** 2, axis=0)
    ss_tot = np.sum((y_true - y_true.mean(axis=0)) ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = 1.0 - ss_res / ss_tot
    return np.where(ss_tot > 0, r2, np.where(ss_res > 0, -np.inf, 1.0))


def fit_dmdc(tables, state_cols: Sequence[str], control_cols: Sequence[str] = (),
             standardize: bool = False) -> LinearModel:
    """Least-squares DMDc fit over all transition pairs of one or more tables.

    ``standardize`` rescales every regressor to unit standard deviation before
    the solve (conditioning only; the returned matrices are in original units).
    """
    state_cols, control_cols = list(state_cols), list(control_cols)
    X, U, Y = transition_pairs(tables, state_cols, control_cols)
    Z = np.hstack([X, U])
    if Z.shape[0] < Z.shape[1] + 1:
        raise SingularityError(f"{Z.shape[0]} transitions for {Z.shape[1]} regressors")
    check_full_rank(Z, state_cols + control_cols)
    scale = np.ones(Z.shape[1])
    if standardize:
        sd = Z.std(axis=0)
        scale = np.where(sd > 0, sd, 1.0)
    coef, *_ = scipy.linalg.lstsq(Z / scale, Y, lapack_driver="gelsy")
    coef = coef / scale[:, None]
    p = len(state_cols)
    A, B = coef[:p].T, coef[p:].T
    r2 = r2_scores(Y, Z @ coef)
    return LinearModel(A, B, state_cols, control_cols,
                       {c: float(v) for c, v in zip(state_cols, r2)})


def spectral_radius(A: np.ndarray) -> float:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("spectral radius needs a square matrix")
    if A.size == 0:
        return 0.0
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def rollout(model: LinearModel, x0: np.ndarray, controls: np.ndarray) -> DataTable:
    """Free-run the model from ``x0``; returns ``len(controls) + 1`` rows."""
    controls = np.asarray(controls, dtype=float).reshape(-1, len(model.control_cols))
    out = np.empty((len(controls) + 1, len(model.state_cols)))
    out[0] = x = np.asarray(x0, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        for t, u in enumerate(controls):
            x = model.A @ x + model.B @ u
            if not np.all(np.isfinite(x)):
                raise DivergenceError(t + 1)
            out[t + 1] = x
    return DataTable(model.state_cols, out, {c: "state" for c in model.state_cols})


@dataclass
class VariableQuality:
    r2: float
    true: np.ndarray
    predicted: np.ndarray
    residual_plus_mean: np.ndarray


def quality(tables, model: LinearModel) -> dict[str, VariableQuality]:
    """One-step-ahead quality data per state variable (what the usual quality plots show)."""
    X, U, Y = transition_pairs(tables, model.state_cols, model.control_cols)
    pred = model.predict(X, U)
    r2 = r2_scores(Y, pred)
    out = {}
    for k, name in enumerate(model.state_cols):
        y, yp = Y[:, k], pred[:, k]
        out[name] = VariableQuality(float(r2[k]), y, yp, y - yp + y.mean())
    return out


def quality_table(q: dict[str, VariableQuality]) -> DataTable:
    """Flatten quality series into a CSV-ready table (true, predicted, residual+mean per variable)."""
    names, cols = [], []
    for var, vq in q.items():
        names += [f"{var}__true", f"{var}__pred", f"{var}__resid_plus_mean"]
        cols += [vq.true, vq.predicted, vq.residual_plus_mean]
    return DataTable(names, np.column_stack(cols), {n: "state" for n in names})
