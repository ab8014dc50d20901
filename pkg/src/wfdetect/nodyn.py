"""Two-simulation detection: regress the one-step deviation from the reference workflow.

Every row of T0(DoE) is restarted for one step under the all-reference
workflow (the oracle table T0*). The deviation T0(DoE)[t+1] - T0*[t] is then
explained, response by response, by imposed variables, module Booleans and
the lagged deviation; modules whose main effect is both large enough and
significant are retained.
"""

from __future__ import annotations

import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.stats

from .dmd import SingularityError, check_full_rank
from .sim_workflow import (IMPOSED, INTERNAL_VARIABLES, STATE_VARIABLES, DrivingCycle,
                           WorkflowConfig, WorkflowState, step)
from .table import DataTable, SchemaError


class LeverageError(ArithmeticError):
    def __init__(self, row: int):
        super().__init__(f"row {row} has leverage 1; HC3 covariance is undefined")
        self.row = row


# -- oracle ------------------------------------------------------------------

def _oracle_rows(values: np.ndarray, setpoints: np.ndarray, m: int, config: WorkflowConfig,
                 offset: int) -> np.ndarray:
    names = STATE_VARIABLES + INTERNAL_VARIABLES
    zeros = [0] * m
    out = np.empty((len(values), len(names)))
    for k, (vals, sp) in enumerate(zip(values, setpoints)):
        state = WorkflowState(**dict(zip(names, vals.tolist())))
        out[k] = step(state, float(sp), zeros, config, offset + k).as_tuple()
    return out


def build_oracle(t0doe: DataTable, config: WorkflowConfig, cycle: DrivingCycle | None = None,
                 workers: int = 1) -> DataTable:
    """Restart every row but the last for one step under the all-reference workflow.

    Row ``t`` of the result is the reference prediction of row ``t + 1``. The
    setpoint is read from the table, or from ``cycle`` when given.
    """
    names = list(STATE_VARIABLES + INTERNAL_VARIABLES)
    missing = [c for c in names if c not in t0doe]
    if missing:
        raise SchemaError(f"table lacks columns needed for a restart: {missing}")
    n = len(t0doe)
    if cycle is not None:
        if cycle.n != n:
            raise ValueError(f"cycle has {cycle.n} steps, table has {n} rows")
        setpoints = cycle.speed_setpoint
    else:
        setpoints = t0doe[IMPOSED]
    values = t0doe.matrix(names)[:-1]
    setpoints = np.asarray(setpoints, dtype=float)[:-1]
    if workers > 1 and len(values) > 1:
        chunks = np.array_split(np.arange(len(values)), workers)
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_oracle_rows, [values[c] for c in chunks],
                                  [setpoints[c] for c in chunks], [config.m] * len(chunks),
                                  [config] * len(chunks), [int(c[0]) if len(c) else 0
                                                           for c in chunks]))
        out = np.vstack(parts)
    else:
        out = _oracle_rows(values, setpoints, config.m, config, 0)
    return DataTable(names, out)


# -- regression dataset -----------------------------------------------------

@dataclass
class RegressionDataset:
    """Responses and per-response design matrices.

    ``common`` holds the regressors shared by every response (intercept,
    imposed variables, Booleans and their interactions); ``lags`` holds the
    lagged deviations. With ``lag_mode="own"`` each response only sees its
    own lag, with ``"all"`` every lag enters every regression.
    """
    response_cols: list[str]
    Y: np.ndarray
    common_names: list[str]
    common: np.ndarray
    lags: np.ndarray
    rows: np.ndarray
    module_names: list[str]
    lag_mode: str = "own"

    def __post_init__(self) -> None:
        names = self.common_names + [f"lag_{c}" for c in self.response_cols]
        if len(set(names)) != len(names):
            raise ValueError("regressor names must be unique")

    @property
    def n(self) -> int:
        return len(self.Y)

    def design(self, k: int) -> tuple[np.ndarray, list[str]]:
        if self.lag_mode == "own":
            return (np.hstack([self.common, self.lags[:, k:k + 1]]),
                    self.common_names + [f"lag_{self.response_cols[k]}"])
        return (np.hstack([self.common, self.lags]),
                self.common_names + [f"lag_{c}" for c in self.response_cols])


def boolean_terms(module_names: Sequence[str], order: int) -> list[tuple[str, ...]]:
    out: list[tuple[str, ...]] = []
    for q in range(1, min(order, len(module_names)) + 1):
        out.extend(itertools.combinations(module_names, q))
    return out


def build_dataset(t0doe: DataTable, t0star: DataTable, segment: np.ndarray | None = None,
                  interaction_order: int = 2, include_imposed_deltas: bool = True,
                  include_cross_terms: bool = False, response_cols: Sequence[str] | None = None,
                  lag_mode: str = "own") -> RegressionDataset:
    """Assemble the deviation regression.

    Transition ``t -> t+1`` is dropped when a schedule segment boundary falls
    between ``t`` and ``t + 1``. ``segment`` gives the segment index per row
    (``Schedule.segment``); when omitted, segments are recovered from changes
    of the Boolean columns.
    """
    n = len(t0doe)
    if len(t0star) != n - 1:
        raise ValueError(f"oracle table must have {n - 1} rows, got {len(t0star)}")
    if lag_mode not in ("own", "all"):
        raise ValueError(f"unknown lag_mode: {lag_mode}")
    resp = list(response_cols) if response_cols is not None else [
        c for c in STATE_VARIABLES if c in t0doe]
    bool_cols = t0doe.columns_of("boolean")
    modules = [c[2:] for c in bool_cols]
    flags = t0doe.matrix(bool_cols)
    if segment is None:
        change = np.r_[True, np.any(flags[1:] != flags[:-1], axis=1)]
        segment = np.cumsum(change) - 1
    segment = np.asarray(segment)
    if len(segment) != n:
        raise ValueError("segment index must have one entry per row")

    dev = np.zeros((n, len(resp)))
    dev[1:] = t0doe.matrix(resp)[1:] - t0star.matrix(resp)
    t = np.arange(n - 1)
    keep = t[segment[t] == segment[t + 1]]

    names = ["intercept"]
    cols = [np.ones(n)]
    imposed = t0doe.columns_of("imposed")
    for c in imposed:
        names.append(c)
        cols.append(t0doe[c])
        if include_imposed_deltas:
            names.append(f"d_{c}")
            cols.append(np.r_[0.0, np.diff(t0doe[c])])
    idx = {m: j for j, m in enumerate(modules)}
    bool_names = []
    for term in boolean_terms(modules, interaction_order):
        name = "×".join(term)
        names.append(name)
        bool_names.append(name)
        cols.append(np.prod(flags[:, [idx[m] for m in term]], axis=1))
    if include_cross_terms:
        for c in imposed:
            for m in modules:
                names.append(f"{c}×{m}")
                cols.append(t0doe[c] * flags[:, idx[m]])
    common = np.column_stack(cols)
    return RegressionDataset(resp, dev[keep + 1], names, common[keep], dev[keep], keep,
                             modules, lag_mode)


# -- estimation --------------------------------------------------------------

@dataclass
class OlsFit:
    regressors: list[str]
    coef: np.ndarray
    residuals: np.ndarray
    X: np.ndarray = field(repr=False)
    dropped: list[str] = field(default_factory=list)


def ols(X: np.ndarray, y: np.ndarray, names: Sequence[str]) -> OlsFit:
    """Least squares through a pivoted QR; raises when X lacks full column rank."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] <= X.shape[1]:
        raise SingularityError(f"{X.shape[0]} rows for {X.shape[1]} regressors", list(names))
    check_full_rank(X, names)
    coef, *_ = scipy.linalg.lstsq(X, y, lapack_driver="gelsy")
    return OlsFit(list(names), coef, y - X @ coef, X)


def ols_fit(dataset: RegressionDataset) -> list[OlsFit]:
    """One regression per response.

    A column that is identically zero (a Boolean term never switched on, or
    the lag of a response that never deviates) carries no information and is
    left out of that response's design; its coefficient is reported as 0.
    """
    fits = []
    for k in range(len(dataset.response_cols)):
        X, names = dataset.design(k)
        dead = [j for j in range(X.shape[1]) if not np.any(X[:, j])]
        if dead:
            keep = [j for j in range(X.shape[1]) if j not in dead]
            fit = ols(X[:, keep], dataset.Y[:, k], [names[j] for j in keep])
            fit.dropped = [names[j] for j in dead]
        else:
            fit = ols(X, dataset.Y[:, k], names)
        fits.append(fit)
    return fits


def hc3_covariance(X: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    """(X'X)^-1 X' diag(e_i^2 / (1 - h_ii)^2) X (X'X)^-1."""
    Q, R = np.linalg.qr(X)
    h = np.einsum("ij,ij->i", Q, Q)
    bad = np.flatnonzero(h >= 1.0 - 1e-12)
    if len(bad):
        raise LeverageError(int(bad[0]))
    Rinv = scipy.linalg.solve_triangular(R, np.eye(R.shape[0]))
    bread = Rinv @ Rinv.T
    u = residuals / (1.0 - h)
    meat = (X * (u * u)[:, None]).T @ X
    return bread @ meat @ bread


def hc3_pvalues(fit: OlsFit) -> tuple[np.ndarray, np.ndarray]:
    """Two-sided p-values (normal reference) and HC3 standard errors."""
    se = np.sqrt(np.maximum(np.diag(hc3_covariance(fit.X, fit.residuals)), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, fit.coef / se, np.where(fit.coef == 0, 0.0, np.inf))
    return 2.0 * scipy.stats.norm.sf(np.abs(z)), se


# -- detection ---------------------------------------------------------------

@dataclass
class DetectionGrid:
    responses: list[str]
    modules: list[str]
    coef: np.ndarray        # responses x modules (main effects)
    pvalue: np.ndarray
    floor: np.ndarray       # per response
    alpha: float
    retained_cells: np.ndarray
    bonferroni: bool = False

    @property
    def retained(self) -> list[str]:
        return [m for j, m in enumerate(self.modules) if self.retained_cells[:, j].any()]

    def _table(self, cells: np.ndarray, fmt) -> list[list[str]]:
        return [[r] + [fmt(i, j) for j in range(len(self.modules))]
                for i, r in enumerate(self.responses)]

    def coef_rows(self) -> list[list[str]]:
        return self._table(self.coef, lambda i, j: f"{self.coef[i, j]:.6g}")

    def pvalue_rows(self) -> list[list[str]]:
        return self._table(self.pvalue, lambda i, j: f"{self.pvalue[i, j]:.6g}")

    def retained_rows(self) -> list[list[str]]:
        return self._table(self.retained_cells, lambda i, j: (
            f"{self.coef[i, j]:.3f}" if self.retained_cells[i, j] else "-"))

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        import csv
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, rows in (("nodyn_coefficients", self.coef_rows()),
                           ("nodyn_pvalues", self.pvalue_rows()),
                           ("nodyn_retained", self.retained_rows())):
            path = out_dir / f"{name}.csv"
            with path.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["response"] + self.modules)
                w.writerows(rows)
            paths[name] = path
        path = out_dir / "nodyn_summary.json"
        path.write_text(json.dumps(self.summary(), indent=1))
        paths["nodyn_summary"] = path
        return paths

    def summary(self) -> dict:
        return {"retained": self.retained, "alpha": self.alpha, "bonferroni": self.bonferroni,
                "modules": self.modules, "responses": self.responses,
                "coef_floor": dict(zip(self.responses, self.floor.tolist()))}


def detect(dataset: RegressionDataset, fits: Sequence[OlsFit] | None = None, alpha: float = 0.1,
           coef_floor: float | np.ndarray | None = None, floor_rel: float = 1e-3,
           bonferroni: bool = False) -> DetectionGrid:
    """Keep a (response, module) cell when p < alpha and |coef| > floor.

    The default floor is ``floor_rel`` times the standard deviation of each
    response column. With ``bonferroni`` the threshold becomes alpha divided
    by the number of responses.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    fits = list(fits) if fits is not None else ols_fit(dataset)
    modules = dataset.module_names
    p = len(dataset.response_cols)
    coef = np.zeros((p, len(modules)))
    pval = np.ones((p, len(modules)))
    for i, fit in enumerate(fits):
        pv, _ = hc3_pvalues(fit)
        for j, m in enumerate(modules):
            if m in fit.regressors:
                k = fit.regressors.index(m)
                coef[i, j], pval[i, j] = fit.coef[k], pv[k]
    if coef_floor is None:
        floor = floor_rel * dataset.Y.std(axis=0)
    else:
        floor = np.broadcast_to(np.asarray(coef_floor, dtype=float), (p,)).copy()
    level = alpha / p if bonferroni else alpha
    cells = (pval < level) & (np.abs(coef) > floor[:, None])
    return DetectionGrid(list(dataset.response_cols), list(modules), coef, pval, floor, alpha,
                         cells, bonferroni)


def run(t0doe: DataTable, config: WorkflowConfig, segment: np.ndarray | None = None,
        alpha: float = 0.1, workers: int = 1, **dataset_kwargs) -> DetectionGrid:
    """Oracle, dataset, fits and detection in one call."""
    star = build_oracle(t0doe, config, workers=workers)
    ds = build_dataset(t0doe, star, segment, **dataset_kwargs)
    return detect(ds, alpha=alpha)
