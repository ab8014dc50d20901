"""The two classical approaches: module-by-module validation and whole-run DoE sensitivity."""

from __future__ import annotations

import csv
import itertools
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.stats

from . import sim_workflow
from .dmd import check_full_rank
from .doe import DoeDesign
from .sim_workflow import STATE_VARIABLES, DrivingCycle, WorkflowConfig
from .table import DataTable


CRITERIA: dict[str, Callable[[DataTable], float]] = {
    "final_soc": lambda T: float(T["B_SOC"][-1]),
    "battery_energy_losses": lambda T: float(T["B_EnergyLosses"][-1]),
    "propelling_energy": lambda T: float(T["G_PropellingEnergy"][-1]),
}


@dataclass
class SimulationLog:
    """Every whole-cycle simulation a baseline executed, in order."""
    runs: list[dict] = field(default_factory=list)

    def record(self, label: str, versions: Sequence[int], seconds: float) -> None:
        self.runs.append({"label": label, "versions": [int(v) for v in versions],
                          "seconds": round(seconds, 6)})

    def __len__(self) -> int:
        return len(self.runs)


def _run(config: WorkflowConfig, cycle: DrivingCycle, versions, log: SimulationLog,
         label: str) -> DataTable:
    t = time.perf_counter()
    table = sim_workflow.simulate(config, cycle, np.asarray(versions, dtype=float))
    log.record(label, versions, time.perf_counter() - t)
    return table


# -- one module at a time -----------------------------------------------------

@dataclass
class ModuleDifference:
    sum_squares: dict[str, float]
    max_abs: dict[str, float]

    @property
    def total(self) -> float:
        return float(sum(self.sum_squares.values()))


@dataclass
class OneAtATime:
    modules: dict[str, ModuleDifference]
    log: SimulationLog

    @property
    def n_simulations(self) -> int:
        return len(self.log)


def one_at_a_time(config: WorkflowConfig, cycle: DrivingCycle,
                  variables: Sequence[str] = STATE_VARIABLES) -> OneAtATime:
    """Reference run plus one run per module with only that module updated."""
    log = SimulationLog()
    m = config.m
    ref = _run(config, cycle, [0] * m, log, "reference")
    base = ref.matrix(list(variables))
    out = {}
    for j, name in enumerate(config.module_names):
        flags = [0] * m
        flags[j] = 1
        diff = base - _run(config, cycle, flags, log, name).matrix(list(variables))
        out[name] = ModuleDifference(
            {v: float(np.sum(diff[:, k] ** 2)) for k, v in enumerate(variables)},
            {v: float(np.max(np.abs(diff[:, k]))) for k, v in enumerate(variables)})
    return OneAtATime(out, log)


# -- DoE sensitivity analysis ---------------------------------------------------

Term = tuple[int, ...]


def interaction_terms(m: int, max_order: int) -> list[Term]:
    out: list[Term] = []
    for q in range(1, min(max_order, m) + 1):
        out.extend(itertools.combinations(range(m), q))
    return out


def term_matrix(rows: np.ndarray, terms: Sequence[Term]) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    cols = [np.ones(len(rows))] + [np.prod(rows[:, list(t)], axis=1) for t in terms]
    return np.column_stack(cols)


@dataclass
class SensitivityModel:
    module_names: list[str]
    criterion: str
    terms: list[Term]
    coef: np.ndarray                 # intercept first, then one per term
    pvalues: np.ndarray
    design: np.ndarray
    response: np.ndarray
    target: float
    x_opt: np.ndarray
    predicted_opt: float
    observed_opt: float
    tolerance: float
    log: SimulationLog
    removed: list[Term] = field(default_factory=list)

    @property
    def alpha0(self) -> float:
        return float(self.coef[0])

    @property
    def validation_residual(self) -> float:
        return abs(self.observed_opt - self.predicted_opt)

    @property
    def model_incomplete(self) -> bool:
        return self.validation_residual > self.tolerance

    @property
    def selected_modules(self) -> list[str]:
        return [n for n, x in zip(self.module_names, self.x_opt) if x]

    def term_name(self, term: Term) -> str:
        return "×".join(self.module_names[j] for j in term)

    def predict(self, rows: np.ndarray) -> np.ndarray:
        return term_matrix(rows, self.terms) @ self.coef

    def fitted_residual(self) -> float:
        """Largest design-point residual relative to the response scale."""
        scale = max(float(np.max(np.abs(self.response))), np.finfo(float).tiny)
        return float(np.max(np.abs(self.predict(self.design) - self.response)) / scale)

    def coefficient_rows(self) -> list[dict]:
        names = ["intercept"] + [self.term_name(t) for t in self.terms]
        return [{"term": n, "coefficient": float(c), "p_value": float(p)}
                for n, c, p in zip(names, self.coef, self.pvalues)]

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        coef_path = out_dir / "sensitivity_coefficients.csv"
        with coef_path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, ["term", "coefficient", "p_value"])
            w.writeheader()
            w.writerows(self.coefficient_rows())
        manifest = out_dir / "sensitivity_manifest.json"
        manifest.write_text(json.dumps({
            "criterion": self.criterion,
            "modules": self.module_names,
            "simulations": self.log.runs,
            "removed_terms": [self.term_name(t) for t in self.removed],
            "x_opt": self.selected_modules,
            "predicted_opt": self.predicted_opt,
            "observed_opt": self.observed_opt,
            "tolerance": self.tolerance,
            "model_incomplete": self.model_incomplete,
        }, indent=1))
        return {"coefficients": coef_path, "manifest": manifest}


def _fit(F: np.ndarray, y: np.ndarray, names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """OLS coefficients and classical two-sided t-test p-values (NaN when no residual df)."""
    check_full_rank(F, names)
    coef, *_ = scipy.linalg.lstsq(F, y, lapack_driver="gelsy")
    df = F.shape[0] - F.shape[1]
    if df <= 0:
        return coef, np.full(len(coef), np.nan)
    resid = y - F @ coef
    s2 = float(resid @ resid) / df
    cov = s2 * np.linalg.inv(F.T @ F)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        tstat = np.where(se > 0, coef / se, np.where(coef == 0, 0.0, np.inf))
    return coef, 2.0 * scipy.stats.t.sf(np.abs(tstat), df)


def _removable(terms: Sequence[Term], hierarchical: bool) -> list[int]:
    if not hierarchical:
        return list(range(len(terms)))
    return [k for k, t in enumerate(terms)
            if not any(set(t) < set(u) for u in terms)]


def select_terms(design: np.ndarray, y: np.ndarray, terms: Sequence[Term],
                 names: Sequence[str] | None = None, p_remove: float = 0.05,
                 zero_tol: float = 1e-9, hierarchical: bool = True):
    """Backward elimination.

    Terms whose coefficient is negligible (``|coef| <= zero_tol * max|y|``)
    go first, one at a time, which is what makes an interpolating fit with
    no residual degrees of freedom reducible. Afterwards the term with the
    largest p-value above ``p_remove`` is dropped until none remains. With
    ``hierarchical`` only terms that are not contained in another included
    term may be dropped. The intercept is never dropped.
    """
    m = design.shape[1]
    names = list(names) if names is not None else [f"X{j}" for j in range(m)]
    terms = list(terms)
    removed: list[Term] = []
    scale = max(float(np.max(np.abs(y))), np.finfo(float).tiny)

    def labels(ts):
        return ["intercept"] + ["×".join(names[j] for j in t) for t in ts]

    while True:
        F = term_matrix(design, terms)
        coef, pv = _fit(F, y, labels(terms))
        cand = _removable(terms, hierarchical)
        if not cand:
            return terms, coef, pv, removed
        small = [k for k in cand if abs(coef[k + 1]) <= zero_tol * scale]
        if small:
            k = max(small, key=lambda k: (len(terms[k]), -abs(coef[k + 1])))
        else:
            scores = [(pv[k + 1], k) for k in cand if np.isfinite(pv[k + 1]) and pv[k + 1] > p_remove]
            if not scores:
                return terms, coef, pv, removed
            k = max(scores)[1]
        removed.append(terms.pop(k))


def search_x_opt(predict: Callable[[np.ndarray], np.ndarray], m: int, target: float,
                 tolerance: float, cap: int = 20) -> np.ndarray:
    """Exhaustive search for the version vector whose predicted deviation best matches ``target``.

    Vectors within ``tolerance`` of the target are preferred, then the
    smallest number of switched modules, then the smaller mismatch.
    """
    if m > cap:
        raise ValueError(f"exhaustive search over 2^{m} vectors exceeds the cap 2^{cap}")
    codes = np.arange(2 ** m)
    X = ((codes[:, None] >> np.arange(m)) & 1).astype(float)
    miss = np.abs(predict(X) - target)
    support = X.sum(axis=1)
    order = np.lexsort((miss, support, miss > tolerance))
    return X[order[0]].astype(int)


def sensitivity_doe(config: WorkflowConfig, cycle: DrivingCycle, design: DoeDesign,
                    criterion: str = "battery_energy_losses", max_interaction_order: int = 2,
                    p_remove: float = 0.05, hierarchical: bool = True,
                    rel_tolerance: float = 1e-6, selection: bool = True) -> SensitivityModel:
    """Run every design row as a whole simulation and explain the criterion deviation.

    The deviation target is the all-updated run ``W1 - W0``, taken from the
    design when it contains the all-ones row and simulated otherwise.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}; choose from {sorted(CRITERIA)}")
    if list(design.module_names) != list(config.module_names):
        raise ValueError("design modules differ from the workflow modules")
    reduce = CRITERIA[criterion]
    m = config.m
    log = SimulationLog()
    ref = reduce(_run(config, cycle, [0] * m, log, "reference"))
    rows = design.rows.astype(float)
    y = np.array([reduce(_run(config, cycle, r, log, f"design[{i}]"))
                  for i, r in enumerate(rows)]) - ref
    names = list(config.module_names)
    terms = interaction_terms(m, max_interaction_order)
    if selection:
        terms, coef, pv, removed = select_terms(rows, y, terms, names, p_remove,
                                                hierarchical=hierarchical)
    else:
        labels = ["intercept"] + ["×".join(names[j] for j in t) for t in terms]
        coef, pv = _fit(term_matrix(rows, terms), y, labels)
        removed = []

    ones = np.all(rows == 1, axis=1)
    if ones.any():
        target = float(y[np.flatnonzero(ones)[0]])
    else:
        target = reduce(_run(config, cycle, [1] * m, log, "updated")) - ref
    scale = max(float(np.max(np.abs(np.r_[y, target]))), np.finfo(float).tiny)
    tol = rel_tolerance * scale

    def predict(X):
        return term_matrix(X, terms) @ coef

    x_opt = search_x_opt(predict, m, target, tol)
    predicted = float(predict(x_opt[None, :])[0])
    observed = reduce(_run(config, cycle, x_opt, log, "validation")) - ref
    return SensitivityModel(names, criterion, terms, coef, pv, rows, y, target, x_opt,
                            predicted, observed, tol, log, removed)
