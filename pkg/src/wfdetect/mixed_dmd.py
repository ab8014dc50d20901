"""Penalized identification of reference dynamics plus activation-gated corrections.

For a subset of modules S, every non-empty sub-subset ("term") k gets a
corrective matrix A_k that is added to the reference matrix A whenever all
modules of k run their updated version:

    x[t+1] = A z[t] + sum_k delta[t, k] * A_k z[t] + eps[t]

where ``z`` stacks the modeled state and the imposed variables. The fit
minimizes

    p_eps * sum_t w_t |eps_t|^2  +  p_a * |A - A_prior|_1  +  sum_k p_k * |A_k|_1

and subsets are ranked by the optimal objective. Rows of one output variable
decouple, so every output is solved separately by coordinate descent.
"""

from __future__ import annotations

import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numba
import numpy as np

from .dmd import spectral_radius
from .table import DataTable, stack

Term = tuple[str, ...]


@dataclass(frozen=True)
class PenaltyWeights:
    p_eps: float = 10.0
    p_a: float = 0.01
    p_term: Mapping[int, float] = field(default_factory=lambda: {1: 0.02, 2: 0.04})

    def __post_init__(self) -> None:
        if not self.p_term:
            raise ValueError("p_term needs at least the order-1 weight")
        if self.p_eps <= 0 or self.p_a <= 0 or any(w <= 0 for w in self.p_term.values()):
            raise ValueError("all penalty weights must be > 0")
        orders = sorted(self.p_term)
        if orders[0] != 1 or orders != list(range(1, len(orders) + 1)):
            raise ValueError("p_term keys must be 1, 2, ... without gaps")
        ws = [self.p_term[o] for o in orders]
        if any(w <= self.p_a for w in ws):
            raise ValueError("corrective-term weights must exceed p_a")
        if any(b < a for a, b in zip(ws, ws[1:])):
            raise ValueError("corrective-term weights must be non-decreasing in order")

    def term(self, order: int) -> float:
        top = max(self.p_term)
        if order <= top:
            return float(self.p_term[order])
        # beyond the configured orders keep doubling
        return float(self.p_term[top]) * 2.0 ** (order - top)

    def scaled(self, c: float) -> "PenaltyWeights":
        return PenaltyWeights(self.p_eps * c, self.p_a * c,
                              {k: v * c for k, v in self.p_term.items()})


def enumerate_subsets(module_names: Sequence[str], q: int, up_to: bool = False) -> list[Term]:
    m = len(module_names)
    if not 1 <= q <= m:
        raise ValueError(f"q must lie in [1, {m}]")
    sizes = range(1, q + 1) if up_to else (q,)
    return [c for k in sizes for c in itertools.combinations(module_names, k)]


def terms(subset: Sequence[str]) -> list[Term]:
    if not subset:
        raise ValueError("subset must be non-empty")
    return [c for k in range(1, len(subset) + 1) for c in itertools.combinations(subset, k)]


def term_name(term: Term) -> str:
    return "×".join(term)


def build_activations(source, subset: Sequence[str], n_reference: int = 0) -> dict[Term, np.ndarray]:
    """Per-term 0/1 activation series: the product of the term's module Booleans.

    ``source`` is a DataTable with ``X_<module>`` columns or a Schedule;
    ``n_reference`` all-zero rows are prepended for stacked reference data.
    """
    if isinstance(source, DataTable):
        cols = {name: source[f"X_{name}"] for name in subset}
    else:
        names = list(source.module_names)
        cols = {name: source.versions[:, names.index(name)].astype(float) for name in subset}
    out = {}
    for term in terms(subset):
        delta = np.ones_like(next(iter(cols.values())))
        for name in term:
            delta = delta * cols[name]
        out[term] = np.r_[np.zeros(n_reference), delta]
    return out


# -- solver --------------------------------------------------------------------


@dataclass
class LassoResult:
    beta: np.ndarray
    objective: float
    iterations: int
    converged: bool
    history: list[float]


@numba.njit(cache=True)
def _sweeps(G, grad, gamma, lam, n_sweeps):
    K = gamma.shape[0]
    for _ in range(n_sweeps):
        for k in range(K):
            d = G[k, k]
            if d <= 0.0:
                continue
            old = gamma[k]
            rho = grad[k] + d * old
            thr = 0.5 * lam[k]
            if rho > thr:
                new = (rho - thr) / d
            elif rho < -thr:
                new = (rho + thr) / d
            else:
                new = 0.0
            if new != old:
                gamma[k] = new
                delta = new - old
                for j in range(K):
                    grad[j] -= G[j, k] * delta


def _polish(G: np.ndarray, c: np.ndarray, lam: np.ndarray, gamma: np.ndarray,
            objective) -> np.ndarray | None:
    """Feature-sign step toward the exact minimizer of the current sign face.

    Along the segment to the face minimizer the objective is convex and
    piecewise quadratic; the best of its zero crossings and end point is
    returned (None when the face system is singular or the support empty).
    """
    S = np.flatnonzero(gamma)
    if S.size == 0:
        return None
    sgn = np.sign(gamma[S])
    try:
        g_S = np.linalg.solve(G[np.ix_(S, S)], c[S] - 0.5 * lam[S] * sgn)
    except np.linalg.LinAlgError:
        return None
    target = np.zeros_like(gamma)
    target[S] = g_S
    if np.all(np.sign(g_S) == sgn):
        return target
    cur = gamma[S]
    flips = np.flatnonzero(np.sign(g_S) != sgn)
    best, best_f = None, np.inf
    for k in flips:
        s_k = cur[k] / (cur[k] - g_S[k])
        cand = gamma + s_k * (target - gamma)
        cand[S[k]] = 0.0
        f = objective(cand)
        if f < best_f:
            best, best_f = cand, f
    f_t = objective(target)
    return target if f_t < best_f else best


def _cd_quadratic(G: np.ndarray, c: np.ndarray, yy: float, lam: np.ndarray, gamma: np.ndarray,
                  tol: float, max_iter: int, polish_every: int = 5
                  ) -> tuple[np.ndarray, int, bool, list[float]]:
    """Coordinate descent on ``gᵀGg - 2cᵀg + yy + Σ lam|g|``.

    Every ``polish_every`` sweeps the exact minimizer on the current sign face
    is tried; it can only lower the objective, so iterates stay monotone.
    """
    G = np.ascontiguousarray(G, dtype=float)
    lam = np.ascontiguousarray(lam, dtype=float)
    gamma = np.array(gamma, dtype=float)
    grad = c - G @ gamma

    def obj(g: np.ndarray, gr: np.ndarray) -> float:
        # gᵀGg - 2cᵀg = -gᵀ(c - Gg) - cᵀg
        return float(yy - g @ gr - c @ g + lam @ np.abs(g))

    f = obj(gamma, grad)
    history = [f]
    for it in range(1, max_iter + 1):
        _sweeps(G, grad, gamma, lam, 1)
        f_new = obj(gamma, grad)
        if it % polish_every == 0:
            cand = _polish(G, c, lam, gamma, lambda g: obj(g, c - G @ g))
            if cand is not None:
                cand_grad = c - G @ cand
                f_cand = obj(cand, cand_grad)
                if f_cand < f_new:
                    gamma, grad, f_new = cand, cand_grad, f_cand
        history.append(f_new)
        if abs(f - f_new) <= tol * max(abs(f_new), 1e-300):
            return gamma, it, True, history
        f = f_new
    return gamma, max_iter, False, history


def weighted_lasso(X: np.ndarray, y: np.ndarray, penalties: np.ndarray, *,
                   p_eps: float = 1.0, row_weights: np.ndarray | None = None,
                   prior: np.ndarray | None = None, norm: str = "l2",
                   tol: float = 1e-8, max_iter: int = 10_000) -> LassoResult:
    """Minimize ``p_eps Σ w_t ρ(y_t - X_t β) + Σ_k penalties_k |β_k - prior_k|``.

    ``ρ`` is the square (``norm="l2"``) or the absolute value (``norm="l1"``).
    The L2 case is solved by cyclic coordinate descent with soft-thresholding;
    the L1 case by majorize-minimize reweighting, each outer step accepted
    only if the true objective decreases.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, K = X.shape
    w = np.ones(n) if row_weights is None else np.asarray(row_weights, dtype=float)
    prior = np.zeros(K) if prior is None else np.asarray(prior, dtype=float)
    lam = np.asarray(penalties, dtype=float) / p_eps
    y0 = y - X @ prior

    def true_objective(gamma: np.ndarray) -> float:
        r = y0 - X @ gamma
        fit = np.sum(w * r * r) if norm == "l2" else np.sum(w * np.abs(r))
        return float(p_eps * fit + np.sum(np.asarray(penalties) * np.abs(gamma)))

    if norm == "l2":
        Xw = X * w[:, None]
        G = Xw.T @ X
        c = Xw.T @ y0
        yy = float(y0 @ (w * y0))
        gamma, its, ok, hist = _cd_quadratic(G, c, yy, lam, np.zeros(K), tol, max_iter)
        history = [p_eps * h for h in hist]
        return LassoResult(gamma + prior, true_objective(gamma), its, ok, history)

    if norm != "l1":
        raise ValueError(f"unknown residual norm: {norm}")
    gamma = np.zeros(K)
    f = true_objective(gamma)
    history = [f]
    scale = max(float(np.median(np.abs(y0))), 1e-12)
    eps = 1e-9 * scale
    converged = False
    its = 0
    inner_budget = max(max_iter // 20, 50)
    for its in range(1, max_iter + 1):
        r = np.abs(y0 - X @ gamma)
        cw = np.maximum(r, eps)
        # |r| <= r^2 / (2c) + c / 2
        ww = w / (2.0 * cw)
        Xw = X * ww[:, None]
        G = Xw.T @ X
        c = Xw.T @ y0
        yy = float(y0 @ (ww * y0))
        cand, *_ = _cd_quadratic(G, c, yy, lam, gamma, tol * 0.1, inner_budget)
        f_new = true_objective(cand)
        if f_new >= f:
            converged = True
            break
        gamma = cand
        history.append(f_new)
        if f - f_new <= tol * max(abs(f_new), 1e-300):
            f = f_new
            converged = True
            break
        f = f_new
    return LassoResult(gamma + prior, f, its, converged, history)


# -- subset models ---------------------------------------------------------------


@dataclass
class SubsetModel:
    subset: Term
    terms: list[Term]
    state_cols: list[str]
    regressor_cols: list[str]
    A: np.ndarray                     # outputs x regressors, fitted (scaled) units
    corrections: dict[Term, np.ndarray]
    scale: np.ndarray                 # per-regressor divisor used during the fit
    prior: str
    weights: PenaltyWeights
    norm: str
    rss: float
    l1_a: float
    l1_terms: dict[Term, float]
    score: float
    converged: bool
    iterations: int
    cpu: float = 0.0
    radii: dict[tuple[int, ...], float] = field(default_factory=dict)

    @property
    def l1_corrections(self) -> float:
        return float(sum(self.l1_terms.values()))

    def prior_matrix(self) -> np.ndarray:
        P = np.zeros_like(self.A)
        if self.prior == "identity":
            P[:, : len(self.state_cols)] = np.eye(len(self.state_cols))
        return P

    def recompute_score(self) -> float:
        w = self.weights
        return (w.p_eps * self.rss + w.p_a * self.l1_a
                + sum(w.term(len(t)) * self.l1_terms[t] for t in self.terms))

    def to_dict(self) -> dict:
        return {
            "subset": list(self.subset),
            "state_cols": self.state_cols,
            "regressor_cols": self.regressor_cols,
            "scale": self.scale.tolist(),
            "prior": self.prior,
            "norm": self.norm,
            "weights": {"p_eps": self.weights.p_eps, "p_a": self.weights.p_a,
                        "p_term": {str(k): v for k, v in self.weights.p_term.items()}},
            "A": self.A.tolist(),
            "corrections": {term_name(t): m.tolist() for t, m in self.corrections.items()},
            "rss": self.rss, "l1_a": self.l1_a,
            "l1_terms": {term_name(t): v for t, v in self.l1_terms.items()},
            "score": self.score, "converged": self.converged,
            "iterations": self.iterations, "cpu": self.cpu,
            "radii": {"".join(map(str, k)): v for k, v in self.radii.items()},
        }


def _as_list(tables) -> list[DataTable]:
    return [tables] if isinstance(tables, DataTable) else list(tables)


def fit_subset(reference, doe, subset: Sequence[str], weights: PenaltyWeights | None = None,
               norm: str = "l2", state_cols: Sequence[str] | None = None,
               imposed_cols: Sequence[str] | None = None, prior: str = "identity",
               w_ref: float = 10.0, scale: bool = True, tol: float = 1e-8,
               max_iter: int = 10_000) -> SubsetModel:
    """Fit reference dynamics plus corrective matrices for one module subset.

    ``reference`` holds the all-reference run(s) (weighted by ``w_ref`` in the
    residual term); ``doe`` holds the version-switching run(s) whose
    ``X_<module>`` columns drive the activations.
    """
    t0 = time.process_time()
    weights = weights or PenaltyWeights()
    if prior not in ("identity", "zero"):
        raise ValueError(f"unknown prior: {prior}")
    subset = tuple(subset)
    refs, does = _as_list(reference), _as_list(doe)
    first = (refs + does)[0]
    state_cols = list(state_cols) if state_cols is not None else first.columns_of("state")
    imposed_cols = list(imposed_cols) if imposed_cols is not None else first.columns_of("imposed")
    regs = state_cols + imposed_cols
    p, K = len(state_cols), len(regs)

    ref_stack, ref_valid = stack(refs) if refs else (None, np.zeros(0, bool))
    doe_stack, doe_valid = stack(does)
    mats, valids, wts = [], [], []
    term_list = terms(subset)
    if ref_stack is not None:
        mats.append(ref_stack.matrix(regs))
        valids.append(ref_valid)
        wts.append(np.full(len(ref_stack), float(w_ref)))
    mats.append(doe_stack.matrix(regs))
    valids.append(doe_valid)
    wts.append(np.ones(len(doe_stack)))
    Z_all = np.vstack(mats)
    valid = np.concatenate(valids)
    row_w = np.concatenate(wts)
    n_ref = len(ref_stack) if ref_stack is not None else 0
    act_all = build_activations(doe_stack, subset, n_reference=n_ref)

    idx = np.flatnonzero(valid)
    sc = np.ones(K)
    if scale:
        sd = Z_all.std(axis=0)
        sc = np.where(sd > 0, sd, 1.0)
    Zs = Z_all / sc
    Z, Y, w = Zs[idx], Zs[idx + 1, :p], row_w[idx]

    live = [t for t in term_list if np.any(act_all[t][idx] != 0)]
    blocks = [Z] + [Z * act_all[t][idx][:, None] for t in live]
    X = np.hstack(blocks)
    pen = np.concatenate([np.full(K, weights.p_a)] + [np.full(K, weights.term(len(t))) for t in live])

    A = np.zeros((p, K))
    corr = {t: np.zeros((p, K)) for t in term_list}
    prior_row = np.zeros(X.shape[1])
    rss = 0.0
    converged, iters = True, 0
    for i in range(p):
        prior_row[:] = 0.0
        if prior == "identity":
            prior_row[i] = 1.0
        res = weighted_lasso(X, Y[:, i], pen, p_eps=weights.p_eps, row_weights=w,
                             prior=prior_row, norm=norm, tol=tol, max_iter=max_iter)
        beta = res.beta
        A[i] = beta[:K]
        for j, t in enumerate(live):
            corr[t][i] = beta[K * (j + 1): K * (j + 2)]
        r = Y[:, i] - X @ beta
        rss += float(np.sum(w * r * r) if norm == "l2" else np.sum(w * np.abs(r)))
        converged &= res.converged
        iters = max(iters, res.iterations)

    P = np.zeros((p, K))
    if prior == "identity":
        P[:, :p] = np.eye(p)
    l1_a = float(np.abs(A - P).sum())
    l1_terms = {t: float(np.abs(corr[t]).sum()) for t in term_list}
    model = SubsetModel(subset, term_list, state_cols, regs, A, corr, sc, prior, weights,
                        norm, rss, l1_a, l1_terms, 0.0, converged, iters)
    model.score = model.recompute_score()
    model.radii = eigen_report(model)
    model.cpu = time.process_time() - t0
    return model


def eigen_report(model: SubsetModel) -> dict[tuple[int, ...], float]:
    """Spectral radius of the state block of A + Σ active corrections, per activation pattern."""
    p = len(model.state_cols)
    out = {}
    q = len(model.subset)
    for pattern in itertools.product((0, 1), repeat=q):
        on = {name for name, bit in zip(model.subset, pattern) if bit}
        M = model.A[:, :p].copy()
        for t in model.terms:
            if set(t) <= on:
                M += model.corrections[t][:, :p]
        # q-tuple ordered like the subset; (0,..,0) is the reference
        out[pattern] = spectral_radius(M)
    return out


@dataclass
class RankEntry:
    subset: Term
    status: str
    model: SubsetModel | None = None
    error: str = ""

    @property
    def name(self) -> str:
        return " . ".join(self.subset)

    def sort_key(self):
        if self.model is None:
            return (1, np.inf, np.inf, self.subset)
        return (0, self.model.score, self.model.l1_corrections, self.subset)


@dataclass
class Ranking:
    entries: list[RankEntry]

    @property
    def top(self) -> Term:
        return self.entries[0].subset

    def rows(self) -> list[dict]:
        out = []
        for e in self.entries:
            m = e.model
            out.append({
                "Combination": e.name, "Status": e.status,
                "RSS": m.rss if m else float("nan"),
                "L1_Aref": m.l1_a if m else float("nan"),
                "L1_Am": m.l1_corrections if m else float("nan"),
                "TotalScore": m.score if m else float("nan"),
                "CPU": m.cpu if m else float("nan"),
            })
        return out


def rank_combinations(reference, doe, subsets: Sequence[Sequence[str]],
                      weights: PenaltyWeights | None = None, norm: str = "l2",
                      threads: int = 1, **fit_kwargs) -> Ranking:
    """Fit every subset and sort ascending by total score.

    Ties go to the smaller total correction norm, then lexicographic order.
    A failing subset is recorded with its error and does not stop the others.
    """
    def run(subset):
        subset = tuple(subset)
        try:
            model = fit_subset(reference, doe, subset, weights, norm, **fit_kwargs)
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            return RankEntry(subset, "FAILED", None, str(exc))
        return RankEntry(subset, "OK" if model.converged else "NOT_CONVERGED", model)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            entries = list(pool.map(run, subsets))
    else:
        entries = [run(s) for s in subsets]
    return Ranking(sorted(entries, key=RankEntry.sort_key))


def format_matrix(M: np.ndarray, row_names: Sequence[str], col_names: Sequence[str],
                  floor: float = 5e-3, diagonal_mark: bool = False) -> str:
    """Render a matrix with entries below ``floor`` in magnitude shown as '-'."""
    width = max(8, *(len(c) for c in col_names)) if col_names else 8
    lead = max((len(r) for r in row_names), default=0)
    lines = [" " * lead + " " + " ".join(c.rjust(width) for c in col_names)]
    for i, r in enumerate(row_names):
        cells = []
        for j in range(len(col_names)):
            v = M[i, j]
            s = "-" if abs(v) < floor else f"{v:.3f}"
            if diagonal_mark and i == j:
                s = f"[{s}]"
            cells.append(s.rjust(width))
        lines.append(r.ljust(lead) + " " + " ".join(cells))
    return "\n".join(lines)
