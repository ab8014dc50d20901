"""Synthetic data generators and oracles shared by the test modules."""

import itertools

import numpy as np

from wfdetect.table import DataTable

MODULES = ("Battery", "Motor", "Driveline", "Glider")


def piecewise_linear(rng, n=1200, p=3, c=3, delta_scale=0.1, seg=20, active="Battery"):
    """Reference run plus a switching run whose dynamics gain ``dA`` when ``active`` is on."""
    Q, _ = np.linalg.qr(rng.normal(size=(p, p)))
    A = Q @ np.diag(rng.uniform(0.6, 0.9, p)) @ Q.T
    B = rng.normal(size=(p, c))
    dA = delta_scale * rng.normal(size=(p, p))
    rows = np.array(list(itertools.product((0, 1), repeat=len(MODULES))))[:, ::-1]
    seg_rows = rows[np.arange(n // seg) % len(rows)]
    X_doe = np.repeat(seg_rows, seg, axis=0)

    def run(flags):
        U = rng.normal(size=(n, c))
        x = np.zeros((n, p))
        x[0] = rng.normal(size=p)
        j = MODULES.index(active)
        for t in range(n - 1):
            At = A + dA * flags[t, j]
            x[t + 1] = At @ x[t] + B @ U[t]
        names = [f"x{k}" for k in range(p)]
        ctrl = [f"u{k}" for k in range(c)]
        kinds = {**{k: "state" for k in names}, **{k: "imposed" for k in ctrl}}
        cols = names + ctrl + [f"X_{m}" for m in MODULES]
        return DataTable(cols, np.hstack([x, U, flags.astype(float)]), kinds)

    ref = run(np.zeros((n, len(MODULES)), dtype=int))
    doe = run(X_doe)
    return A, B, dA, ref, doe


PRINTED_A = np.array([
    [1.000, 0.000, 0.001, -0.000, 0.000, 0.000, 0.000],
    [0.001, 0.965, -0.008, 0.004, -0.007, -0.566, 0.000],
    [-0.003, 0.011, 0.986, -0.014, 0.004, 0.235, -0.000],
    [-0.001, -0.003, 0.024, 0.974, 0.030, -0.229, 0.003],
    [0.002, -0.012, -0.004, 0.001, 0.991, -0.134, 0.002],
    [0.000, 0.000, 0.001, -0.003, 0.011, 0.995, -0.000],
    [-0.001, 0.001, 0.002, -0.000, 0.002, 0.003, 0.995],
])


def linear_system(rng, p=7, c=1, n=2000):
    Q, _ = np.linalg.qr(rng.normal(size=(p, p)))
    A = Q @ np.diag(rng.uniform(-0.95, 0.95, p)) @ Q.T
    B = rng.normal(size=(p, c))
    U = rng.normal(size=(n, c))
    X = np.zeros((n, p))
    X[0] = rng.normal(size=p)
    for t in range(n - 1):
        X[t + 1] = A @ X[t] + B @ U[t]
    names = [f"x{k}" for k in range(p)]
    ctrl = [f"u{k}" for k in range(c)]
    kinds = {**{n_: "state" for n_ in names}, **{n_: "imposed" for n_ in ctrl}}
    return A, B, DataTable(names + ctrl, np.hstack([X, U]), kinds), names, ctrl


def lasso_oracle(X, y, pen, p_eps=1.0):
    """Exact minimizer by enumerating every sign pattern of the coefficients."""
    K = X.shape[1]
    best = (np.inf, None)
    for signs in itertools.product((-1, 0, 1), repeat=K):
        s = np.array(signs, dtype=float)
        S = np.flatnonzero(s)
        b = np.zeros(K)
        if len(S):
            XS = X[:, S]
            rhs = 2 * p_eps * XS.T @ y - pen[S] * s[S]
            b[S] = np.linalg.solve(2 * p_eps * XS.T @ XS, rhs)
            if np.any(np.sign(b[S]) != s[S]):
                continue
        f = p_eps * np.sum((y - X @ b) ** 2) + np.sum(pen * np.abs(b))
        if f < best[0]:
            best = (f, b)
    return best


def lasso_instance(seed, n=40, K=6):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, K))
    beta = r.normal(size=K) * (r.random(K) < 0.5)
    y = X @ beta + 0.3 * r.normal(size=n)
    pen = r.uniform(0.5, 20.0, K)
    return X, y, pen


HAND_X = np.column_stack([np.ones(5), np.arange(1.0, 6.0)])
HAND_Y = 2.0 * np.arange(1.0, 6.0) + np.array([0.1, -0.1, 0.2, -0.2, 0.0])


def hc3_direct(X, e):
    XtX_inv = np.linalg.inv(X.T @ X)
    h = np.diag(X @ XtX_inv @ X.T)
    return XtX_inv @ X.T @ np.diag(e ** 2 / (1 - h) ** 2) @ X @ XtX_inv
