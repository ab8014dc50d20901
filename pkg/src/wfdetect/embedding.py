"""Autoencoder embedding of the reference table into a low-dimensional latent space.

Encoder: input -> tanh hidden layer -> linear latent. The decoder mirrors it.
Inputs are z-scored per column; latents are left unnormalized. Imposed and
Boolean columns are never encoded, they pass through untouched.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.optimize

from .dmd import r2_scores
from .table import DataTable, SchemaError


class TrainingDivergence(ArithmeticError):
    pass


ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "linear": (lambda x: x, lambda a: np.ones_like(a)),
}


def _layer_shapes(width: int, hidden: int, latent: int) -> list[tuple[int, int]]:
    return [(width, hidden), (hidden, latent), (latent, hidden), (hidden, width)]


def _unpack(theta: np.ndarray, shapes) -> list[tuple[np.ndarray, np.ndarray]]:
    out, k = [], 0
    for fan_in, fan_out in shapes:
        W = theta[k:k + fan_in * fan_out].reshape(fan_in, fan_out)
        k += fan_in * fan_out
        b = theta[k:k + fan_out]
        k += fan_out
        out.append((W, b))
    return out


def _init(shapes, rng: np.random.Generator) -> np.ndarray:
    parts = []
    for fan_in, fan_out in shapes:
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(rng.uniform(-bound, bound, size=fan_out))
    return np.concatenate(parts)


def _loss_grad(theta: np.ndarray, X: np.ndarray, shapes, act: str) -> tuple[float, np.ndarray]:
    """Mean squared reconstruction error over all entries and its gradient."""
    f, df = ACTIVATIONS[act]
    (W1, b1), (W2, b2), (W3, b3), (W4, b4) = _unpack(theta, shapes)
    h1 = f(X @ W1 + b1)
    z = h1 @ W2 + b2
    h2 = f(z @ W3 + b3)
    out = h2 @ W4 + b4
    diff = out - X
    loss = float(np.mean(diff * diff))
    g_out = 2.0 * diff / diff.size
    gW4, gb4 = h2.T @ g_out, g_out.sum(0)
    g_h2 = (g_out @ W4.T) * df(h2)
    gW3, gb3 = z.T @ g_h2, g_h2.sum(0)
    g_z = g_h2 @ W3.T
    gW2, gb2 = h1.T @ g_z, g_z.sum(0)
    g_h1 = (g_z @ W2.T) * df(h1)
    gW1, gb1 = X.T @ g_h1, g_h1.sum(0)
    grad = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2,
                           gW3.ravel(), gb3, gW4.ravel(), gb4])
    return loss, grad


@dataclass
class Embedding:
    columns: list[str]
    latent_dim: int
    hidden: int
    activation: str
    mean: np.ndarray
    scale: np.ndarray
    theta: np.ndarray
    train_loss: float = float("nan")
    loss_history: list[float] = field(default_factory=list)
    r2: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if np.any(self.scale <= 0):
            raise ValueError("normalization scales must be > 0")

    @property
    def shapes(self):
        return _layer_shapes(len(self.columns), self.hidden, self.latent_dim)

    @property
    def latent_cols(self) -> list[str]:
        return [f"L{k + 1}" for k in range(self.latent_dim)]

    def encode(self, x: np.ndarray) -> np.ndarray:
        f, _ = ACTIVATIONS[self.activation]
        (W1, b1), (W2, b2), _, _ = _unpack(self.theta, self.shapes)
        xn = (np.asarray(x, dtype=float) - self.mean) / self.scale
        return f(xn @ W1 + b1) @ W2 + b2

    def decode(self, z: np.ndarray) -> np.ndarray:
        f, _ = ACTIVATIONS[self.activation]
        _, _, (W3, b3), (W4, b4) = _unpack(self.theta, self.shapes)
        return (f(np.asarray(z, dtype=float) @ W3 + b3) @ W4 + b4) * self.scale + self.mean

    def reconstruction_r2(self, table: DataTable) -> dict[str, float]:
        x = table.matrix(self.columns)
        r2 = r2_scores(x, self.decode(self.encode(x)))
        return {c: float(v) for c, v in zip(self.columns, r2)}

    def to_dict(self) -> dict:
        return {"columns": self.columns, "latent_dim": self.latent_dim, "hidden": self.hidden,
                "activation": self.activation, "layer_sizes": [len(self.columns), self.hidden,
                                                               self.latent_dim, self.hidden,
                                                               len(self.columns)],
                "mean": self.mean.tolist(), "scale": self.scale.tolist(),
                "theta": self.theta.tolist(), "train_loss": self.train_loss, "r2": self.r2}

    @classmethod
    def from_dict(cls, d: dict) -> "Embedding":
        return cls(list(d["columns"]), int(d["latent_dim"]), int(d["hidden"]), d["activation"],
                   np.array(d["mean"]), np.array(d["scale"]), np.array(d["theta"]),
                   float(d.get("train_loss", float("nan"))), [], dict(d.get("r2", {})))

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_json(cls, path: str | Path) -> "Embedding":
        return cls.from_dict(json.loads(Path(path).read_text()))


def train(reference: DataTable, latent_dim: int, epochs: int = 5000, step_size: float = 1e-2,
          seed: int = 0, columns: Sequence[str] | None = None, activation: str = "tanh",
          hidden: int | None = None, optimizer: str = "lbfgs") -> Embedding:
    """Fit an autoencoder to ``reference`` by full-batch training.

    ``optimizer="gd"`` runs plain gradient descent with the fixed
    ``step_size``; ``"lbfgs"`` runs quasi-Newton iterations with a line
    search (``epochs`` caps the iterations). Both only ever accept a
    parameter update that does not raise the training loss.
    """
    if latent_dim < 1:
        raise ValueError("latent_dim must be >= 1")
    cols = list(columns) if columns is not None else [
        c for c in reference.columns_of("state") if np.ptp(reference[c]) > 0]
    X = reference.matrix(cols)
    if len(X) < 10 * latent_dim:
        raise ValueError(f"need at least {10 * latent_dim} rows to train a {latent_dim}-d embedding")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Xn = (X - mean) / scale
    hidden = hidden or 4 * latent_dim
    shapes = _layer_shapes(len(cols), hidden, latent_dim)
    rng = np.random.default_rng(seed)
    theta = _init(shapes, rng)
    history: list[float] = []

    if optimizer == "gd":
        loss, grad = _loss_grad(theta, Xn, shapes, activation)
        history.append(loss)
        for _ in range(epochs):
            cand = theta - step_size * grad
            c_loss, c_grad = _loss_grad(cand, Xn, shapes, activation)
            if not np.isfinite(c_loss):
                raise TrainingDivergence("non-finite training loss; reduce step_size")
            if c_loss > loss:
                break
            theta, loss, grad = cand, c_loss, c_grad
            history.append(loss)
    elif optimizer == "lbfgs":
        def fun(th):
            lo, gr = _loss_grad(th, Xn, shapes, activation)
            if not np.isfinite(lo):
                raise TrainingDivergence("non-finite training loss; reduce step_size")
            return lo, gr

        def record(th):
            history.append(_loss_grad(th, Xn, shapes, activation)[0])

        history.append(fun(theta)[0])
        res = scipy.optimize.minimize(fun, theta, jac=True, method="L-BFGS-B", callback=record,
                                      options={"maxiter": epochs, "maxfun": 2 * epochs,
                                               "ftol": 1e-15, "gtol": 1e-12})
        theta = res.x
        loss = float(res.fun)
    else:
        raise ValueError(f"unknown optimizer: {optimizer}")

    emb = Embedding(cols, latent_dim, hidden, activation, mean, scale, theta, loss, history)
    emb.r2 = emb.reconstruction_r2(reference)
    return emb


def select_dim(reference: DataTable, max_dim: int, r2_threshold: float = 0.99,
               **train_kwargs) -> tuple[Embedding, int, bool]:
    """Grow the latent dimension until every variable is reconstructed with R² >= threshold.

    Returns ``(embedding, d, satisfied)``; ``satisfied`` is False (and a
    warning emitted) when even ``max_dim`` misses the threshold.
    """
    width = len(train_kwargs.get("columns") or [
        c for c in reference.columns_of("state") if np.ptp(reference[c]) > 0])
    if max_dim > width:
        raise ValueError(f"max_dim {max_dim} exceeds input width {width}")
    emb = None
    for d in range(1, max_dim + 1):
        emb = train(reference, d, **train_kwargs)
        if min(emb.r2.values()) >= r2_threshold:
            return emb, d, True
    warnings.warn(f"no latent dimension up to {max_dim} reaches R² >= {r2_threshold}")
    return emb, max_dim, False


def encode_table(emb: Embedding, table: DataTable) -> DataTable:
    table.require(emb.columns)
    z = emb.encode(table.matrix(emb.columns))
    keep = table.columns_of("imposed", "boolean")
    return DataTable(emb.latent_cols + keep, np.hstack([z, table.matrix(keep)]),
                     {**{c: "state" for c in emb.latent_cols}, **{c: table.kinds[c] for c in keep}})


def decode_table(emb: Embedding, latent: DataTable) -> DataTable:
    missing = [c for c in emb.latent_cols if c not in latent]
    if missing:
        raise SchemaError(f"latent table lacks columns {missing}")
    x = emb.decode(latent.matrix(emb.latent_cols))
    keep = latent.columns_of("imposed", "boolean")
    return DataTable(emb.columns + keep, np.hstack([x, latent.matrix(keep)]),
                     {**{c: "state" for c in emb.columns}, **{c: latent.kinds[c] for c in keep}})
