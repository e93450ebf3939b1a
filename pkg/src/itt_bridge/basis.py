"""Covariate expansions shared by every GLM fit.

``linear`` is ``[1, x_1, ..., x_p]``. ``spline`` appends, for each covariate
with enough distinct values, the restricted cubic spline terms of Harrell
(cubic between the boundary knots, linear outside). With ``n_knots`` interior
knots each covariate gains ``n_knots`` nonlinear columns, so ``n_knots=0``
gives exactly the linear design.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QUANTILE_RANGE = (0.05, 0.95)


@dataclass(frozen=True)
class Basis:
    kind: str
    n_inputs: int
    knots: tuple = ()  # one entry per input column: tuple of knots or None

    @property
    def n_columns(self) -> int:
        extra = sum(len(k) - 2 for k in self.knots if k is not None)
        return 1 + self.n_inputs + extra

    @property
    def n_linear(self) -> int:
        """Intercept plus raw covariates; the remaining columns are spline terms."""
        return 1 + self.n_inputs

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_inputs:
            from .errors import DimensionMismatch
            raise DimensionMismatch(f"expected {self.n_inputs} covariates, got {X.shape[1]}")
        cols = [np.ones((X.shape[0], 1)), X]
        for j, kn in enumerate(self.knots):
            if kn is not None:
                cols.append(rcs_terms(X[:, j], np.asarray(kn)))
        return np.hstack(cols)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_inputs": self.n_inputs,
                "knots": [None if k is None else list(k) for k in self.knots]}

    @classmethod
    def from_dict(cls, raw: dict) -> "Basis":
        knots = tuple(None if k is None else tuple(k) for k in raw["knots"])
        return cls(raw["kind"], raw["n_inputs"], knots)


def rcs_terms(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Nonlinear restricted cubic spline columns (``len(knots) - 2`` of them)."""
    k = len(knots)
    t_last, t_prev = knots[-1], knots[-2]
    scale = (knots[-1] - knots[0]) ** 2
    span = t_last - t_prev

    def cube(u):
        return np.maximum(u, 0.0) ** 3

    out = np.empty((x.shape[0], k - 2))
    tail_last = cube(x - t_last)
    tail_prev = cube(x - t_prev)
    for j in range(k - 2):
        tj = knots[j]
        out[:, j] = (cube(x - tj)
                     - tail_prev * (t_last - tj) / span
                     + tail_last * (t_prev - tj) / span) / scale
    return out


def build_basis(X, kind: str = "linear", n_knots: int = 4) -> Basis:
    """Place knots at evenly spaced quantiles (5%..95%) of each column of ``X``.

    Columns with too few distinct values for the requested knots (binary
    indicators, for instance) stay linear.
    """
    X = np.asarray(X, dtype=float)
    p = X.shape[1]
    if kind == "linear" or n_knots == 0:
        return Basis(kind, p, tuple(None for _ in range(p)))
    if kind != "spline":
        raise ValueError(f"unknown basis {kind!r}")
    probs = np.linspace(*QUANTILE_RANGE, n_knots + 2)
    knots = []
    for j in range(p):
        col = X[:, j]
        if np.unique(col).size <= n_knots + 2:
            knots.append(None)
            continue
        kn = np.unique(np.quantile(col, probs))
        knots.append(tuple(kn.tolist()) if kn.size == n_knots + 2 else None)
    return Basis(kind, p, tuple(knots))
