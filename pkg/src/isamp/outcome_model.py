"""Outcome working model ``f(y | x; gamma)`` and conditional expectations.

Conditional expectations ``E{h(x, Y) | x}`` are computed from a discrete
representation of the conditional law: per-unit ``nodes`` and ``probs``
arrays of shape ``(n, K)``.  For the normal-linear family the nodes are
Gauss-Hermite points mapped through the location-scale transform; a
discrete working model supplies its support and probability mass directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .core import (NonFiniteIntegrand, SingularDesign, SurveyData, design_with_intercept,
                   weighted_ls)

DEFAULT_NODES = 20


@dataclass(frozen=True)
class QuadratureRule:
    """Probabilists' Gauss-Hermite rule with weights normalised to sum to one."""

    Q: int
    nodes: np.ndarray
    weights: np.ndarray


@lru_cache(maxsize=32)
def gauss_hermite(Q: int = DEFAULT_NODES) -> QuadratureRule:
    if Q < 1:
        raise ValueError("need at least one node")
    x, wt = np.polynomial.hermite_e.hermegauss(Q)
    wt = wt / wt.sum()
    x.setflags(write=False)
    wt.setflags(write=False)
    return QuadratureRule(Q, x, wt)


def normal_law(mean, sigma2, rule: QuadratureRule | None = None):
    """Nodes and probabilities representing ``Normal(mean_i, sigma2)``."""
    rule = rule or gauss_hermite()
    mean = np.asarray(mean, dtype=float)
    sd = np.sqrt(np.asarray(sigma2, dtype=float))
    nodes = mean[:, None] + np.atleast_1d(sd)[..., None] * rule.nodes[None, :]
    probs = np.broadcast_to(rule.weights, nodes.shape)
    return nodes, probs


@dataclass(frozen=True)
class NormalLinearWorkingModel:
    """``Y | x ~ Normal(coef' (1, x), sigma2)``."""

    coef: np.ndarray
    sigma2: float

    def mean(self, X):
        return design_with_intercept(X) @ np.asarray(self.coef)

    def law(self, X, rule: QuadratureRule | None = None):
        return normal_law(self.mean(X), self.sigma2, rule)

    def logpdf(self, X, y):
        r = y - self.mean(X)
        return -0.5 * np.log(2 * np.pi * self.sigma2) - 0.5 * r**2 / self.sigma2


@dataclass(frozen=True)
class DiscreteWorkingModel:
    """Working model with finite support ``support`` and pmf ``pmf(X) -> (n, K)``."""

    support: np.ndarray
    pmf: Callable

    def law(self, X, rule=None):
        probs = np.asarray(self.pmf(X), dtype=float)
        nodes = np.broadcast_to(np.asarray(self.support, dtype=float), probs.shape)
        return nodes, probs


def fit_gamma_ht(data: SurveyData, design=None) -> NormalLinearWorkingModel:
    """HT-weighted maximum likelihood fit of the normal-linear working model.

    The score equation ``sum delta W S_gamma = 0`` has the weighted least
    squares closed form.
    """
    if data.n < data.p + 2:
        raise SingularDesign(f"need at least {data.p + 2} sampled units, have {data.n}")
    coef, s2 = weighted_ls(data.X, data.y, data.w)
    return NormalLinearWorkingModel(coef, s2)


def expect(values, probs):
    """Sum ``values`` against ``probs`` over the node axis (axis 1)."""
    values = np.asarray(values, dtype=float)
    probs = np.asarray(probs)
    if values.ndim == probs.ndim:
        return np.einsum("nk,nk->n", values, probs)
    return np.einsum("nk...,nk->n...", values, probs)


def cond_expect(h: Callable, X, model, rule: QuadratureRule | None = None) -> np.ndarray:
    """``E{h(x_i, Y) | x_i}`` for each row of ``X`` under ``model``.

    ``h`` receives ``X`` with shape ``(n, p)`` and ``y`` with shape
    ``(n, K)``; it returns an array of shape ``(n, K)`` or ``(n, K, q)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    nodes, probs = model.law(X, rule)
    vals = np.asarray(h(X, nodes), dtype=float)
    if vals.ndim == 0:
        vals = np.full(nodes.shape, float(vals))
    if not np.all(np.isfinite(vals)):
        raise NonFiniteIntegrand("integrand is not finite at some nodes")
    return expect(vals, probs)
