"""Weighted logit objectives and the damped Newton solver used by the M-step.

Each objective is written in raw coordinates (the model parameters
themselves) and exposes value, gradient and Hessian in the free coordinates
of its :class:`~lmrasch.reparam.Layout`, so ordering constraints hold at
every iterate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import expit, logsumexp

from lmrasch.exceptions import MStepFailure
from lmrasch.params import invert_global_logits
from lmrasch.reparam import Layout, Segment

LOGGER = logging.getLogger("lmrasch")


def weighted_log(weights: np.ndarray, log_p: np.ndarray) -> float:
    with np.errstate(invalid="ignore"):
        return float(np.sum(np.where(weights > 0, weights * log_p, 0.0)))


class Objective:
    """Base class: subclasses define `layout`, `raw_value` and `raw_derivatives`."""

    layout: Layout

    def raw_value(self, raw: np.ndarray) -> float:
        raise NotImplementedError  # pragma: no cover

    def raw_derivatives(self, raw: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        raise NotImplementedError  # pragma: no cover

    def value(self, free: np.ndarray) -> float:
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            return self.raw_value(self.layout.raw(free))

    def derivatives(self, free: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            value, grad_raw, hess_raw = self.raw_derivatives(self.layout.raw(free))
            grad, hess = self.layout.transform(free, grad_raw, hess_raw)
        return value, grad, hess


class RaschObjective(Objective):
    """Weighted Bernoulli log-likelihood of the Rasch model.

    Sufficient statistics are ``n[v, d]`` (posterior weight of answers to
    difficulty group ``d`` given by subjects in state ``v``) and ``s[v, d]``
    (the correct part of it). Raw coordinates are ``(theta, beta)``.
    """

    def __init__(self, n: np.ndarray, s: np.ndarray):
        self.n = np.asarray(n, dtype=float)
        self.s = np.asarray(s, dtype=float)
        self.k2, self.D = self.n.shape
        self.layout = Layout(Segment("increasing", self.k2 - 1), Segment("linear", self.D))

    def _gap(self, raw):
        return raw[: self.k2, None] - raw[None, self.k2:]

    def raw_value(self, raw):
        gap = self._gap(raw)
        return float(np.sum(self.s * gap - self.n * np.logaddexp(0.0, gap)))

    def raw_derivatives(self, raw):
        gap = self._gap(raw)
        value = float(np.sum(self.s * gap - self.n * np.logaddexp(0.0, gap)))
        lam = expit(gap)
        resid = self.s - self.n * lam
        weight = self.n * lam * (1.0 - lam)
        grad = np.concatenate([resid.sum(axis=1), -resid.sum(axis=0)])
        k2 = self.k2
        hess = np.zeros((k2 + self.D, k2 + self.D))
        hess[:k2, :k2] = -np.diag(weight.sum(axis=1))
        hess[k2:, k2:] = -np.diag(weight.sum(axis=0))
        hess[:k2, k2:] = weight
        hess[k2:, :k2] = weight.T
        return value, grad, hess


class MultinomialLogitObjective(Objective):
    """Weighted baseline-category logit with class 1 as reference.

    `weights` is ``(H, k)`` (fractional counts per observation and class),
    `design` is ``(H, q)``; raw coordinates are the ``(k-1, q)`` coefficient
    matrix flattened row by row.
    """

    def __init__(self, weights: np.ndarray, design: np.ndarray):
        self.weights = np.asarray(weights, dtype=float)
        self.design = np.asarray(design, dtype=float)
        self.k = self.weights.shape[1]
        self.q = self.design.shape[1]
        self.layout = Layout(Segment("linear", (self.k - 1) * self.q))

    def _log_probs(self, raw):
        eta = np.zeros((self.design.shape[0], self.k))
        eta[:, 1:] = self.design @ raw.reshape(self.k - 1, self.q).T
        return eta - logsumexp(eta, axis=1, keepdims=True)

    def raw_value(self, raw):
        return weighted_log(self.weights, self._log_probs(raw))

    def raw_derivatives(self, raw):
        log_p = self._log_probs(raw)
        value = weighted_log(self.weights, log_p)
        p = np.exp(log_p)[:, 1:]
        totals = self.weights.sum(axis=1)
        resid = self.weights[:, 1:] - totals[:, None] * p
        grad = (resid.T @ self.design).ravel()
        cov = totals[:, None, None] * (
            np.einsum("ha,ab->hab", p, np.eye(self.k - 1)) - p[:, :, None] * p[:, None, :]
        )
        size = (self.k - 1) * self.q
        hess = -np.einsum("hab,hi,hj->aibj", cov, self.design, self.design).reshape(size, size)
        return value, grad, hess


class CumulativeLogitObjective(Objective):
    """Weighted ordinal (global-logit, proportional-odds) log-likelihood.

    Observation ``o`` has category weights ``weights[o]`` over ``k`` ordered
    states and global logits
    ``g[o, v] = a[group[o]] + c[row[o], v] + z[o] @ b`` with ``a[0] = 0``.
    Raw coordinates are ``(a[1:], c flattened by row, b)``; every row of
    ``c`` is kept non-increasing.
    """

    def __init__(self, weights, group, row, z, n_groups: int, n_rows: int):
        self.weights = np.asarray(weights, dtype=float)
        self.group = np.asarray(group, dtype=int)
        self.row = np.asarray(row, dtype=int)
        self.z = np.asarray(z, dtype=float)
        if self.z.ndim != 2:
            self.z = self.z.reshape(self.weights.shape[0], -1)
        self.k = self.weights.shape[1]
        self.n_groups = n_groups
        self.n_rows = n_rows
        self.p = self.z.shape[1]
        self.layout = Layout(
            Segment("linear", n_groups - 1),
            *[Segment("decreasing", self.k - 1) for _ in range(n_rows)],
            Segment("linear", self.p),
        )
        self._groups = (self.group[:, None] == np.arange(1, n_groups)[None, :]).astype(float)
        self._rows = (self.row[:, None] == np.arange(n_rows)[None, :]).astype(float)

    def _unpack(self, raw):
        n_a = self.n_groups - 1
        n_c = self.n_rows * (self.k - 1)
        a = np.concatenate(([0.0], raw[:n_a]))
        c = raw[n_a:n_a + n_c].reshape(self.n_rows, self.k - 1)
        b = raw[n_a + n_c:]
        return a, c, b

    def logits(self, raw):
        a, c, b = self._unpack(raw)
        return a[self.group][:, None] + c[self.row] + (self.z @ b)[:, None]

    def raw_value(self, raw):
        return weighted_log(self.weights, np.log(invert_global_logits(self.logits(raw))))

    def raw_derivatives(self, raw):
        g = self.logits(raw)
        pi = invert_global_logits(g)
        value = weighted_log(self.weights, np.log(pi))
        positive = self.weights > 0
        ratio = np.where(positive, self.weights / np.where(positive, pi, 1.0), 0.0)
        ratio2 = np.where(positive, ratio / np.where(positive, pi, 1.0), 0.0)
        upper, lower = expit(g), expit(-g)
        dens = upper * lower
        slope = dens * (lower - upper)

        # Derivatives with respect to the logits of each observation.
        grad_g = dens * (ratio[:, 1:] - ratio[:, :-1])
        m = self.k - 1
        hess_g = np.zeros((g.shape[0], m, m))
        diag = slope * (ratio[:, 1:] - ratio[:, :-1]) - dens**2 * (ratio2[:, 1:] + ratio2[:, :-1])
        hess_g[:, np.arange(m), np.arange(m)] = diag
        if m > 1:
            off = ratio2[:, 1:-1] * dens[:, :-1] * dens[:, 1:]
            hess_g[:, np.arange(m - 1), np.arange(1, m)] = off
            hess_g[:, np.arange(1, m), np.arange(m - 1)] = off

        groups, rows, z = self._groups, self._rows, self.z
        total = grad_g.sum(axis=1)
        grad = np.concatenate([groups.T @ total, (rows.T @ grad_g).ravel(), z.T @ total])

        h_sum = hess_g.sum(axis=(1, 2))
        h_col = hess_g.sum(axis=1)
        n_a, n_c = self.n_groups - 1, self.n_rows * m
        size = n_a + n_c + self.p
        hess = np.zeros((size, size))
        sa, sc, sb = slice(0, n_a), slice(n_a, n_a + n_c), slice(n_a + n_c, size)
        hess[sa, sa] = groups.T @ (h_sum[:, None] * groups)
        hess[sa, sb] = groups.T @ (h_sum[:, None] * z)
        hess[sb, sb] = z.T @ (h_sum[:, None] * z)
        hess[sa, sc] = np.einsum("ou,or,oc->urc", groups, rows, h_col).reshape(n_a, n_c)
        hess[sc, sb] = np.einsum("or,oc,op->rcp", rows, h_col, z).reshape(n_c, self.p)
        blocks = np.einsum("or,ocd->rcd", rows, hess_g)
        for r in range(self.n_rows):
            start = n_a + r * m
            hess[start:start + m, start:start + m] = blocks[r]
        hess[sc, sa] = hess[sa, sc].T
        hess[sb, sa] = hess[sa, sb].T
        hess[sb, sc] = hess[sc, sb].T
        return value, grad, hess


@dataclass(frozen=True)
class NewtonResult:
    x: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    converged: bool


def _direction(hess: np.ndarray, grad: np.ndarray) -> np.ndarray:
    try:
        step = cho_solve(cho_factor(-hess), grad)
    except (LinAlgError, ValueError):
        return grad
    if not np.all(np.isfinite(step)) or step @ grad <= 0:
        return grad
    return step


def _grad_norm(x, grad, lower, upper) -> float:
    # A coordinate held at a bound by an outward gradient is stationary.
    held = ((x <= lower) & (grad < 0)) | ((x >= upper) & (grad > 0))
    return float(np.max(np.abs(np.where(held, 0.0, grad)), initial=0.0))


def newton_maximize(objective: Objective, x0: np.ndarray, *, lower: np.ndarray,
                    upper: np.ndarray, fixed: np.ndarray | None = None, max_iter: int = 100,
                    tol: float = 1e-8, max_halvings: int = 30,
                    component: str = "objective") -> NewtonResult:
    """Maximize `objective` by Newton steps with step-halving inside box bounds.

    Every accepted step does not decrease the objective. Coordinates marked in
    `fixed` never move. When the Hessian is not negative definite the step
    falls back to the gradient.
    """
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    free = np.ones(x.size, dtype=bool) if fixed is None else ~np.asarray(fixed, dtype=bool)
    value, grad, hess = objective.derivatives(x)
    if not np.isfinite(value):
        raise MStepFailure(component, {"value": value, "iteration": 0, "x": x.round(6).tolist()})
    lo, hi = lower[free], upper[free]
    norm = _grad_norm(x[free], grad[free], lo, hi)
    iterations = 0
    while norm > tol and iterations < max_iter:
        iterations += 1
        step = _direction(hess[np.ix_(free, free)], grad[free])
        alpha = 1.0
        for _ in range(max_halvings + 1):
            candidate = x.copy()
            candidate[free] = np.clip(x[free] + alpha * step, lo, hi)
            candidate_value = objective.value(candidate)
            if np.isfinite(candidate_value) and candidate_value >= value:
                break
            alpha /= 2.0
        else:
            LOGGER.debug(
                "lmrasch: %s line search exhausted at iteration %d.", component, iterations
            )
            break
        gain = candidate_value - value
        x = candidate
        value, grad, hess = objective.derivatives(x)
        if not np.all(np.isfinite(grad)):
            raise MStepFailure(
                component, {"value": value, "iteration": iterations, "x": x.round(6).tolist()}
            )
        norm = _grad_norm(x[free], grad[free], lo, hi)
        if gain <= 1e-15 * (1.0 + abs(value)):
            break
    return NewtonResult(x, value, norm, iterations, norm <= tol)
