"""Ordering-preserving reparametrizations.

Ordered blocks are optimized through unconstrained coordinates so that an
M-step never leaves the feasible set:

* ``increasing``: abilities ``theta_1 = 0 <= theta_2 <= ...`` are stored as
  log-gaps ``tau_v`` with ``theta_v = theta_{v-1} + exp(tau_v)``.
* ``decreasing``: cut-point intercepts ``c_2 >= c_3 >= ...`` are stored as a
  free leading value plus log-gaps ``s_v`` with ``c_v = c_{v-1} - exp(s_v)``.
* ``linear``: everything else, stored as is.

A :class:`Layout` stacks segments and maps between the free vector used by
the Newton solver and the raw vector the objectives are written in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

MIN_LOG_GAP = -30.0
MAX_LOG_GAP = math.log(50.0)

SegmentKind = Literal["linear", "increasing", "decreasing"]


def increasing_values(free: np.ndarray) -> np.ndarray:
    return np.concatenate(([0.0], np.cumsum(np.exp(free))))


def increasing_free(values: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(np.diff(values), math.exp(MIN_LOG_GAP)))


def decreasing_values(free: np.ndarray) -> np.ndarray:
    if free.size == 0:
        return free.copy()
    return free[0] - np.concatenate(([0.0], np.cumsum(np.exp(free[1:]))))


def decreasing_free(values: np.ndarray) -> np.ndarray:
    if values.size == 0:
        return values.astype(float)
    gaps = np.log(np.maximum(-np.diff(values), math.exp(MIN_LOG_GAP)))
    return np.concatenate(([values[0]], gaps))


def _reverse_cumsum(x: np.ndarray) -> np.ndarray:
    return np.cumsum(x[::-1])[::-1]


@dataclass(frozen=True)
class Segment:
    kind: SegmentKind
    size: int
    """Number of free coordinates."""

    @property
    def raw_size(self) -> int:
        return self.size + 1 if self.kind == "increasing" else self.size


class Layout:
    """A stack of segments mapping free coordinates to raw values."""

    def __init__(self, *segments: Segment):
        self.segments = tuple(segments)
        self.n_free = sum(seg.size for seg in self.segments)
        self.n_raw = sum(seg.raw_size for seg in self.segments)

    def _walk(self):
        f = r = 0
        for seg in self.segments:
            yield seg, slice(f, f + seg.size), slice(r, r + seg.raw_size)
            f += seg.size
            r += seg.raw_size

    def raw(self, free: np.ndarray) -> np.ndarray:
        out = np.empty(self.n_raw)
        for seg, fs, rs in self._walk():
            if seg.kind == "linear":
                out[rs] = free[fs]
            elif seg.kind == "increasing":
                out[rs] = increasing_values(free[fs])
            else:
                out[rs] = decreasing_values(free[fs])
        return out

    def free(self, raw: np.ndarray) -> np.ndarray:
        out = np.empty(self.n_free)
        for seg, fs, rs in self._walk():
            if seg.kind == "linear":
                out[fs] = raw[rs]
            elif seg.kind == "increasing":
                out[fs] = increasing_free(raw[rs])
            else:
                out[fs] = decreasing_free(raw[rs])
        return out

    def jacobian(self, free: np.ndarray) -> np.ndarray:
        """d raw / d free, shape ``(n_raw, n_free)``."""
        jac = np.zeros((self.n_raw, self.n_free))
        for seg, fs, rs in self._walk():
            block = jac[rs, fs]
            if seg.kind == "linear":
                block[...] = np.eye(seg.size)
            elif seg.kind == "increasing":
                block[...] = np.tril(np.ones((seg.size + 1, seg.size)), -1) * np.exp(free[fs])
            elif seg.size:
                block[:, 0] = 1.0
                gaps = np.exp(free[fs][1:])
                block[:, 1:] = -np.tril(np.ones((seg.size, seg.size - 1)), -1) * gaps
        return jac

    def curvature(self, free: np.ndarray, grad_raw: np.ndarray) -> np.ndarray:
        """Diagonal second-order term of the chain rule, one entry per free coordinate."""
        out = np.zeros(self.n_free)
        for seg, fs, rs in self._walk():
            if seg.kind == "increasing":
                out[fs] = np.exp(free[fs]) * _reverse_cumsum(grad_raw[rs])[1:]
            elif seg.kind == "decreasing" and seg.size > 1:
                out[fs][1:] = -np.exp(free[fs][1:]) * _reverse_cumsum(grad_raw[rs])[1:]
        return out

    def gap_mask(self) -> np.ndarray:
        """True for the free coordinates that are log-gaps."""
        mask = np.zeros(self.n_free, dtype=bool)
        for seg, fs, _ in self._walk():
            if seg.kind == "increasing":
                mask[fs] = True
            elif seg.kind == "decreasing" and seg.size > 1:
                mask[fs.start + 1:fs.stop] = True
        return mask

    def bounds(self, clamp: float) -> tuple[np.ndarray, np.ndarray]:
        gaps = self.gap_mask()
        lower = np.where(gaps, MIN_LOG_GAP, -clamp)
        upper = np.where(gaps, MAX_LOG_GAP, clamp)
        return lower, upper

    def transform(self, free: np.ndarray, grad_raw: np.ndarray, hess_raw: np.ndarray):
        """Carry a raw-space gradient and Hessian over to free coordinates."""
        jac = self.jacobian(free)
        grad = jac.T @ grad_raw
        hess = jac.T @ hess_raw @ jac + np.diag(self.curvature(free, grad_raw))
        return grad, hess
