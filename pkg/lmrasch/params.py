"""Model parameters, their constraints and the link functions.

Blocks follow the model notation (indices are 1-based in every public
interface):

==========  ==========================  =======================================
block       array shape                 index tuple
==========  ==========================  =======================================
theta       (k2,)                       v = 1..k2 (theta_1 fixed at 0)
beta        (D,)                        d = 1..D
gamma0      (k1-1,)                     u = 2..k1
gamma1      (k1-1, p_c)                 (u, c), u = 2..k1, c = 1..p_c
delta0      (k1-1,)                     u = 2..k1
delta1      (k2-1,)                     v = 2..k2
delta2      (p_i,)                      c = 1..p_i
eta0        (T-1, k1-1)                 (t, u), t = 2..T
eta1        (T-1, k2, k2-1)             (t, v0, v1), v1 = 2..k2
eta2        (T-1, p_i)                  (t, c)
==========  ==========================  =======================================

With a single ability state the initial and transition blocks are empty.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any, NamedTuple

import numpy as np
from scipy.special import expit, logsumexp, softmax

from lmrasch.exceptions import ConstraintViolation, InvalidArgument

BLOCKS = (
    "theta", "beta", "gamma0", "gamma1", "delta0", "delta1", "delta2", "eta0", "eta1", "eta2",
)

# First admissible value of each index position, mapping public indices to array positions.
INDEX_BASE = {
    "theta": (1,),
    "beta": (1,),
    "gamma0": (2,),
    "gamma1": (2, 1),
    "delta0": (2,),
    "delta1": (2,),
    "delta2": (1,),
    "eta0": (2, 2),
    "eta1": (2, 1, 2),
    "eta2": (2, 1),
}


def block_shapes(k1: int, k2: int, D: int, p_c: int, p_i: int, T: int) -> dict[str, tuple]:
    shapes = {
        "theta": (k2,),
        "beta": (D,),
        "gamma0": (k1 - 1,),
        "gamma1": (k1 - 1, p_c),
    }
    if k2 > 1:
        shapes.update(
            delta0=(k1 - 1,),
            delta1=(k2 - 1,),
            delta2=(p_i,),
            eta0=(T - 1, k1 - 1),
            eta1=(T - 1, k2, k2 - 1),
            eta2=(T - 1, p_i),
        )
    else:
        shapes.update(
            delta0=(0,), delta1=(0,), delta2=(0,), eta0=(0, 0), eta1=(0, 1, 0), eta2=(0, 0)
        )
    return shapes


def count_parameters(k1: int, k2: int, D: int, p_c: int, p_i: int, T: int) -> int:
    """Number of free parameters of the model with `k1` cluster classes and `k2` states."""
    if min(k1, k2, D, T) < 1 or min(p_c, p_i) < 0:
        raise InvalidArgument(
            "count_parameters needs k1, k2, D, T >= 1 and p_c, p_i >= 0"
        )
    r = D + (k2 - 1) + (k1 - 1) * (1 + p_c)
    if k2 > 1:
        r += (k1 - 1) + (k2 - 1) + p_i
        r += (T - 1) * ((k1 - 1) + k2 * (k2 - 1) + p_i)
    return r


def bic(loglik: float, n_params: int, n: int) -> float:
    """Bayesian information criterion ``-2 loglik + n_params log(n)``; `n` counts students."""
    if n < 1:
        raise InvalidArgument(f"BIC needs a sample size of at least 1, got {n}")
    return -2.0 * loglik + n_params * math.log(n)


class ParamId(NamedTuple):
    """Address of one scalar parameter, written ``block:i,j`` (e.g. ``gamma1:2,1``)."""

    block: str
    index: tuple[int, ...]

    @classmethod
    def parse(cls, text: str | ParamId) -> ParamId:
        if isinstance(text, ParamId):
            return text
        if ":" not in text:
            raise InvalidArgument(
                f'Parameter id must be in the format "block:i,j", got "{text}"'
            )
        block, _, raw = text.partition(":")
        block = block.strip()
        if block not in INDEX_BASE:
            raise KeyError(f'Parameter block "{block}" not found')
        try:
            index = tuple(int(part) for part in raw.split(","))
        except ValueError:
            raise InvalidArgument(f'Parameter id "{text}" has a non-integer index') from None
        if len(index) != len(INDEX_BASE[block]):
            raise InvalidArgument(
                f'Parameter block "{block}" takes {len(INDEX_BASE[block])} indices, got "{text}"'
            )
        return cls(block, index)

    def __str__(self) -> str:
        return f"{self.block}:{','.join(str(i) for i in self.index)}"

    @property
    def position(self) -> tuple[int, ...]:
        return tuple(i - base for i, base in zip(self.index, INDEX_BASE[self.block]))


def _frozen(array: Any, shape: tuple) -> np.ndarray:
    out = np.array(array, dtype=float).reshape(shape)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Parameters:
    """The complete parameter vector, immutable once built.

    Construction validates shapes and the ordering constraints: ``theta`` is
    non-decreasing from ``theta_1 = 0``; ``delta1`` and every row of
    ``eta1`` are non-increasing.
    """

    k1: int
    k2: int
    T: int
    p_c: int
    p_i: int
    theta: np.ndarray
    beta: np.ndarray
    gamma0: np.ndarray
    gamma1: np.ndarray
    delta0: np.ndarray
    delta1: np.ndarray
    delta2: np.ndarray
    eta0: np.ndarray
    eta1: np.ndarray
    eta2: np.ndarray

    def __post_init__(self):
        if self.k1 < 1 or self.k2 < 1 or self.T < 1:
            raise InvalidArgument("k1, k2 and T must be at least 1")
        shapes = block_shapes(
            self.k1, self.k2, np.size(self.beta), self.p_c, self.p_i, self.T
        )
        for name in BLOCKS:
            value = getattr(self, name)
            if np.size(value) != math.prod(shapes[name]):
                raise InvalidArgument(
                    f"Block {name} has {np.size(value)} values, expected shape {shapes[name]}"
                )
            array = _frozen(value, shapes[name])
            if not np.all(np.isfinite(array)):
                raise InvalidArgument(f"Block {name} contains non-finite values")
            object.__setattr__(self, name, array)
        if self.theta[0] != 0.0:
            raise ConstraintViolation(f"theta_1 must be 0, got {self.theta[0]}")
        if np.any(np.diff(self.theta) < 0):
            raise ConstraintViolation("theta must be non-decreasing")
        if np.any(np.diff(self.delta1) > 0):
            raise ConstraintViolation("delta1 must be non-increasing in v")
        if self.eta1.size and np.any(np.diff(self.eta1, axis=-1) > 0):
            raise ConstraintViolation("eta1 must be non-increasing in v1 for every v0")

    @classmethod
    def zeros(cls, k1: int, k2: int, D: int, p_c: int, p_i: int, T: int) -> Parameters:
        """All-zero parameters (equal abilities, uniform logits)."""
        shapes = block_shapes(k1, k2, D, p_c, p_i, T)
        return cls(k1, k2, T, p_c, p_i, **{name: np.zeros(shapes[name]) for name in BLOCKS})

    @property
    def D(self) -> int:
        return self.beta.size

    @property
    def n_free(self) -> int:
        return count_parameters(self.k1, self.k2, self.D, self.p_c, self.p_i, self.T)

    def replace(self, **blocks: np.ndarray) -> Parameters:
        return dataclasses.replace(self, **blocks)

    def free_ids(self) -> list[ParamId]:
        """Every free scalar, block by block in array order."""
        ids = []
        for name in BLOCKS:
            base = INDEX_BASE[name]
            for pos in np.ndindex(getattr(self, name).shape):
                pid = ParamId(name, tuple(p + b for p, b in zip(pos, base)))
                if pid != ParamId("theta", (1,)):
                    ids.append(pid)
        return ids

    def profile_ids(self) -> list[ParamId]:
        """Free scalars that can be held at zero without breaking an ordering.

        Excludes ``theta`` and every cut-point intercept except the leading
        one of each ordered row.
        """
        return [
            pid for pid in self.free_ids()
            if pid.block not in ("theta", "delta1", "eta1") or pid.index[-1] == 2
        ]

    def _check(self, pid: ParamId) -> ParamId:
        pid = ParamId.parse(pid)
        shape = getattr(self, pid.block).shape
        pos = pid.position
        if any(p < 0 or p >= n for p, n in zip(pos, shape)):
            raise KeyError(f'Parameter "{pid}" not found in this model')
        return pid

    def value(self, pid: ParamId | str) -> float:
        pid = self._check(pid)
        return float(getattr(self, pid.block)[pid.position])

    def with_value(self, pid: ParamId | str, value: float) -> Parameters:
        """A copy with one scalar changed.

        The leading intercept of an ordered row (``delta1:2``, ``eta1:t,v0,2``)
        moves its whole row, keeping the gaps.
        """
        pid = self._check(pid)
        if pid == ParamId("theta", (1,)):
            raise ConstraintViolation("theta_1 is fixed at 0")
        array = np.array(getattr(self, pid.block))
        if pid.block in ("delta1", "eta1") and pid.index[-1] == 2:
            row = pid.position[:-1]
            array[row] += value - array[pid.position]
        else:
            array[pid.position] = value
        return self.replace(**{pid.block: array})

    def to_dict(self) -> dict[str, Any]:
        """Flat JSON-ready document keyed by block name with explicit index tuples."""
        doc: dict[str, Any] = {
            "k1": self.k1, "k2": self.k2, "T": self.T, "D": self.D,
            "p_c": self.p_c, "p_i": self.p_i,
        }
        for name in BLOCKS:
            base = INDEX_BASE[name]
            array = getattr(self, name)
            doc[name] = {
                ",".join(str(p + b) for p, b in zip(pos, base)): float(array[pos])
                for pos in np.ndindex(array.shape)
            }
        return doc

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> Parameters:
        try:
            k1, k2, T, D = int(doc["k1"]), int(doc["k2"]), int(doc["T"]), int(doc["D"])
            p_c, p_i = int(doc["p_c"]), int(doc["p_i"])
        except KeyError as exc:
            raise InvalidArgument(f"Parameter document is missing {exc}") from None
        shapes = block_shapes(k1, k2, D, p_c, p_i, T)
        blocks = {}
        for name in BLOCKS:
            array = np.zeros(shapes[name])
            base = INDEX_BASE[name]
            for key, value in doc.get(name, {}).items():
                pid = ParamId.parse(f"{name}:{key}")
                pos = tuple(i - b for i, b in zip(pid.index, base))
                if any(p < 0 or p >= n for p, n in zip(pos, array.shape)):
                    raise InvalidArgument(f'Parameter "{pid}" is outside the model dimensions')
                array[pos] = value
            blocks[name] = array
        return cls(k1, k2, T, p_c, p_i, **blocks)


def rasch_prob(theta_v, beta_d):
    """Probability of a correct answer, ``expit(theta - beta)``."""
    theta_v = np.asarray(theta_v, dtype=float)
    beta_d = np.asarray(beta_d, dtype=float)
    if not (np.all(np.isfinite(theta_v)) and np.all(np.isfinite(beta_d))):
        raise InvalidArgument("rasch_prob needs finite ability and difficulty")
    p = expit(theta_v - beta_d)
    return float(p) if p.ndim == 0 else p


def invert_global_logits(g) -> np.ndarray:
    """Category probabilities from global (cumulative) logits along the last axis.

    ``g[..., v-2]`` is ``log P(V >= v) / P(V < v)`` for ``v = 2..k``. Each
    difference is taken on whichever tail keeps it accurate.
    """
    g = np.asarray(g, dtype=float)
    if np.any(np.diff(g, axis=-1) > 0):
        raise ConstraintViolation("Global logits must be non-increasing in the category")
    pad = g.shape[:-1] + (1,)
    upper = np.concatenate([np.full(pad, np.inf), g], axis=-1)
    lower = np.concatenate([g, np.full(pad, -np.inf)], axis=-1)
    return np.where(
        lower > 0,
        expit(-lower) - expit(-upper),
        expit(upper) - expit(lower),
    )


def cumulative_logits(pi) -> np.ndarray:
    """Global logits of a probability vector (inverse of :func:`invert_global_logits`)."""
    pi = np.asarray(pi, dtype=float)
    tail = np.cumsum(pi[..., ::-1], axis=-1)[..., ::-1]
    head = np.cumsum(pi, axis=-1)
    with np.errstate(divide="ignore"):
        return np.log(tail[..., 1:]) - np.log(head[..., :-1])


def _rows(values, width: int, what: str) -> np.ndarray:
    out = np.asarray(values, dtype=float)
    if out.ndim < 2:
        out = out.reshape(1, -1)
    if out.shape[1] != width:
        raise InvalidArgument(f"{what} have {out.shape[1]} columns, expected {width}")
    return out


def log_cluster_class_probs(params: Parameters, x: np.ndarray) -> np.ndarray:
    """``log rho_h(u)`` for every row of the ``(H, p_c)`` covariate matrix."""
    x = _rows(x, params.p_c, "Cluster covariates")
    eta = np.zeros((x.shape[0], params.k1))
    eta[:, 1:] = params.gamma0 + x @ params.gamma1.T
    return eta - logsumexp(eta, axis=1, keepdims=True)


def cluster_class_probs(params: Parameters, x_h) -> np.ndarray:
    x_h = np.asarray(x_h, dtype=float).reshape(-1)
    if x_h.size != params.p_c:
        raise InvalidArgument(
            f"Cluster covariates have length {x_h.size}, expected {params.p_c}"
        )
    eta = np.concatenate(([0.0], params.gamma0 + params.gamma1 @ x_h))
    return softmax(eta)


def initial_logits(params: Parameters, z1: np.ndarray) -> np.ndarray:
    """Global logits of the initial distribution, shape ``(N, k1, k2-1)``."""
    z1 = _rows(z1, params.p_i, "Subject covariates")
    if params.k2 == 1:
        return np.zeros((z1.shape[0], params.k1, 0))
    offsets = np.concatenate(([0.0], params.delta0))
    return (
        offsets[None, :, None]
        + params.delta1[None, None, :]
        + (z1 @ params.delta2)[:, None, None]
    )


def transition_logits(params: Parameters, z: np.ndarray, t: int) -> np.ndarray:
    """Global logits of the transition at occasion `t`, shape ``(N, k1, k2, k2-1)``."""
    z = _rows(z, params.p_i, "Subject covariates")
    if params.k2 == 1:
        return np.zeros((z.shape[0], params.k1, 1, 0))
    offsets = np.concatenate(([0.0], params.eta0[t - 2]))
    return (
        offsets[None, :, None, None]
        + params.eta1[t - 2][None, None, :, :]
        + (z @ params.eta2[t - 2])[:, None, None, None]
    )


def check_class(params: Parameters, u: int) -> int:
    """`u` if it is a cluster class of `params`, else :class:`InvalidArgument`."""
    if not 1 <= u <= params.k1:
        raise InvalidArgument(f"Cluster class must be in 1..{params.k1}, got {u}")
    return u


def initial_probs(params: Parameters, z_hi_1, u: int) -> np.ndarray:
    """``pi_hi(. | u)`` for one subject."""
    row = check_class(params, u) - 1
    return invert_global_logits(initial_logits(params, z_hi_1)[0, row])


def transition_matrix(params: Parameters, z_hi_t, u: int, t: int) -> np.ndarray:
    """Row-stochastic ``k2 x k2`` matrix ``pi_hi^(t)(v1 | u, v0)`` for one subject."""
    row = check_class(params, u) - 1
    if not 2 <= t <= params.T:
        raise InvalidArgument(f"Transitions are defined for t in 2..{params.T}, got {t}")
    return invert_global_logits(transition_logits(params, z_hi_t, t)[0, row])
