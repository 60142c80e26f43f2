"""EM estimation: starting values, M-step components and the multi-start fit."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Collection
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import logit

from lmrasch.config import FitConfig
from lmrasch.data import Dataset, ItemDesign
from lmrasch.exceptions import (
    ConstraintViolation,
    FitFailure,
    InvalidArgument,
    InvalidDesign,
    MStepFailure,
)
from lmrasch.likelihood import evaluate
from lmrasch.logits import (
    CumulativeLogitObjective,
    MultinomialLogitObjective,
    Objective,
    RaschObjective,
    newton_maximize,
    weighted_log,
)
from lmrasch.params import ParamId, Parameters, bic, block_shapes
from lmrasch.pool import ordered_map
from lmrasch.posterior import PosteriorQuantities, estep

LOGGER = logging.getLogger("lmrasch")

START_NOISE = 0.5


def difficulty_frequencies(design: ItemDesign, dataset: Dataset) -> np.ndarray:
    """Pooled proportion of correct answers per difficulty group."""
    batch = dataset.batch
    observed = np.zeros(design.D)
    correct = np.zeros(design.D)
    for t in range(design.T):
        y = batch.responses[t]
        cols = design.columns(t + 1)
        np.add.at(observed, cols, (~np.isnan(y)).sum(axis=0))
        np.add.at(correct, cols, np.nansum(y, axis=0))
    empty = np.flatnonzero(observed == 0) + 1
    if empty.size:
        raise InvalidDesign(f"Difficulty groups {empty.tolist()} have no observed responses")
    return correct / observed


def _grid(k: int) -> np.ndarray:
    """``k`` equispaced points over ``[-(k-1), k-1]`` shifted so the first is 0."""
    points = np.linspace(-(k - 1), k - 1, k)
    return points - points[0]


def _cut_points(k2: int) -> np.ndarray:
    return np.linspace(k2 - 2, -(k2 - 2), k2 - 1)


def initialize(design: ItemDesign, dataset: Dataset, k1: int, k2: int, start_id: int = 0,
               seed: int = 0) -> Parameters:
    """Starting values for EM.

    Start 0 is deterministic: equispaced abilities and class intercepts,
    difficulties from the observed frequencies of correct answers and zero
    regression coefficients. Other starts perturb every intercept with
    Gaussian noise seeded by ``(seed, start_id)`` and restore the orderings.
    """
    if k1 < 1 or k2 < 1:
        raise InvalidArgument(f"k1 and k2 must be at least 1, got ({k1}, {k2})")
    T, p_c, p_i = design.T, dataset.p_c, dataset.p_i
    shapes = block_shapes(k1, k2, design.D, p_c, p_i, T)
    blocks = {name: np.zeros(shape) for name, shape in shapes.items()}
    blocks["theta"] = _grid(k2)
    blocks["beta"] = -logit(np.clip(difficulty_frequencies(design, dataset), 0.01, 0.99))
    if k2 > 1:
        blocks["delta0"] = _grid(k1)[1:]
        blocks["delta1"] = _cut_points(k2)
        blocks["eta0"] = np.tile(_grid(k1)[1:], (T - 1, 1))
        shift = 2.0 * (np.arange(1, k2 + 1) - (k2 + 1) / 2.0)
        blocks["eta1"] = np.broadcast_to(
            _cut_points(k2)[None, :] + shift[:, None], shapes["eta1"]
        ).copy()

    if start_id > 0:
        rng = np.random.default_rng([seed, start_id])
        for name in ("theta", "gamma0", "delta0", "delta1", "eta0", "eta1"):
            noise = rng.normal(0.0, START_NOISE, size=blocks[name].shape)
            if name == "theta":
                noise[0] = 0.0
            blocks[name] = blocks[name] + noise
        theta = np.sort(blocks["theta"])
        blocks["theta"] = theta - theta[0]
        blocks["delta1"] = -np.sort(-blocks["delta1"])
        blocks["eta1"] = -np.sort(-blocks["eta1"], axis=-1)
    return Parameters(k1, k2, T, p_c, p_i, **blocks)


def complete_data_terms(params: Parameters, design: ItemDesign, dataset: Dataset,
                        post: PosteriorQuantities) -> dict[str, float]:
    """Expected complete-data log-likelihood split by model component."""
    batch = dataset.batch
    terms = evaluate(params, design, batch)
    weights = post.w[batch.cluster_index]
    init_w = weights[:, :, None] * post.z1_given_u[:, :, 0, :]
    trans_w = weights[:, :, None, None, None] * post.z2_given_u
    return {
        "cluster": weighted_log(post.w, terms.log_rho),
        "initial": weighted_log(init_w, terms.log_init) if params.k2 > 1 else 0.0,
        "transition": weighted_log(trans_w, terms.log_trans) if params.k2 > 1 else 0.0,
        "rasch": weighted_log(post.z1, terms.log_emit),
    }


def complete_data_loglik(params: Parameters, design: ItemDesign, dataset: Dataset,
                         post: PosteriorQuantities) -> float:
    """The EM objective: complete-data log-likelihood with indicators replaced by posteriors."""
    return float(sum(complete_data_terms(params, design, dataset, post).values()))


def _solve(objective: Objective, raw0: np.ndarray, fixed: np.ndarray, config: FitConfig,
           component: str) -> np.ndarray:
    layout = objective.layout
    lower, upper = layout.bounds(config.clamp)
    result = newton_maximize(
        objective,
        layout.free(raw0),
        lower=lower,
        upper=upper,
        fixed=fixed,
        max_iter=config.mstep_max_newton,
        tol=config.mstep_tol,
        component=component,
    )
    if not result.converged:
        LOGGER.debug(
            "lmrasch: %s stopped after %d Newton steps (gradient %.3g).",
            component, result.iterations, result.grad_norm,
        )
    coefficients = np.abs(result.x[~layout.gap_mask()])
    if coefficients.size and coefficients.max() > config.separation_warning:
        LOGGER.warning(
            "lmrasch: %s has a coefficient of magnitude %.3g (quasi-separation, clamped at %g).",
            component, coefficients.max(), config.clamp,
        )
    return layout.raw(result.x)


def _fixed_mask(size: int, frozen: Collection[ParamId],
                position: Callable[[ParamId], int | None]) -> np.ndarray:
    mask = np.zeros(size, dtype=bool)
    for pid in frozen:
        index = position(pid)
        if index is not None:
            mask[index] = True
    return mask


def rasch_statistics(post: PosteriorQuantities, design: ItemDesign, dataset: Dataset):
    """Posterior-weighted answer counts ``(n, s)`` per state and difficulty, each ``(k2, D)``."""
    batch = dataset.batch
    k2 = post.z1.shape[2]
    n = np.zeros((k2, design.D))
    s = np.zeros((k2, design.D))
    for t in range(design.T):
        y = batch.responses[t]
        weights = post.z1[:, t, :]
        cols = design.columns(t + 1)
        np.add.at(n.T, cols, (weights.T @ (~np.isnan(y)).astype(float)).T)
        np.add.at(s.T, cols, (weights.T @ np.nan_to_num(y)).T)
    return n, s


def mstep_rasch(post: PosteriorQuantities, design: ItemDesign, dataset: Dataset,
                params: Parameters, config: FitConfig | None = None,
                frozen: Collection[ParamId] = ()) -> dict[str, np.ndarray]:
    """Update ``theta`` and ``beta`` from the posterior state weights."""
    config = config or FitConfig()
    k2 = params.k2
    objective = RaschObjective(*rasch_statistics(post, design, dataset))
    fixed = _fixed_mask(
        objective.layout.n_free, frozen,
        lambda pid: k2 - 1 + pid.index[0] - 1 if pid.block == "beta" else None,
    )
    raw = _solve(objective, np.concatenate([params.theta, params.beta]), fixed, config, "rasch")
    return {"theta": raw[:k2], "beta": raw[k2:]}


def mstep_cluster_logit(post: PosteriorQuantities, dataset: Dataset, params: Parameters,
                        config: FitConfig | None = None,
                        frozen: Collection[ParamId] = ()) -> dict[str, np.ndarray]:
    """Update ``gamma0`` and ``gamma1``; a no-op with a single cluster class."""
    config = config or FitConfig()
    if params.k1 == 1:
        return {}
    q = 1 + params.p_c
    design = np.hstack([np.ones((dataset.H, 1)), dataset.batch.x])
    objective = MultinomialLogitObjective(post.w, design)

    def position(pid: ParamId) -> int | None:
        if pid.block == "gamma0":
            return (pid.index[0] - 2) * q
        if pid.block == "gamma1":
            return (pid.index[0] - 2) * q + pid.index[1]
        return None

    fixed = _fixed_mask(objective.layout.n_free, frozen, position)
    raw0 = np.hstack([params.gamma0[:, None], params.gamma1]).ravel()
    coef = _solve(objective, raw0, fixed, config, "cluster_logit").reshape(params.k1 - 1, q)
    return {"gamma0": coef[:, 0], "gamma1": coef[:, 1:]}


def _leading_only(pid: ParamId) -> None:
    if pid.index[-1] != 2:
        raise InvalidArgument(
            f'Only the leading intercept of an ordered row can be held fixed, got "{pid}"'
        )


def mstep_initial(post: PosteriorQuantities, dataset: Dataset, params: Parameters,
                  config: FitConfig | None = None,
                  frozen: Collection[ParamId] = ()) -> dict[str, np.ndarray]:
    """Update ``delta0``, ``delta1`` and ``delta2``; a no-op with a single state."""
    config = config or FitConfig()
    k1, k2 = params.k1, params.k2
    if k2 == 1:
        return {}
    batch = dataset.batch
    n = batch.N
    weights = post.w[batch.cluster_index][:, :, None] * post.z1_given_u[:, :, 0, :]
    objective = CumulativeLogitObjective(
        weights.reshape(n * k1, k2),
        group=np.tile(np.arange(k1), n),
        row=np.zeros(n * k1, dtype=int),
        z=np.repeat(batch.z[:, 0, :], k1, axis=0),
        n_groups=k1,
        n_rows=1,
    )

    def position(pid: ParamId) -> int | None:
        if pid.block == "delta0":
            return pid.index[0] - 2
        if pid.block == "delta1":
            _leading_only(pid)
            return k1 - 1
        if pid.block == "delta2":
            return k1 - 1 + k2 - 1 + pid.index[0] - 1
        return None

    fixed = _fixed_mask(objective.layout.n_free, frozen, position)
    raw0 = np.concatenate([params.delta0, params.delta1, params.delta2])
    raw = _solve(objective, raw0, fixed, config, "initial")
    return {
        "delta0": raw[:k1 - 1],
        "delta1": raw[k1 - 1:k1 - 1 + k2 - 1],
        "delta2": raw[k1 - 1 + k2 - 1:],
    }


def mstep_transition(post: PosteriorQuantities, dataset: Dataset, params: Parameters, t: int,
                     config: FitConfig | None = None,
                     frozen: Collection[ParamId] = ()) -> dict[str, np.ndarray]:
    """Updated rows ``eta0[t]``, ``eta1[t]`` and ``eta2[t]`` for occasion `t` (2..T)."""
    config = config or FitConfig()
    k1, k2 = params.k1, params.k2
    if not 2 <= t <= params.T:
        raise InvalidArgument(f"Transitions are defined for t in 2..{params.T}, got {t}")
    if k2 == 1:
        return {}
    batch = dataset.batch
    n = batch.N
    weights = (
        post.w[batch.cluster_index][:, :, None, None] * post.z2_given_u[:, :, t - 2]
    )  # (N, k1, v0, v1)
    objective = CumulativeLogitObjective(
        weights.reshape(n * k1 * k2, k2),
        group=np.tile(np.repeat(np.arange(k1), k2), n),
        row=np.tile(np.arange(k2), n * k1),
        z=np.repeat(batch.z[:, t - 1, :], k1 * k2, axis=0),
        n_groups=k1,
        n_rows=k2,
    )
    n_cuts = k2 * (k2 - 1)

    def position(pid: ParamId) -> int | None:
        if pid.index[0] != t:
            return None
        if pid.block == "eta0":
            return pid.index[1] - 2
        if pid.block == "eta1":
            _leading_only(pid)
            return k1 - 1 + (pid.index[1] - 1) * (k2 - 1)
        if pid.block == "eta2":
            return k1 - 1 + n_cuts + pid.index[1] - 1
        return None

    fixed = _fixed_mask(objective.layout.n_free, frozen, position)
    raw0 = np.concatenate([params.eta0[t - 2], params.eta1[t - 2].ravel(), params.eta2[t - 2]])
    raw = _solve(objective, raw0, fixed, config, f"transition[{t}]")
    return {
        "eta0": raw[:k1 - 1],
        "eta1": raw[k1 - 1:k1 - 1 + n_cuts].reshape(k2, k2 - 1),
        "eta2": raw[k1 - 1 + n_cuts:],
    }


def mstep(post: PosteriorQuantities, design: ItemDesign, dataset: Dataset, params: Parameters,
          config: FitConfig, frozen: Collection[ParamId] = (), threads: int = 1) -> Parameters:
    """One generalized M-step: every component solved from the same posteriors."""
    tasks: list[Callable[[], dict[str, np.ndarray]]] = [
        lambda: mstep_rasch(post, design, dataset, params, config, frozen),
        lambda: mstep_cluster_logit(post, dataset, params, config, frozen),
        lambda: mstep_initial(post, dataset, params, config, frozen),
    ]
    occasions = range(2, params.T + 1) if params.k2 > 1 else range(0)
    for t in occasions:
        tasks.append(lambda t=t: mstep_transition(post, dataset, params, t, config, frozen))
    results = ordered_map(lambda task: task(), tasks, threads)

    updates: dict[str, np.ndarray] = {}
    for result in results[:3]:
        updates.update(result)
    if occasions:
        for name in ("eta0", "eta1", "eta2"):
            updates[name] = np.stack([result[name] for result in results[3:]])
    return params.replace(**updates)


@dataclass(frozen=True, eq=False)
class FitResult:
    """Outcome of :func:`fit` for the winning start.

    ``trace[0]`` is the log-likelihood at the starting values and every
    later entry follows one full EM iteration.
    """

    params: Parameters
    loglik: float
    trace: tuple[float, ...]
    n_params: int
    bic: float
    converged: bool
    start_id: int
    iterations: int = 0
    failures: dict[int, str] = field(default_factory=dict)

    @property
    def k1(self) -> int:
        return self.params.k1

    @property
    def k2(self) -> int:
        return self.params.k2

    def to_dict(self) -> dict[str, Any]:
        return {
            "params": self.params.to_dict(),
            "loglik": self.loglik,
            "trace": list(self.trace),
            "n_params": self.n_params,
            "bic": self.bic,
            "converged": self.converged,
            "start_id": self.start_id,
            "iterations": self.iterations,
            "failures": {str(key): value for key, value in self.failures.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> FitResult:
        try:
            return cls(
                params=Parameters.from_dict(doc["params"]),
                loglik=float(doc["loglik"]),
                trace=tuple(float(v) for v in doc.get("trace", [doc["loglik"]])),
                n_params=int(doc["n_params"]),
                bic=float(doc["bic"]),
                converged=bool(doc["converged"]),
                start_id=int(doc.get("start_id", 0)),
                iterations=int(doc.get("iterations", 0)),
                failures={int(k): str(v) for k, v in doc.get("failures", {}).items()},
            )
        except KeyError as exc:
            raise InvalidArgument(f"Model document is missing {exc}") from None


@dataclass(frozen=True)
class _Run:
    params: Parameters
    trace: tuple[float, ...]
    converged: bool


def _converged(previous: float, current: float, tol: float) -> bool:
    return abs(current - previous) / (abs(current) + 1.0) < tol


def _em(params: Parameters, design: ItemDesign, dataset: Dataset, config: FitConfig,
        frozen: Collection[ParamId], threads: int, label: str) -> _Run:
    post = estep(params, design, dataset, threads)
    trace = [post.loglik]
    converged = False
    for iteration in range(1, config.max_iters + 1):
        if not math.isfinite(trace[-1]):
            raise MStepFailure("estep", {"loglik": trace[-1], "iteration": iteration - 1})
        params = mstep(post, design, dataset, params, config, frozen, threads)
        post = estep(params, design, dataset, threads)
        trace.append(post.loglik)
        LOGGER.debug("lmrasch: %s iteration %d loglik %.10f.", label, iteration, trace[-1])
        if trace[-1] < trace[-2] - 1e-8 * (1.0 + abs(trace[-2])):
            LOGGER.warning(
                "lmrasch: %s log-likelihood decreased by %.3g at iteration %d.",
                label, trace[-2] - trace[-1], iteration,
            )
        if _converged(trace[-2], trace[-1], config.tol):
            converged = True
            break
    return _Run(params, tuple(trace), converged)


def _check_frozen(params: Parameters, frozen: Collection[ParamId | str]) -> frozenset[ParamId]:
    checked = set()
    allowed = set(params.profile_ids())
    for raw in frozen:
        pid = ParamId.parse(raw)
        params.value(pid)
        if pid not in allowed:
            raise InvalidArgument(f'Parameter "{pid}" cannot be held fixed')
        checked.add(pid)
    return frozenset(checked)


def fit(design: ItemDesign, dataset: Dataset, k1: int, k2: int,
        config: FitConfig | None = None, *, start: Parameters | None = None,
        frozen: Collection[ParamId | str] = ()) -> FitResult:
    """Maximum likelihood estimation by EM from several starts.

    With `start` given, EM runs once from those values. Parameters listed in
    `frozen` keep their starting values throughout.
    """
    config = config or FitConfig()
    if dataset.n_students == 0:
        raise InvalidDesign("The dataset has no subjects")
    if start is not None:
        if (start.k1, start.k2, start.T, start.D) != (k1, k2, design.T, design.D):
            raise InvalidArgument("Starting parameters do not match the model dimensions")
        starts = [0]
    else:
        starts = list(range(config.n_random_starts + 1))
        # Deterministic start first so design problems surface before any threading.
        initialize(design, dataset, k1, k2, 0, config.rng_seed)
    fixed = _check_frozen(
        start or Parameters.zeros(k1, k2, design.D, dataset.p_c, dataset.p_i, design.T), frozen
    )
    outer = min(config.threads, len(starts))
    inner = max(1, config.threads // outer)

    def run(start_id: int) -> _Run | str:
        label = f"({k1}, {k2}) start {start_id}"
        params = start if start is not None else initialize(
            design, dataset, k1, k2, start_id, config.rng_seed
        )
        try:
            outcome = _em(params, design, dataset, config, fixed, inner, label)
        except (MStepFailure, ConstraintViolation) as exc:
            LOGGER.warning("lmrasch: %s failed: %s", label, exc)
            return str(exc)
        LOGGER.debug("lmrasch: %s finished at loglik %.6f.", label, outcome.trace[-1])
        return outcome

    outcomes = ordered_map(run, starts, outer)
    failures = {sid: out for sid, out in zip(starts, outcomes) if isinstance(out, str)}
    runs = [(sid, out) for sid, out in zip(starts, outcomes) if isinstance(out, _Run)]
    if not runs:
        raise FitFailure(failures)
    best_id, best = max(runs, key=lambda item: (item[1].trace[-1], -item[0]))

    n_students = config.n_students or dataset.n_students
    n_params = best.params.n_free - len(fixed)
    loglik = best.trace[-1]
    if not best.converged:
        LOGGER.warning(
            "lmrasch: (%d, %d) did not converge within %d iterations.", k1, k2, config.max_iters
        )
    LOGGER.info(
        "lmrasch: Fitted (%d, %d): loglik %.6f, start %d of %d.",
        k1, k2, loglik, best_id, len(starts),
    )
    return FitResult(
        params=best.params,
        loglik=loglik,
        trace=best.trace,
        n_params=n_params,
        bic=bic(loglik, n_params, n_students),
        converged=best.converged,
        start_id=best_id,
        iterations=len(best.trace) - 1,
        failures=failures,
    )
