"""Model selection and inference: BIC grids, likelihood ratios and profile standard errors."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import norm

from lmrasch.config import FitConfig
from lmrasch.data import Dataset, ItemDesign
from lmrasch.estimation import FitResult, fit
from lmrasch.exceptions import FitFailure, InvalidArgument, LikelihoodRatioError, MStepFailure
from lmrasch.params import ParamId, Parameters, bic, log_cluster_class_probs
from lmrasch.pool import ordered_map

LOGGER = logging.getLogger("lmrasch")

LR_SLACK = 1e-6

__all__ = [
    "GridResult",
    "GridRow",
    "StandardError",
    "bic",
    "class_profile",
    "grid_search",
    "lr_slack",
    "lr_test",
    "profile_se",
    "se_frame",
    "standard_errors",
    "wald_pvalue",
]


@dataclass(frozen=True)
class GridRow:
    k1: int
    k2: int
    loglik: float
    n_params: int
    bic: float
    converged: bool
    best: bool = False
    error: str | None = None


@dataclass(frozen=True, eq=False)
class GridResult:
    """One row per ``(k1, k2)`` cell; `best` marks the smallest BIC among converged cells."""

    rows: tuple[GridRow, ...]
    fits: dict[tuple[int, int], FitResult] = field(default_factory=dict)

    @property
    def best(self) -> GridRow | None:
        return next((row for row in self.rows if row.best), None)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "k1": [row.k1 for row in self.rows],
                "k2": [row.k2 for row in self.rows],
                "loglik": [row.loglik for row in self.rows],
                "bic": [row.bic for row in self.rows],
                "np": [row.n_params for row in self.rows],
                "converged": [row.converged for row in self.rows],
                "best": [row.best for row in self.rows],
            }
        )


def grid_search(design: ItemDesign, dataset: Dataset, k1_range: Iterable[int],
                k2_range: Iterable[int], config: FitConfig | None = None) -> GridResult:
    """Fit every ``(k1, k2)`` cell and flag the BIC-preferred one.

    A cell whose fit fails is kept with its error message and never flagged.
    """
    config = config or FitConfig()
    cells = [(k1, k2) for k1 in k1_range for k2 in k2_range]
    if not cells:
        raise InvalidArgument("grid_search needs non-empty k1 and k2 ranges")
    cell_config = config.replace(threads=1) if len(cells) > 1 else config

    def run(cell: tuple[int, int]) -> FitResult | str:
        LOGGER.info("lmrasch: Fitting grid cell k1=%d, k2=%d.", *cell)
        try:
            return fit(design, dataset, cell[0], cell[1], cell_config)
        except (FitFailure, MStepFailure) as exc:
            LOGGER.warning("lmrasch: Grid cell k1=%d, k2=%d failed: %s", cell[0], cell[1], exc)
            return str(exc)

    outcomes = ordered_map(run, cells, config.threads)
    candidates = [
        (outcome.bic, i)
        for i, outcome in enumerate(outcomes)
        if isinstance(outcome, FitResult) and outcome.converged
    ]
    best = min(candidates)[1] if candidates else None
    if best is None:
        LOGGER.warning("lmrasch: No grid cell converged; no model is flagged as best.")

    rows, fits = [], {}
    for i, ((k1, k2), outcome) in enumerate(zip(cells, outcomes)):
        if isinstance(outcome, FitResult):
            fits[(k1, k2)] = outcome
            rows.append(GridRow(
                k1, k2, outcome.loglik, outcome.n_params, outcome.bic, outcome.converged, i == best
            ))
        else:
            rows.append(GridRow(k1, k2, math.nan, 0, math.nan, False, False, outcome))
    return GridResult(tuple(rows), fits)


def lr_test(loglik_full: float, loglik_constrained: float, slack: float = LR_SLACK) -> float:
    """Likelihood ratio statistic ``-2 (loglik_constrained - loglik_full)``.

    Raises :class:`~lmrasch.exceptions.LikelihoodRatioError` when the
    constrained model is better by more than `slack`.
    """
    statistic = -2.0 * (loglik_constrained - loglik_full)
    if statistic < -slack:
        raise LikelihoodRatioError(statistic)
    return statistic


def wald_pvalue(estimate: float, se: float) -> float:
    """Two-sided normal p-value of ``estimate / se``."""
    if not (se > 0 and math.isfinite(se)):
        return math.nan
    return float(2.0 * norm.sf(abs(estimate / se)))


@dataclass(frozen=True)
class StandardError:
    """Profile standard error of one parameter; `se` is NaN when undefined."""

    param: ParamId
    estimate: float
    se: float
    wald_p: float
    lr_statistic: float
    defined: bool


def profile_se(design: ItemDesign, dataset: Dataset, fitted: FitResult,
               param_id: ParamId | str, config: FitConfig | None = None) -> StandardError:
    """``|estimate| / sqrt(D)``, with ``D`` the likelihood ratio against a refit at zero.

    The refit warm-starts from the fitted values with the parameter set to
    zero and held there. An estimate of exactly zero is undefined without
    any refit. When the constrained refit beats `fitted` by more than the EM
    tolerance allows, the full model is refitted once from the constrained
    optimum and the statistic is taken against that refit.
    """
    config = config or FitConfig()
    params: Parameters = fitted.params
    pid = ParamId.parse(param_id)
    estimate = params.value(pid)
    if pid not in params.profile_ids():
        raise InvalidArgument(f'Parameter "{pid}" has no profile standard error')
    if estimate == 0.0:
        LOGGER.warning("lmrasch: Standard error of %s is undefined (estimate is 0).", pid)
        return StandardError(pid, estimate, math.nan, math.nan, 0.0, False)

    refit_config = config.replace(n_random_starts=0)
    constrained = fit(
        design, dataset, params.k1, params.k2, refit_config,
        start=params.with_value(pid, 0.0),
        frozen=[pid],
    )
    slack = lr_slack(fitted.loglik, config.tol)
    try:
        statistic = lr_test(fitted.loglik, constrained.loglik, slack)
    except LikelihoodRatioError as exc:
        LOGGER.warning(
            "lmrasch: Constrained refit of %s is better (D = %.6g); refitting the full model.",
            pid, exc.statistic,
        )
        full = fit(design, dataset, params.k1, params.k2, refit_config, start=constrained.params)
        estimate = full.params.value(pid)
        statistic = lr_test(full.loglik, constrained.loglik, lr_slack(full.loglik, config.tol))
    if statistic <= 0 or estimate == 0.0:
        LOGGER.warning("lmrasch: Standard error of %s is undefined (D = %.3g).", pid, statistic)
        return StandardError(pid, estimate, math.nan, math.nan, statistic, False)
    se = abs(estimate) / math.sqrt(statistic)
    return StandardError(pid, estimate, se, wald_pvalue(estimate, se), statistic, True)


def lr_slack(loglik: float, tol: float) -> float:
    """Largest negative statistic explained by two fits each stopping at relative `tol`."""
    return max(LR_SLACK, 2.0 * tol * (abs(loglik) + 1.0))


def standard_errors(design: ItemDesign, dataset: Dataset, fitted: FitResult,
                    param_ids: Sequence[ParamId | str] | None = None,
                    config: FitConfig | None = None) -> list[StandardError]:
    """Profile standard errors for `param_ids` (default: every profilable parameter).

    A parameter whose refits fail is reported as undefined; the others are
    still computed.
    """
    config = config or FitConfig()
    ids = [ParamId.parse(p) for p in param_ids] if param_ids is not None else (
        fitted.params.profile_ids()
    )
    refit_config = config.replace(threads=1) if len(ids) > 1 else config
    LOGGER.info("lmrasch: Computing %d profile standard errors.", len(ids))

    def run(pid: ParamId) -> StandardError:
        try:
            return profile_se(design, dataset, fitted, pid, refit_config)
        except (LikelihoodRatioError, FitFailure, MStepFailure) as exc:
            LOGGER.warning("lmrasch: Standard error of %s is undefined: %s", pid, exc)
            statistic = getattr(exc, "statistic", math.nan)
            return StandardError(pid, fitted.params.value(pid), math.nan, math.nan, statistic,
                                 False)

    return ordered_map(run, ids, config.threads)


def se_frame(results: Iterable[StandardError]) -> pd.DataFrame:
    """The SE report: one row per parameter, undefined values left empty."""
    rows = [
        {"param": str(r.param), "estimate": r.estimate, "se": r.se, "wald_p": r.wald_p}
        for r in results
    ]
    return pd.DataFrame(rows, columns=["param", "estimate", "se", "wald_p"])


def class_profile(params: Parameters, dataset: Dataset, covariate: str) -> pd.DataFrame:
    """Average cluster-class probabilities for each value of a cluster covariate."""
    values = dataset.cluster_covariate(covariate)
    probs = np.exp(log_cluster_class_probs(params, dataset.batch.x))
    frame = pd.DataFrame(probs, columns=[f"class_{u}" for u in range(1, params.k1 + 1)])
    frame.insert(0, covariate, values)
    grouped = frame.groupby(covariate, sort=True)
    out = grouped.mean()
    out.insert(0, "clusters", grouped.size())
    return out.reset_index()
