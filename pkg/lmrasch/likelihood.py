"""Manifest likelihood through forward recursions in log space.

Everything is vectorized over subjects and cluster classes: a
:class:`ModelTerms` holds the log-probabilities of every model component for
a :class:`~lmrasch.data.Batch`, and :func:`forward` runs the recursion once
per occasion for all ``(subject, u)`` pairs at the same time. Missing
responses contribute nothing to the emission terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_expit, logsumexp

from lmrasch.data import Batch, Cluster, Dataset, ItemDesign, Subject
from lmrasch.exceptions import InvalidArgument
from lmrasch.params import (
    Parameters,
    check_class,
    initial_logits,
    invert_global_logits,
    log_cluster_class_probs,
    transition_logits,
)
from lmrasch.pool import chunk_bounds, ordered_map


@dataclass(frozen=True)
class EmissionVector:
    """``log p(Y_hi^(t) = y | V = v)`` for every state ``v``."""

    log_p: np.ndarray


@dataclass(frozen=True)
class ForwardState:
    """Scaled forward vector: ``exp(log_q + log_scale)`` is the unscaled one."""

    log_q: np.ndarray
    log_scale: float


@dataclass(frozen=True, eq=False)
class ModelTerms:
    log_rho: np.ndarray  # (H, k1)
    log_init: np.ndarray  # (N, k1, k2)
    log_trans: np.ndarray  # (N, k1, T-1, k2, k2), [..., v0, v1]
    log_emit: np.ndarray  # (N, T, k2)


def _log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def item_logprobs(params: Parameters, design: ItemDesign, occasion: int):
    """``(log lambda, log(1 - lambda))`` for the items of `occasion`, each ``(k2, J_t)``."""
    gap = params.theta[:, None] - params.beta[design.columns(occasion)][None, :]
    return log_expit(gap), log_expit(-gap)


def emission_matrix(params: Parameters, design: ItemDesign, batch: Batch) -> np.ndarray:
    """Emission log-probabilities for a batch, shape ``(N, T, k2)``."""
    out = np.zeros((batch.N, design.T, params.k2))
    for t in range(design.T):
        y = batch.responses[t]
        observed = ~np.isnan(y)
        correct = np.where(observed, y, 0.0)
        wrong = observed - correct
        log_right, log_wrong = item_logprobs(params, design, t + 1)
        out[:, t, :] = correct @ log_right.T + wrong @ log_wrong.T
    return out


def evaluate(params: Parameters, design: ItemDesign, batch: Batch) -> ModelTerms:
    """Log-probabilities of every model component on `batch`."""
    log_rho = log_cluster_class_probs(params, batch.x)
    log_init = _log(invert_global_logits(initial_logits(params, batch.z[:, 0, :])))
    log_trans = np.zeros((batch.N, params.k1, design.T - 1, params.k2, params.k2))
    for t in range(2, design.T + 1):
        log_trans[:, :, t - 2] = _log(
            invert_global_logits(transition_logits(params, batch.z[:, t - 1, :], t))
        )
    return ModelTerms(log_rho, log_init, log_trans, emission_matrix(params, design, batch))


def forward(terms: ModelTerms) -> np.ndarray:
    """Forward log-probabilities ``log q_t(v)`` given ``u``, shape ``(N, k1, T, k2)``."""
    n, k1, k2 = terms.log_init.shape
    T = terms.log_emit.shape[1]
    log_alpha = np.empty((n, k1, T, k2))
    log_alpha[:, :, 0] = terms.log_init + terms.log_emit[:, None, 0, :]
    for t in range(1, T):
        step = logsumexp(log_alpha[:, :, t - 1, :, None] + terms.log_trans[:, :, t - 1], axis=-2)
        log_alpha[:, :, t] = step + terms.log_emit[:, None, t, :]
    return log_alpha


def backward(terms: ModelTerms) -> np.ndarray:
    """Backward log-probabilities ``log r_t(v)`` given ``u``, shape ``(N, k1, T, k2)``."""
    n, k1, k2 = terms.log_init.shape
    T = terms.log_emit.shape[1]
    log_beta = np.zeros((n, k1, T, k2))
    for t in range(T - 1, 0, -1):
        ahead = terms.log_emit[:, None, None, t, :] + log_beta[:, :, t, None, :]
        log_beta[:, :, t - 1] = logsumexp(terms.log_trans[:, :, t - 1] + ahead, axis=-1)
    return log_beta


def cluster_sums(values: np.ndarray, cluster_index: np.ndarray, n_clusters: int) -> np.ndarray:
    """Sum per-subject rows into their clusters (``-inf`` propagates)."""
    out = np.zeros((n_clusters,) + values.shape[1:])
    np.add.at(out, cluster_index, values)
    return out


def _batch_cluster_logliks(params: Parameters, design: ItemDesign, batch: Batch) -> np.ndarray:
    terms = evaluate(params, design, batch)
    with np.errstate(divide="ignore", invalid="ignore"):
        subject_ll = logsumexp(forward(terms)[:, :, -1, :], axis=-1)
        totals = cluster_sums(subject_ll, batch.cluster_index, batch.H)
        return logsumexp(terms.log_rho + totals, axis=1)


def cluster_logliks(params: Parameters, design: ItemDesign, batch: Batch,
                    threads: int = 1) -> np.ndarray:
    """``log p(Y_h = y_h)`` for every cluster of `batch`, in cluster order."""
    parts = ordered_map(
        lambda bounds: _batch_cluster_logliks(params, design, batch.select(*bounds)),
        chunk_bounds(batch.H, threads),
        threads,
    )
    return np.concatenate(parts) if parts else np.zeros(0)


def single_subject_batch(params: Parameters, design: ItemDesign, subject: Subject) -> Batch:
    cluster = Cluster("", np.zeros(params.p_c), (subject,))
    return Batch.from_clusters(design, [cluster], params.p_c, params.p_i)


def emission_logprobs(params: Parameters, design: ItemDesign, y_hi_t, occasion: int
                      ) -> EmissionVector:
    """Log-probability of one subject's responses at `occasion` under each state."""
    if not 1 <= occasion <= design.T:
        raise InvalidArgument(f"Occasion {occasion} is outside 1..{design.T}")
    y = np.asarray(y_hi_t, dtype=float)
    n_items = design.J[occasion - 1]
    if y.shape != (n_items,):
        raise InvalidArgument(
            f"Occasion {occasion} has {n_items} items, got responses of shape {y.shape}"
        )
    observed = ~np.isnan(y)
    log_right, log_wrong = item_logprobs(params, design, occasion)
    log_p = np.where(observed & (y == 1), log_right, 0.0).sum(axis=1)
    log_p += np.where(observed & (y == 0), log_wrong, 0.0).sum(axis=1)
    return EmissionVector(log_p)


def forward_states(params: Parameters, design: ItemDesign, subject: Subject, u: int
                   ) -> list[ForwardState]:
    """The scaled forward vectors of one subject in cluster class `u`, one per occasion."""
    check_class(params, u)
    terms = evaluate(params, design, single_subject_batch(params, design, subject))
    log_alpha = forward(terms)[0, u - 1]
    states = []
    for row in log_alpha:
        scale = float(np.max(row))
        if not np.isfinite(scale):
            scale = 0.0
        states.append(ForwardState(row - scale, scale))
    return states


def subject_loglik_given_u(params: Parameters, design: ItemDesign, subject: Subject,
                           u: int) -> float:
    """``log p(Y_hi = y_hi | U_h = u)``."""
    last = forward_states(params, design, subject, u)[-1]
    return float(logsumexp(last.log_q) + last.log_scale)


def cluster_loglik(params: Parameters, design: ItemDesign, cluster: Cluster) -> float:
    batch = Batch.from_clusters(design, [cluster], params.p_c, params.p_i)
    return float(_batch_cluster_logliks(params, design, batch)[0])


def total_loglik(params: Parameters, design: ItemDesign, dataset: Dataset,
                 threads: int = 1) -> float:
    """``l(phi) = sum_h log p(Y_h = y_h)``, summed in cluster order."""
    if dataset.H == 0:
        return 0.0
    return float(np.sum(cluster_logliks(params, design, dataset.batch, threads)))
