"""E-step posteriors from forward and backward recursions, plus decoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from lmrasch.data import Batch, Cluster, Dataset, ItemDesign, Subject
from lmrasch.likelihood import (
    backward,
    cluster_sums,
    evaluate,
    forward,
    single_subject_batch,
)
from lmrasch.params import Parameters, check_class
from lmrasch.pool import chunk_bounds, ordered_map


@dataclass(frozen=True, eq=False)
class PosteriorQuantities:
    """Expected values of the latent indicators given the data.

    Attributes:
        w: ``(H, k1)`` posterior cluster-class probabilities.
        z1: ``(N, T, k2)`` posterior state probabilities.
        z2: ``(N, T-1, k2, k2)`` posterior pairs ``(v0 at t-1, v1 at t)``.
        z1_given_u: ``(N, k1, T, k2)`` state posteriors conditional on the class.
        z2_given_u: ``(N, k1, T-1, k2, k2)`` pair posteriors conditional on the class.
        loglik: log-likelihood at the parameters the posteriors were computed with.
    """

    w: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    z1_given_u: np.ndarray
    z2_given_u: np.ndarray
    loglik: float

    @classmethod
    def concatenate(cls, parts: list[PosteriorQuantities]) -> PosteriorQuantities:
        return cls(
            np.concatenate([p.w for p in parts]),
            np.concatenate([p.z1 for p in parts]),
            np.concatenate([p.z2 for p in parts]),
            np.concatenate([p.z1_given_u for p in parts]),
            np.concatenate([p.z2_given_u for p in parts]),
            float(np.sum([p.loglik for p in parts])),
        )


def _batch_posteriors(params: Parameters, design: ItemDesign, batch: Batch
                      ) -> PosteriorQuantities:
    terms = evaluate(params, design, batch)
    k1, k2 = params.k1, params.k2
    with np.errstate(divide="ignore", invalid="ignore"):
        log_alpha = forward(terms)
        log_beta = backward(terms)
        subject_ll = logsumexp(log_alpha[:, :, -1, :], axis=-1)
        joint = terms.log_rho + cluster_sums(subject_ll, batch.cluster_index, batch.H)
        cluster_ll = logsumexp(joint, axis=1)
        w = np.exp(joint - cluster_ll[:, None])
        z1u = np.exp(log_alpha + log_beta - subject_ll[:, :, None, None])
        z2u = np.exp(
            log_alpha[:, :, :-1, :, None]
            + terms.log_trans
            + terms.log_emit[:, None, 1:, None, :]
            + log_beta[:, :, 1:, None, :]
            - subject_ll[:, :, None, None, None]
        )
    # A class under which the data are impossible carries zero weight.
    w[~np.isfinite(cluster_ll)] = 1.0 / k1
    impossible = ~np.isfinite(subject_ll)
    z1u[impossible] = 1.0 / k2
    z2u[impossible] = 1.0 / k2**2
    weights = w[batch.cluster_index]
    z1 = np.einsum("nu,nutv->ntv", weights, z1u)
    z2 = np.einsum("nu,nutab->ntab", weights, z2u)
    return PosteriorQuantities(w, z1, z2, z1u, z2u, float(np.sum(cluster_ll)))


def estep(params: Parameters, design: ItemDesign, dataset: Dataset,
          threads: int = 1) -> PosteriorQuantities:
    """Posterior expectations of all latent indicators, parallel over cluster chunks."""
    batch = dataset.batch
    bounds = chunk_bounds(batch.H, threads)
    if not bounds:
        return _batch_posteriors(params, design, batch)
    parts = ordered_map(
        lambda b: _batch_posteriors(params, design, batch.select(*b)), bounds, threads
    )
    return PosteriorQuantities.concatenate(parts)


def cluster_posterior_w(params: Parameters, design: ItemDesign, cluster: Cluster) -> np.ndarray:
    batch = Batch.from_clusters(design, [cluster], params.p_c, params.p_i)
    return _batch_posteriors(params, design, batch).w[0]


def subject_posteriors_given_u(params: Parameters, design: ItemDesign, subject: Subject,
                               u: int) -> tuple[np.ndarray, np.ndarray]:
    """``(z1, z2)`` of one subject conditional on cluster class `u`.

    `z1` has shape ``(T, k2)`` and `z2` shape ``(T-1, k2, k2)``.
    """
    check_class(params, u)
    post = _batch_posteriors(params, design, single_subject_batch(params, design, subject))
    return post.z1_given_u[0, u - 1], post.z2_given_u[0, u - 1]


@dataclass(frozen=True, eq=False)
class Decoding:
    """Most probable 1-based labels: ``classes`` per cluster, ``states`` per subject-occasion."""

    classes: np.ndarray
    states: np.ndarray


def decode(params: Parameters, design: ItemDesign, dataset: Dataset,
           post: PosteriorQuantities | None = None, threads: int = 1) -> Decoding:
    """Marginal arg-max labels; ties go to the lower index."""
    if post is None:
        post = estep(params, design, dataset, threads)
    return Decoding(np.argmax(post.w, axis=1) + 1, np.argmax(post.z1, axis=2) + 1)


def state_distribution(post: PosteriorQuantities) -> np.ndarray:
    """Average posterior state probabilities per occasion, shape ``(T, k2)``."""
    return post.z1.mean(axis=0)


def average_transitions(params: Parameters, design: ItemDesign, dataset: Dataset,
                        post: PosteriorQuantities | None = None) -> np.ndarray:
    """Fitted transition matrices averaged over subjects, shape ``(T-1, k2, k2)``.

    Each subject's class-specific matrices are mixed with its cluster's
    posterior class probabilities.
    """
    if post is None:
        post = estep(params, design, dataset)
    batch = dataset.batch
    terms = evaluate(params, design, batch)
    weights = post.w[batch.cluster_index]
    mixed = np.einsum("nu,nutab->ntab", weights, np.exp(terms.log_trans))
    return mixed.mean(axis=0)
