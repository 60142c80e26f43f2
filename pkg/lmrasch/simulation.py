"""Synthetic data from the full generative model, and empirical transition tables."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
import pandas as pd
from scipy.special import expit

from lmrasch.data import Cluster, Dataset, ItemDesign, Subject
from lmrasch.exceptions import InvalidArgument
from lmrasch.params import (
    Parameters,
    cluster_class_probs,
    cumulative_logits,
    initial_probs,
    transition_matrix,
)
from lmrasch.posterior import PosteriorQuantities

LOGGER = logging.getLogger("lmrasch")

CovariateKind = Literal["normal", "bernoulli", "constant"]


@dataclass(frozen=True)
class CovariateSpec:
    """Distribution of one covariate.

    ``normal`` uses `loc` and `scale`, ``bernoulli`` uses `p`, ``constant``
    uses `value`. A subject covariate that is not `varying` is drawn once
    per subject and repeated at every occasion.
    """

    name: str
    kind: CovariateKind = "normal"
    loc: float = 0.0
    scale: float = 1.0
    p: float = 0.5
    value: float = 0.0
    varying: bool = False

    def __post_init__(self):
        if self.kind not in ("normal", "bernoulli", "constant"):
            raise InvalidArgument(f'Unknown covariate distribution "{self.kind}"')
        if self.kind == "normal" and self.scale < 0:
            raise InvalidArgument(f"Covariate {self.name}: scale must be non-negative")
        if self.kind == "bernoulli" and not 0 <= self.p <= 1:
            raise InvalidArgument(f"Covariate {self.name}: p must be in [0, 1]")

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "normal":
            return rng.normal(self.loc, self.scale, size)
        if self.kind == "bernoulli":
            return (rng.random(size) < self.p).astype(float)
        return np.full(size, float(self.value))


def chain_intercepts(initial, transition, T: int) -> tuple[np.ndarray, np.ndarray]:
    """``delta1`` and ``eta1`` whose baseline chain has the given probabilities.

    `initial` is the first-occasion state distribution and `transition` the
    row-stochastic matrix used at every later occasion, both for cluster
    class 1 with zero subject covariates.
    """
    initial = np.asarray(initial, dtype=float)
    transition = np.atleast_2d(np.asarray(transition, dtype=float))
    k2 = initial.size
    if transition.shape != (k2, k2):
        raise InvalidArgument(
            f"Transition probabilities must be {k2} x {k2}, got {transition.shape}"
        )
    for probs in (initial, *transition):
        if np.any(probs <= 0.0) or not np.isclose(probs.sum(), 1.0):
            raise InvalidArgument("Target probabilities must be positive and sum to 1")
    eta1 = np.broadcast_to(cumulative_logits(transition), (T - 1, k2, k2 - 1)).copy()
    return cumulative_logits(initial), eta1


@dataclass(frozen=True, eq=False)
class SimSpec:
    design: ItemDesign
    truth: Parameters
    H: int
    cluster_size_range: tuple[int, int] = (1, 1)
    cluster_covariates: tuple[CovariateSpec, ...] = ()
    subject_covariates: tuple[CovariateSpec, ...] = ()
    seed: int = 0
    missing_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "cluster_covariates", tuple(self.cluster_covariates))
        object.__setattr__(self, "subject_covariates", tuple(self.subject_covariates))
        low, high = self.cluster_size_range
        if self.H < 0 or low < 1 or high < low:
            raise InvalidArgument(
                f"Need H >= 0 and 1 <= min <= max cluster size, got H={self.H}, "
                f"range={self.cluster_size_range}"
            )
        if (self.truth.T, self.truth.D) != (self.design.T, self.design.D):
            raise InvalidArgument("The true parameters do not match the item design")
        if (self.truth.p_c, self.truth.p_i) != (
            len(self.cluster_covariates), len(self.subject_covariates)
        ):
            raise InvalidArgument("The true parameters do not match the covariate generators")
        if not 0 <= self.missing_rate < 1:
            raise InvalidArgument(f"missing_rate must be in [0, 1), got {self.missing_rate}")

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> SimSpec:
        """Build a spec from its JSON form.

        ``design`` is a list of occasions, each a list of difficulty ids;
        ``truth`` is a parameter document as written by ``fit``. Optional
        ``initial_probs`` and ``transition_probs`` replace the cut points of
        the truth by those of a chain with these probabilities.
        """
        try:
            design = ItemDesign(tuple(tuple(int(d) for d in row) for row in doc["design"]))
            truth = Parameters.from_dict(doc["truth"])
            if "initial_probs" in doc or "transition_probs" in doc:
                delta1, eta1 = chain_intercepts(
                    doc["initial_probs"], doc["transition_probs"], truth.T
                )
                truth = truth.replace(delta1=delta1, eta1=eta1)
            return cls(
                design=design,
                truth=truth,
                H=int(doc["H"]),
                cluster_size_range=tuple(doc.get("cluster_size_range", (1, 1))),
                cluster_covariates=tuple(
                    CovariateSpec(**c) for c in doc.get("cluster_covariates", ())
                ),
                subject_covariates=tuple(
                    CovariateSpec(**c) for c in doc.get("subject_covariates", ())
                ),
                seed=int(doc.get("seed", 0)),
                missing_rate=float(doc.get("missing_rate", 0.0)),
            )
        except KeyError as exc:
            raise InvalidArgument(f"Simulation spec is missing {exc}") from None
        except TypeError as exc:
            raise InvalidArgument(f"Invalid simulation spec: {exc}") from None


@dataclass(frozen=True, eq=False)
class LatentTruth:
    """The latent draw behind a simulated dataset (1-based labels)."""

    classes: np.ndarray  # (H,)
    states: np.ndarray  # (N, T), subjects in dataset order
    k1: int
    k2: int

    def posterior(self) -> PosteriorQuantities:
        """Degenerate posteriors putting all mass on the realized draw."""
        n, T = self.states.shape
        w = np.eye(self.k1)[self.classes - 1]
        z1 = np.eye(self.k2)[self.states - 1]
        z2 = z1[:, :-1, :, None] * z1[:, 1:, None, :]
        z1u = np.broadcast_to(z1[:, None], (n, self.k1, T, self.k2)).copy()
        z2u = np.broadcast_to(z2[:, None], (n, self.k1) + z2.shape[1:]).copy()
        return PosteriorQuantities(w, z1, z2, z1u, z2u, float("nan"))

    def to_frame(self, dataset: Dataset) -> pd.DataFrame:
        rows = []
        n = 0
        for h, cluster in enumerate(dataset.clusters):
            for subject in cluster.subjects:
                for t in range(self.states.shape[1]):
                    rows.append({
                        "cluster_id": cluster.id,
                        "subject_id": subject.id,
                        "occasion": t + 1,
                        "cluster_class": int(self.classes[h]),
                        "state": int(self.states[n, t]),
                    })
                n += 1
        return pd.DataFrame(
            rows, columns=["cluster_id", "subject_id", "occasion", "cluster_class", "state"]
        )


def _subject_covariates(specs, rng: np.random.Generator, T: int) -> np.ndarray:
    z = np.empty((T, len(specs)))
    for c, spec in enumerate(specs):
        z[:, c] = spec.draw(rng, T) if spec.varying else np.repeat(spec.draw(rng, 1), T)
    return z


def simulate(spec: SimSpec) -> tuple[Dataset, LatentTruth]:
    """Draw a dataset and its latent classes and states; reproducible from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    truth, design = spec.truth, spec.design
    T = design.T
    low, high = spec.cluster_size_range
    clusters, classes, paths = [], [], []
    for h in range(spec.H):
        x = np.array([c.draw(rng, 1)[0] for c in spec.cluster_covariates])
        u = int(rng.choice(truth.k1, p=cluster_class_probs(truth, x))) + 1
        subjects = []
        for i in range(int(rng.integers(low, high + 1))):
            z = _subject_covariates(spec.subject_covariates, rng, T)
            path = np.empty(T, dtype=int)
            path[0] = rng.choice(truth.k2, p=initial_probs(truth, z[0], u))
            for t in range(1, T):
                row = transition_matrix(truth, z[t], u, t + 1)[path[t - 1]]
                path[t] = rng.choice(truth.k2, p=row)
            responses = []
            for t in range(T):
                p = expit(truth.theta[path[t]] - truth.beta[design.columns(t + 1)])
                y = (rng.random(p.size) < p).astype(float)
                if spec.missing_rate:
                    y[rng.random(p.size) < spec.missing_rate] = np.nan
                responses.append(y)
            subjects.append(Subject(str(i + 1), tuple(responses), z))
            paths.append(path + 1)
        clusters.append(Cluster(str(h + 1), x, tuple(subjects)))
        classes.append(u)
    dataset = Dataset(
        design,
        tuple(clusters),
        tuple(c.name for c in spec.cluster_covariates),
        tuple(c.name for c in spec.subject_covariates),
    )
    states = np.array(paths, dtype=int).reshape(len(paths), T)
    truth_draw = LatentTruth(np.array(classes, dtype=int), states, truth.k1, truth.k2)
    LOGGER.info(
        "lmrasch: Simulated %d clusters with %d subjects.", spec.H, dataset.n_students
    )
    return dataset, truth_draw


@dataclass(frozen=True, eq=False)
class EmpiricalTransitions:
    """Row-normalized score-class transitions from `occasion` to ``occasion + 1``.

    Rows without any subject are all zero and flagged in `empty_rows`.
    """

    occasion: int
    group: Any
    counts: np.ndarray
    matrix: np.ndarray = field(init=False)
    empty_rows: np.ndarray = field(init=False)

    def __post_init__(self):
        totals = self.counts.sum(axis=1)
        empty = totals == 0
        matrix = np.divide(
            self.counts, totals[:, None], out=np.zeros_like(self.counts), where=~empty[:, None]
        )
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "empty_rows", empty)


def score_classes(scores: np.ndarray, n_items: int, n_classes: int,
                  breaks_mode: Literal["quantile", "width"] = "quantile") -> np.ndarray:
    """0-based score classes; ``width`` cuts ``[0, n_items]`` evenly, ``quantile`` by quantiles."""
    if breaks_mode == "width":
        edges = np.linspace(0.0, n_items, n_classes + 1)
    elif breaks_mode == "quantile":
        edges = np.quantile(scores, np.linspace(0.0, 1.0, n_classes + 1)) if scores.size else (
            np.linspace(0.0, n_items, n_classes + 1)
        )
    else:
        raise InvalidArgument(f'breaks_mode must be "quantile" or "width", got "{breaks_mode}"')
    return np.digitize(scores, edges[1:-1])


def empirical_transitions(dataset: Dataset, n_classes: int,
                          breaks_mode: Literal["quantile", "width"] = "quantile",
                          split: str | None = None) -> list[EmpiricalTransitions]:
    """Transitions between classes of total scores on consecutive occasions.

    The total score counts correct answers; missing answers count as wrong.
    Breaks are computed per occasion over all subjects. With `split`, one
    table per distinct value of that cluster covariate is returned.
    """
    if n_classes < 2:
        raise InvalidArgument(f"n_classes must be at least 2, got {n_classes}")
    design, batch = dataset.design, dataset.batch
    classes = np.column_stack([
        score_classes(np.nansum(batch.responses[t], axis=1), design.J[t], n_classes, breaks_mode)
        for t in range(design.T)
    ]).reshape(batch.N, design.T)

    if split is None:
        groups = [(None, np.ones(batch.N, dtype=bool))]
    else:
        values = dataset.cluster_covariate(split)[batch.cluster_index]
        groups = [(value, values == value) for value in np.unique(values)]

    out = []
    for value, mask in groups:
        for t in range(design.T - 1):
            counts = np.zeros((n_classes, n_classes))
            np.add.at(counts, (classes[mask, t], classes[mask, t + 1]), 1.0)
            table = EmpiricalTransitions(t + 1, value, counts)
            if table.empty_rows.any():
                LOGGER.warning(
                    "lmrasch: Score classes %s at occasion %d are empty%s.",
                    (np.flatnonzero(table.empty_rows) + 1).tolist(),
                    t + 1,
                    "" if value is None else f" for {split}={value:g}",
                )
            out.append(table)
    return out
