"""Item designs, datasets and the stacked arrays the engines work on."""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from lmrasch.exceptions import InvalidDesign


@dataclass(frozen=True)
class ItemDesign:
    """Occasions, items per occasion and the item-to-difficulty linkage.

    `link[t - 1][j - 1]` is the 1-based difficulty id ``d`` of item ``j`` at
    occasion ``t``. Items replicated across occasions share one ``d``.
    """

    link: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if not self.link:
            raise InvalidDesign("An item design needs at least one occasion")
        for t, items in enumerate(self.link, start=1):
            if not items:
                raise InvalidDesign(f"Occasion {t} has no items")
            for d in items:
                if int(d) != d or d < 1:
                    raise InvalidDesign(f"Difficulty ids must be positive integers, got {d!r}")
        used = {d for items in self.link for d in items}
        missing = sorted(set(range(1, max(used) + 1)) - used)
        if missing:
            raise InvalidDesign(f"Difficulty ids {missing} are never referenced by an item")

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[int, int, int]]) -> ItemDesign:
        """Build a design from ``(occasion, item, difficulty_id)`` triples."""
        table: dict[tuple[int, int], int] = {}
        for t, j, d in rows:
            if (t, j) in table:
                raise InvalidDesign(f"Item {j} at occasion {t} is declared twice")
            table[(t, j)] = d
        if not table:
            raise InvalidDesign("An item design needs at least one item")
        n_occasions = max(t for t, _ in table)
        link = []
        for t in range(1, n_occasions + 1):
            items = sorted(j for (tt, j) in table if tt == t)
            if items != list(range(1, len(items) + 1)):
                raise InvalidDesign(f"Items at occasion {t} must be numbered 1..J_t, got {items}")
            link.append(tuple(table[(t, j)] for j in items))
        return cls(tuple(link))

    @classmethod
    def unlinked(cls, items_per_occasion: Iterable[int]) -> ItemDesign:
        """A design in which every item has its own difficulty."""
        link, d = [], 0
        for n_items in items_per_occasion:
            link.append(tuple(range(d + 1, d + n_items + 1)))
            d += n_items
        return cls(tuple(link))

    @property
    def T(self) -> int:
        return len(self.link)

    @property
    def J(self) -> tuple[int, ...]:
        return tuple(len(items) for items in self.link)

    @property
    def D(self) -> int:
        return max(d for items in self.link for d in items)

    def difficulty_id(self, occasion: int, item: int) -> int:
        return self.link[occasion - 1][item - 1]

    def columns(self, occasion: int) -> np.ndarray:
        """0-based difficulty indices of the items at `occasion`."""
        return np.asarray(self.link[occasion - 1], dtype=int) - 1

    def rows(self) -> list[tuple[int, int, int]]:
        return [
            (t, j, d)
            for t, items in enumerate(self.link, start=1)
            for j, d in enumerate(items, start=1)
        ]


@dataclass(frozen=True, eq=False)
class Subject:
    """One student: responses per occasion (NaN = missing) and covariates ``z``, shape (T, p_i)."""

    id: str
    responses: tuple[np.ndarray, ...]
    z: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "responses", tuple(np.asarray(r, dtype=float) for r in self.responses)
        )
        object.__setattr__(self, "z", np.atleast_2d(np.asarray(self.z, dtype=float)))
        for r in self.responses:
            observed = r[~np.isnan(r)]
            if np.any((observed != 0) & (observed != 1)):
                raise InvalidDesign(f"Subject {self.id}: responses must be 0, 1 or missing")


@dataclass(frozen=True, eq=False)
class Cluster:
    id: str
    x: np.ndarray
    subjects: tuple[Subject, ...]

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).reshape(-1))
        object.__setattr__(self, "subjects", tuple(self.subjects))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Clustered longitudinal responses sharing one :class:`ItemDesign`."""

    design: ItemDesign
    clusters: tuple[Cluster, ...]
    cluster_covariates: tuple[str, ...] = ()
    subject_covariates: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        p_c, p_i = len(self.cluster_covariates), len(self.subject_covariates)
        for cluster in self.clusters:
            if cluster.x.shape != (p_c,):
                raise InvalidDesign(
                    f"Cluster {cluster.id} has {cluster.x.size} covariates, expected {p_c}"
                )
            for subject in cluster.subjects:
                if len(subject.responses) != self.design.T:
                    raise InvalidDesign(
                        f"Subject {subject.id} has {len(subject.responses)} occasions, "
                        f"expected {self.design.T}"
                    )
                for t, (r, n_items) in enumerate(
                    zip(subject.responses, self.design.J), start=1
                ):
                    if r.shape != (n_items,):
                        raise InvalidDesign(
                            f"Subject {subject.id} has {r.size} responses at occasion {t}, "
                            f"expected {n_items}"
                        )
                if subject.z.shape != (self.design.T, p_i):
                    raise InvalidDesign(
                        f"Subject {subject.id} covariates have shape {subject.z.shape}, "
                        f"expected {(self.design.T, p_i)}"
                    )

    @property
    def H(self) -> int:
        return len(self.clusters)

    @property
    def p_c(self) -> int:
        return len(self.cluster_covariates)

    @property
    def p_i(self) -> int:
        return len(self.subject_covariates)

    @property
    def n_students(self) -> int:
        return sum(len(c.subjects) for c in self.clusters)

    def subjects(self) -> list[tuple[Cluster, Subject]]:
        return [(c, s) for c in self.clusters for s in c.subjects]

    @cached_property
    def batch(self) -> Batch:
        return Batch.from_clusters(self.design, self.clusters, self.p_c, self.p_i)

    def cluster_covariate(self, name: str) -> np.ndarray:
        try:
            col = self.cluster_covariates.index(name)
        except ValueError:
            raise KeyError(f'Cluster covariate "{name}" not found') from None
        return np.array([c.x[col] for c in self.clusters])


@dataclass(frozen=True, eq=False)
class Batch:
    """Subjects of consecutive clusters stacked into arrays.

    Attributes:
        responses: per occasion, an ``(N, J_t)`` array with NaN for missing.
        z: ``(N, T, p_i)`` individual covariates.
        x: ``(H, p_c)`` cluster covariates.
        cluster_index: ``(N,)`` 0-based cluster of every subject.
    """

    responses: tuple[np.ndarray, ...]
    z: np.ndarray
    x: np.ndarray
    cluster_index: np.ndarray

    @classmethod
    def from_clusters(cls, design: ItemDesign, clusters: Iterable[Cluster],
                      p_c: int, p_i: int) -> Batch:
        clusters = list(clusters)
        subjects = [s for c in clusters for s in c.subjects]
        responses = tuple(
            np.array([s.responses[t] for s in subjects], dtype=float).reshape(
                len(subjects), design.J[t]
            )
            for t in range(design.T)
        )
        z = np.array([s.z for s in subjects], dtype=float).reshape(len(subjects), design.T, p_i)
        x = np.array([c.x for c in clusters], dtype=float).reshape(len(clusters), p_c)
        index = np.repeat(np.arange(len(clusters)), [len(c.subjects) for c in clusters])
        return cls(responses, z, x, index.astype(int))

    @property
    def N(self) -> int:
        return self.cluster_index.size

    @property
    def H(self) -> int:
        return self.x.shape[0]

    def select(self, start: int, stop: int) -> Batch:
        """The sub-batch of clusters ``start..stop-1`` (re-indexed from 0)."""
        mask = (self.cluster_index >= start) & (self.cluster_index < stop)
        return Batch(
            tuple(r[mask] for r in self.responses),
            self.z[mask],
            self.x[start:stop],
            self.cluster_index[mask] - start,
        )
