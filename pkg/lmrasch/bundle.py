"""On-disk formats: the four-file data bundle, reports and the run manifest.

A bundle directory holds

* ``design.csv``: ``occasion,item,difficulty_id``
* ``responses.csv``: ``cluster_id,subject_id,occasion,item,response``
  (``response`` is 0, 1 or empty for missing; absent rows are missing too)
* ``cluster_covariates.csv``: ``cluster_id`` plus one column per covariate
* ``subject_covariates.csv``: ``cluster_id,subject_id,occasion`` plus one
  column per covariate

Clusters are declared by ``cluster_covariates.csv`` and subjects by
``subject_covariates.csv``, in file order. Errors report the file, the
1-based line (the header is line 1) and the column.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from lmrasch.data import Cluster, Dataset, ItemDesign, Subject
from lmrasch.exceptions import InvalidDesign, LoadError
from lmrasch.params import Parameters, rasch_prob

LOGGER = logging.getLogger("lmrasch")

DESIGN_FILE = "design.csv"
RESPONSES_FILE = "responses.csv"
CLUSTER_COVARIATES_FILE = "cluster_covariates.csv"
SUBJECT_COVARIATES_FILE = "subject_covariates.csv"
BUNDLE_FILES = (DESIGN_FILE, RESPONSES_FILE, CLUSTER_COVARIATES_FILE, SUBJECT_COVARIATES_FILE)

FLOAT_FORMAT = "%.6g"


def tool_version() -> str:
    try:
        return version("lmrasch")
    except PackageNotFoundError:
        return "unknown"


def _read(path: Path, required: tuple[str, ...]) -> pd.DataFrame:
    if not path.is_file():
        raise LoadError("file not found", path=str(path))
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise LoadError("file is empty, a header row is required", path=str(path)) from None
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise LoadError(f"cannot parse CSV ({exc})", path=str(path)) from None
    frame.columns = [c.strip() for c in frame.columns]
    for column in required:
        if column not in frame.columns:
            raise LoadError(f'missing required column "{column}"', path=str(path), line=1)
    duplicated = frame.columns[frame.columns.duplicated()]
    if len(duplicated):
        raise LoadError(f'duplicate column "{duplicated[0]}"', path=str(path), line=1)
    return frame


def _line(index: int) -> int:
    return index + 2


def _integer(frame: pd.DataFrame, column: str, path: Path, minimum: int = 1) -> list[int]:
    text = frame[column].str.strip()
    valid = text.str.fullmatch(r"[+-]?\d+")
    values = pd.to_numeric(text.where(valid), errors="coerce")
    bad = ~valid | (values < minimum)
    if bad.any():
        index = bad.idxmax()
        raise LoadError(
            f'expected an integer >= {minimum}, got "{frame.at[index, column]}"',
            path=str(path), line=_line(index), column=column,
        )
    return values.astype(int).tolist()


def _number(text: str, path: Path, index: int, column: str) -> float:
    try:
        value = float(text.strip())
    except ValueError:
        value = float("nan")
    if not np.isfinite(value):
        raise LoadError(
            f'expected a finite number, got "{text}"', path=str(path), line=_line(index),
            column=column,
        )
    return value


def _ids(frame: pd.DataFrame, columns: tuple[str, ...], path: Path) -> list[tuple[str, ...]]:
    stripped = pd.DataFrame({c: frame[c].str.strip() for c in columns}, index=frame.index)
    empty = np.argwhere((stripped == "").to_numpy())
    if len(empty):
        row, col = empty[0]
        raise LoadError("empty identifier", path=str(path), line=_line(stripped.index[row]),
                        column=columns[col])
    return list(stripped.itertuples(index=False, name=None))


def load_design(path: Path) -> ItemDesign:
    frame = _read(path, ("occasion", "item", "difficulty_id"))
    rows = zip(
        _integer(frame, "occasion", path),
        _integer(frame, "item", path),
        _integer(frame, "difficulty_id", path),
    )
    try:
        return ItemDesign.from_rows(rows)
    except InvalidDesign as exc:
        raise LoadError(str(exc), path=str(path)) from None


def load_bundle(dir_path: str | Path) -> tuple[ItemDesign, Dataset]:
    """Parse and cross-validate the four bundle files."""
    root = Path(dir_path)
    design = load_design(root / DESIGN_FILE)

    path = root / CLUSTER_COVARIATES_FILE
    frame = _read(path, ("cluster_id",))
    cluster_names = tuple(c for c in frame.columns if c != "cluster_id")
    cluster_x: dict[str, np.ndarray] = {}
    for index, (cid,) in zip(frame.index, _ids(frame, ("cluster_id",), path)):
        if cid in cluster_x:
            raise LoadError(f'duplicate cluster "{cid}"', path=str(path), line=_line(index),
                            column="cluster_id")
        cluster_x[cid] = np.array(
            [_number(frame.at[index, c], path, index, c) for c in cluster_names]
        )

    path = root / SUBJECT_COVARIATES_FILE
    frame = _read(path, ("cluster_id", "subject_id", "occasion"))
    subject_names = tuple(
        c for c in frame.columns if c not in ("cluster_id", "subject_id", "occasion")
    )
    occasions = _integer(frame, "occasion", path)
    covariates: dict[tuple[str, str], np.ndarray] = {}
    declared: dict[tuple[str, str], set[int]] = {}
    for index, key, t in zip(
        frame.index, _ids(frame, ("cluster_id", "subject_id"), path), occasions
    ):
        if key[0] not in cluster_x:
            raise LoadError(f'undeclared cluster "{key[0]}"', path=str(path),
                            line=_line(index), column="cluster_id")
        if t > design.T:
            raise LoadError(f"occasion {t} is not in the design (T = {design.T})",
                            path=str(path), line=_line(index), column="occasion")
        seen = declared.setdefault(key, set())
        if t in seen:
            raise LoadError(f'duplicate row for subject "{key[1]}" at occasion {t}',
                            path=str(path), line=_line(index))
        seen.add(t)
        z = covariates.setdefault(key, np.zeros((design.T, len(subject_names))))
        z[t - 1] = [_number(frame.at[index, c], path, index, c) for c in subject_names]
    for (cid, sid), seen in declared.items():
        if len(seen) != design.T:
            missing = sorted(set(range(1, design.T + 1)) - seen)
            raise LoadError(f'subject "{sid}" of cluster "{cid}" has no covariate row for '
                            f"occasions {missing}", path=str(path))

    path = root / RESPONSES_FILE
    frame = _read(path, ("cluster_id", "subject_id", "occasion", "item", "response"))
    occasions = np.array(_integer(frame, "occasion", path), dtype=int)
    items = np.array(_integer(frame, "item", path), dtype=int)
    keys = _ids(frame, ("cluster_id", "subject_id"), path)
    position = {key: i for i, key in enumerate(covariates)}
    rows = np.array([position.get(key, -1) for key in keys], dtype=int)
    text = frame["response"].str.strip().to_numpy()

    n_items = np.array((0, *design.J))
    in_design = (occasions <= design.T) & (items <= n_items[np.minimum(occasions, design.T)])
    duplicate = pd.DataFrame({"row": rows, "t": occasions, "j": items}).duplicated().to_numpy()
    problems = np.column_stack(
        [rows < 0, ~in_design, duplicate, ~np.isin(text, ["", "0", "1"])]
    )
    bad = np.flatnonzero(problems.any(axis=1))
    if bad.size:
        i = bad[0]
        t, j, key = occasions[i], items[i], keys[i]
        message, column = [
            (f'undeclared subject "{key[1]}" of cluster "{key[0]}"', "subject_id"),
            (f"item {j} at occasion {t} is not in the design", "item"),
            (f"duplicate response for item {j} at occasion {t}", None),
            (f'response must be 0, 1 or empty, got "{text[i]}"', "response"),
        ][int(np.argmax(problems[i]))]
        raise LoadError(message, path=str(path), line=_line(frame.index[i]), column=column)

    grids = [np.full((len(position), J_t), np.nan) for J_t in design.J]
    answered = text != ""
    for t, grid in enumerate(grids, start=1):
        at_t = answered & (occasions == t)
        grid[rows[at_t], items[at_t] - 1] = text[at_t].astype(float)

    members: dict[str, list[Subject]] = {cid: [] for cid in cluster_x}
    for i, ((cid, sid), z) in enumerate(covariates.items()):
        members[cid].append(Subject(sid, tuple(grid[i].copy() for grid in grids), z))
    clusters = tuple(Cluster(cid, cluster_x[cid], tuple(members[cid])) for cid in cluster_x)
    dataset = Dataset(design, clusters, cluster_names, subject_names)
    LOGGER.info(
        "lmrasch: Loaded %d clusters, %d subjects and %d occasions from %s.",
        dataset.H, dataset.n_students, design.T, root,
    )
    return design, dataset


def write_bundle(dir_path: str | Path, dataset: Dataset) -> None:
    """Write `dataset` as a bundle that :func:`load_bundle` reads back unchanged."""
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    design = dataset.design
    pd.DataFrame(design.rows(), columns=["occasion", "item", "difficulty_id"]).to_csv(
        root / DESIGN_FILE, index=False
    )
    cluster_rows, subject_rows, response_rows = [], [], []
    for cluster in dataset.clusters:
        cluster_rows.append([cluster.id, *cluster.x])
        for subject in cluster.subjects:
            for t in range(design.T):
                subject_rows.append([cluster.id, subject.id, t + 1, *subject.z[t]])
                for j, y in enumerate(subject.responses[t], start=1):
                    response_rows.append(
                        [cluster.id, subject.id, t + 1, j, "" if np.isnan(y) else str(int(y))]
                    )
    pd.DataFrame(cluster_rows, columns=["cluster_id", *dataset.cluster_covariates]).to_csv(
        root / CLUSTER_COVARIATES_FILE, index=False
    )
    pd.DataFrame(
        subject_rows, columns=["cluster_id", "subject_id", "occasion", *dataset.subject_covariates]
    ).to_csv(root / SUBJECT_COVARIATES_FILE, index=False)
    pd.DataFrame(
        response_rows, columns=["cluster_id", "subject_id", "occasion", "item", "response"]
    ).to_csv(root / RESPONSES_FILE, index=False)


def write_report(frame: pd.DataFrame, path: str | Path) -> None:
    """Write a result table with numbers at 6 significant digits."""
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def write_json(doc: Any, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: str | Path) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise LoadError(f"cannot read file ({exc.strerror})", path=str(path)) from None
    except json.JSONDecodeError as exc:
        raise LoadError(f"invalid JSON ({exc.msg})", path=str(path), line=exc.lineno) from None


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunManifest:
    """What was run, on which inputs, with which settings."""

    command: str
    argv: list[str]
    config: dict[str, Any] = field(default_factory=dict)
    seed: int | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    version: str = field(default_factory=tool_version)
    started: float = field(default_factory=time.time)
    wall_time: float = 0.0

    def add_inputs(self, *paths: str | Path) -> None:
        for path in paths:
            path = Path(path)
            if path.is_dir():
                for name in BUNDLE_FILES:
                    if (path / name).is_file():
                        self.inputs[str(path / name)] = file_digest(path / name)
            elif path.is_file():
                self.inputs[str(path)] = file_digest(path)

    def write(self, out_dir: str | Path) -> Path:
        self.wall_time = time.time() - self.started
        target = Path(out_dir) / "manifest.json"
        write_json(asdict(self), target)
        return target


def trace_frame(trace) -> pd.DataFrame:
    return pd.DataFrame({"iteration": np.arange(len(trace)), "loglik": np.asarray(trace)})


def parameter_frame(params: Parameters) -> pd.DataFrame:
    """Every free scalar with its estimate, block by block."""
    ids = params.free_ids()
    return pd.DataFrame(
        {"param": [str(pid) for pid in ids], "estimate": [params.value(pid) for pid in ids]}
    )


def item_probability_frame(params: Parameters, design: ItemDesign) -> pd.DataFrame:
    """Probability of a correct answer for each occasion, item and ability state."""
    rows = []
    for t, items in enumerate(design.link, start=1):
        for j, d in enumerate(items, start=1):
            record: dict[str, Any] = {"occasion": t, "item": j, "difficulty_id": d}
            probs = np.atleast_1d(rasch_prob(params.theta, params.beta[d - 1]))
            record.update({f"state_{v}": p for v, p in enumerate(probs, start=1)})
            rows.append(record)
    return pd.DataFrame(rows)


def cluster_posterior_frame(dataset: Dataset, w: np.ndarray, classes: np.ndarray
                            ) -> pd.DataFrame:
    frame = pd.DataFrame(w, columns=[f"class_{u}" for u in range(1, w.shape[1] + 1)])
    frame.insert(0, "cluster_id", [c.id for c in dataset.clusters])
    frame["map_class"] = classes
    return frame


def state_posterior_frame(dataset: Dataset, z1: np.ndarray, states: np.ndarray
                          ) -> pd.DataFrame:
    """One row per subject and occasion with the posterior state probabilities."""
    n, T, k2 = z1.shape
    keys = [(c.id, s.id) for c, s in dataset.subjects()]
    frame = pd.DataFrame(
        z1.reshape(n * T, k2), columns=[f"state_{v}" for v in range(1, k2 + 1)]
    )
    frame.insert(0, "cluster_id", np.repeat([k[0] for k in keys], T))
    frame.insert(1, "subject_id", np.repeat([k[1] for k in keys], T))
    frame.insert(2, "occasion", np.tile(np.arange(1, T + 1), n))
    frame["map_state"] = states.reshape(n * T)
    return frame


def state_distribution_frame(distribution: np.ndarray) -> pd.DataFrame:
    T, k2 = distribution.shape
    frame = pd.DataFrame(distribution, columns=[f"state_{v}" for v in range(1, k2 + 1)])
    frame.insert(0, "occasion", np.arange(1, T + 1))
    return frame


def transitions_frame(tables, split: str | None = None) -> pd.DataFrame:
    """Empirical transition tables stacked one matrix row per line."""
    rows = []
    for table in tables:
        for a, (row, empty) in enumerate(zip(table.matrix, table.empty_rows), start=1):
            record: dict[str, Any] = {}
            if split is not None:
                record[split] = table.group
            record.update(occasion_from=table.occasion, occasion_to=table.occasion + 1,
                          from_class=a)
            record.update({f"class_{b}": p for b, p in enumerate(row, start=1)})
            record["subjects"] = int(table.counts[a - 1].sum())
            record["empty"] = bool(empty)
            rows.append(record)
    return pd.DataFrame(rows)


def fitted_transitions_frame(matrices: np.ndarray) -> pd.DataFrame:
    rows = []
    for t, matrix in enumerate(matrices, start=1):
        for a, row in enumerate(matrix, start=1):
            record: dict[str, Any] = {"occasion_from": t, "occasion_to": t + 1, "from_state": a}
            record.update({f"state_{b}": p for b, p in enumerate(row, start=1)})
            rows.append(record)
    return pd.DataFrame(rows)
