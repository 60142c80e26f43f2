import json

import numpy as np
import pandas as pd
import pytest

from lmrasch import InvalidDesign, LoadError, RunManifest, load_bundle, write_bundle
from lmrasch.bundle import (
    item_probability_frame,
    parameter_frame,
    read_json,
    state_posterior_frame,
    transitions_frame,
    write_report,
)
from lmrasch.simulation import empirical_transitions

DESIGN = "occasion,item,difficulty_id\n1,1,1\n1,2,2\n2,1,1\n2,2,3\n"
CLUSTERS = "cluster_id,public\nA,1\nB,0\n"
SUBJECTS = (
    "cluster_id,subject_id,occasion,age\n"
    "A,s1,1,10\nA,s1,2,11\n"
    "A,s2,1,12\nA,s2,2,13\n"
    "B,s1,1,9\nB,s1,2,10\n"
)
RESPONSES = (
    "cluster_id,subject_id,occasion,item,response\n"
    "A,s1,1,1,1\nA,s1,1,2,0\nA,s1,2,1,1\nA,s1,2,2,\n"
    "A,s2,1,1,0\nA,s2,2,2,1\n"
    "B,s1,1,1,1\nB,s1,1,2,1\nB,s1,2,1,0\nB,s1,2,2,0\n"
)


def write_files(root, **overrides):
    files = {
        "design.csv": DESIGN,
        "cluster_covariates.csv": CLUSTERS,
        "subject_covariates.csv": SUBJECTS,
        "responses.csv": RESPONSES,
    }
    files.update({f"{name}.csv": text for name, text in overrides.items()})
    for name, text in files.items():
        if text is not None:
            (root / name).write_text(text)
    return root


def test_load_minimal_bundle(tmp_path):
    design, dataset = load_bundle(write_files(tmp_path))
    assert design.link == ((1, 2), (1, 3))
    assert design.D == 3
    assert [c.id for c in dataset.clusters] == ["A", "B"]
    assert dataset.cluster_covariates == ("public",)
    assert dataset.subject_covariates == ("age",)
    assert dataset.n_students == 3
    first = dataset.clusters[0].subjects[0]
    np.testing.assert_array_equal(first.responses[0], [1.0, 0.0])
    assert first.responses[1][0] == 1.0 and np.isnan(first.responses[1][1])
    np.testing.assert_array_equal(first.z[:, 0], [10.0, 11.0])
    # Absent rows are missing answers.
    second = dataset.clusters[0].subjects[1]
    assert np.isnan(second.responses[0][1]) and np.isnan(second.responses[1][0])
    np.testing.assert_array_equal(dataset.clusters[1].x, [0.0])


def test_subject_ids_are_scoped_by_cluster(tmp_path):
    _, dataset = load_bundle(write_files(tmp_path))
    assert [s.id for s in dataset.clusters[1].subjects] == ["s1"]
    assert dataset.clusters[1].subjects[0].responses[0].tolist() == [1.0, 1.0]


def test_undeclared_item_reports_line(tmp_path):
    write_files(tmp_path, responses=RESPONSES + "B,s1,2,3,1\n")
    with pytest.raises(LoadError, match="item 3 at occasion 2") as info:
        load_bundle(tmp_path)
    assert info.value.line == 12
    assert info.value.column == "item"
    assert info.value.path.endswith("responses.csv")


def test_undeclared_subject(tmp_path):
    write_files(tmp_path, responses=RESPONSES + "B,s9,1,1,1\n")
    with pytest.raises(LoadError, match='undeclared subject "s9"') as info:
        load_bundle(tmp_path)
    assert info.value.line == 12


def test_undeclared_cluster(tmp_path):
    write_files(tmp_path, subject_covariates=SUBJECTS + "C,s1,1,8\nC,s1,2,9\n")
    with pytest.raises(LoadError, match='undeclared cluster "C"') as info:
        load_bundle(tmp_path)
    assert info.value.line == 8


def test_bad_response_value(tmp_path):
    write_files(tmp_path, responses=RESPONSES.replace("A,s2,1,1,0", "A,s2,1,1,2"))
    with pytest.raises(LoadError, match="0, 1 or empty") as info:
        load_bundle(tmp_path)
    assert info.value.line == 6
    assert info.value.column == "response"


@pytest.mark.parametrize(
    "override,message",
    [
        ({"responses": RESPONSES + "A,s1,1,1,0\n"}, "duplicate response"),
        ({"cluster_covariates": CLUSTERS + "A,1\n"}, 'duplicate cluster "A"'),
        ({"subject_covariates": SUBJECTS + "B,s1,2,10\n"}, "duplicate row"),
        ({"subject_covariates": SUBJECTS + "B,s2,1,10\n"}, r"occasions \[2\]"),
        ({"cluster_covariates": "cluster_id,public\nA,yes\nB,0\n"}, "finite number"),
        ({"design": "occasion,item\n1,1\n"}, 'missing required column "difficulty_id"'),
        ({"design": "occasion,item,difficulty_id\n1,1,0\n"}, "integer >= 1"),
        ({"responses": None}, "file not found"),
        ({"responses": ""}, "header row"),
    ],
)
def test_load_errors(tmp_path, override, message):
    write_files(tmp_path, **override)
    with pytest.raises(LoadError, match=message):
        load_bundle(tmp_path)


def test_load_error_is_a_design_error(tmp_path):
    write_files(tmp_path, design="occasion,item,difficulty_id\n1,1,1\n1,1,2\n")
    with pytest.raises(InvalidDesign):
        load_bundle(tmp_path)


def test_write_then_load_is_identity(tmp_path, simulated):
    _, dataset, _ = simulated
    write_bundle(tmp_path / "bundle", dataset)
    design, loaded = load_bundle(tmp_path / "bundle")
    assert design.link == dataset.design.link
    assert [c.id for c in loaded.clusters] == [c.id for c in dataset.clusters]
    assert loaded.cluster_covariates == dataset.cluster_covariates
    assert loaded.subject_covariates == dataset.subject_covariates
    for t in range(design.T):
        np.testing.assert_array_equal(loaded.batch.responses[t], dataset.batch.responses[t])
    np.testing.assert_array_equal(loaded.batch.x, dataset.batch.x)
    np.testing.assert_array_equal(loaded.batch.z, dataset.batch.z)


def test_write_report_precision(tmp_path):
    path = tmp_path / "report.csv"
    write_report(pd.DataFrame({"value": [1.0 / 3.0]}), path)
    assert path.read_text().splitlines() == ["value", "0.333333"]


def test_read_json_errors(tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text('{"a": 1,\n}')
    with pytest.raises(LoadError, match="invalid JSON") as info:
        read_json(broken)
    assert info.value.line == 2
    with pytest.raises(LoadError, match="cannot read"):
        read_json(tmp_path / "absent.json")


def test_run_manifest(tmp_path):
    write_files(tmp_path)
    manifest = RunManifest(command="fit", argv=["fit", "--data", str(tmp_path)], seed=3)
    manifest.add_inputs(tmp_path)
    out = tmp_path / "out"
    out.mkdir()
    doc = json.loads(manifest.write(out).read_text())
    assert doc["command"] == "fit"
    assert doc["seed"] == 3
    assert len(doc["inputs"]) == 4
    assert all(len(digest) == 64 for digest in doc["inputs"].values())
    assert doc["wall_time"] >= 0.0
    assert "version" in doc


def test_frames(simulated):
    _, dataset, _ = simulated
    n, T = dataset.n_students, dataset.design.T
    z1 = np.full((n, T, 2), 0.5)
    frame = state_posterior_frame(dataset, z1, np.ones((n, T), dtype=int))
    assert len(frame) == n * T
    assert list(frame.columns) == [
        "cluster_id", "subject_id", "occasion", "state_1", "state_2", "map_state"
    ]
    tables = empirical_transitions(dataset, 3, split="school_type")
    stacked = transitions_frame(tables, "school_type")
    assert stacked.columns[0] == "school_type"
    assert len(stacked) == len(tables) * 3


def test_first_offending_response_row_is_reported(tmp_path):
    broken = RESPONSES.replace("A,s2,1,1,0", "A,s2,1,1,x") + "B,s9,1,1,1\n"
    write_files(tmp_path, responses=broken)
    with pytest.raises(LoadError, match="0, 1 or empty") as info:
        load_bundle(tmp_path)
    assert info.value.line == 6
    # An undeclared subject is reported before its bad response value.
    write_files(tmp_path, responses=RESPONSES.replace("A,s2,1,1,0", "A,s7,1,1,x"))
    with pytest.raises(LoadError, match='undeclared subject "s7"') as info:
        load_bundle(tmp_path)
    assert info.value.line == 6


def test_empty_identifier(tmp_path):
    write_files(tmp_path, responses=RESPONSES.replace("B,s1,1,1,1", "B, ,1,1,1"))
    with pytest.raises(LoadError, match="empty identifier") as info:
        load_bundle(tmp_path)
    assert info.value.line == 8
    assert info.value.column == "subject_id"


def test_parameter_frame(fitted):
    frame = parameter_frame(fitted.params)
    assert list(frame.columns) == ["param", "estimate"]
    assert len(frame) == fitted.params.n_free
    assert "theta:1" not in set(frame["param"])
    row = frame[frame["param"] == "beta:2"]
    assert row["estimate"].item() == fitted.params.value("beta:2")


def test_item_probability_frame(simulated, fitted):
    spec, _, _ = simulated
    frame = item_probability_frame(fitted.params, spec.design)
    assert list(frame.columns) == ["occasion", "item", "difficulty_id", "state_1", "state_2"]
    assert len(frame) == sum(spec.design.J)
    first = frame.iloc[0]
    theta, beta = fitted.params.theta, fitted.params.beta
    np.testing.assert_allclose(
        [first["state_1"], first["state_2"]], 1.0 / (1.0 + np.exp(beta[0] - theta))
    )
    # The higher ability state answers every item at least as well.
    assert (frame["state_2"] >= frame["state_1"]).all()
