import math

import numpy as np
import pytest

from lmrasch import (
    ConstraintViolation,
    InvalidArgument,
    ItemDesign,
    ParamId,
    Parameters,
    bic,
    cluster_class_probs,
    count_parameters,
    cumulative_logits,
    initial_probs,
    invert_global_logits,
    rasch_prob,
    transition_matrix,
)
from lmrasch.reparam import Layout, Segment
from tests.oracle import central_gradient, random_params

# (k1, k2, loglik, BIC, np) for D=85 difficulties, 3 cluster and 4 student covariates,
# T=3 occasions and 1246 students.
SCHOOL_GRID = [
    (1, 1, -76565.77, 153737.40, 85),
    (1, 2, -71340.91, 143415.97, 103),
    (1, 3, -70275.94, 141357.31, 113),
    (1, 4, -69878.97, 140663.16, 127),
    (1, 5, -69703.14, 140439.79, 145),
    (1, 6, -69703.14, 140439.79, 145),
    (1, 7, -69561.12, 140497.88, 193),
    (2, 2, -71266.31, 143316.67, 110),
    (2, 3, -70187.30, 141229.93, 120),
    (2, 4, -69771.10, 140497.30, 134),
    (2, 5, -69579.94, 140243.28, 152),
    (2, 6, -69490.77, 140221.77, 174),
    (2, 7, -69425.48, 140276.51, 200),
    (3, 2, -70187.30, 141229.93, 120),
    (3, 3, -70128.67, 141162.56, 127),
    (3, 4, -69707.65, 140420.31, 141),
    (3, 5, -69515.20, 140163.70, 159),
    (3, 6, -69410.43, 140110.98, 181),
    (3, 7, -69349.18, 140173.78, 207),
    (4, 2, -71204.06, 143291.96, 124),
    (4, 3, -70093.64, 141142.39, 134),
    (4, 4, -69664.37, 140383.63, 148),
    (4, 5, -69482.37, 140147.94, 166),
    (4, 6, -69374.80, 140089.61, 188),
    (4, 7, -69315.71, 140156.75, 214),
    (5, 2, -71184.70, 143303.13, 131),
    (5, 3, -70073.61, 141152.23, 141),
    (5, 4, -69631.02, 140366.83, 155),
    (5, 5, -69457.00, 140147.09, 173),
    (5, 6, -69356.58, 140103.06, 195),
    (5, 7, -69297.09, 140169.39, 221),
]
# Rows whose printed count disagrees with the model: a repeated row and a duplicate.
SUSPECT_ROWS = {(1, 6), (3, 2)}


@pytest.mark.parametrize(
    "k1,k2,expected",
    [(k1, k2, n) for k1, k2, _, _, n in SCHOOL_GRID if (k1, k2) not in SUSPECT_ROWS],
)
def test_count_parameters_school_grid(k1, k2, expected):
    assert count_parameters(k1, k2, D=85, p_c=3, p_i=4, T=3) == expected


def test_count_parameters_suspect_rows_differ():
    assert count_parameters(1, 6, 85, 3, 4, 3) == 167
    assert count_parameters(3, 2, 85, 3, 4, 3) == 117


@pytest.mark.parametrize("k1,k2,loglik,expected,n_params", SCHOOL_GRID)
def test_bic_school_grid(k1, k2, loglik, expected, n_params):
    assert bic(loglik, n_params, 1246) == pytest.approx(expected, abs=0.05)


def test_bic_trivial():
    assert bic(0.0, 0, 1) == 0.0
    with pytest.raises(InvalidArgument):
        bic(-1.0, 2, 0)


def test_count_parameters_small():
    assert count_parameters(1, 1, 1, 0, 0, 1) == 1
    assert count_parameters(2, 2, 5, 0, 0, 2) == 12
    with pytest.raises(InvalidArgument):
        count_parameters(0, 1, 1, 0, 0, 1)


def test_count_matches_free_ids(rng):
    design = ItemDesign.unlinked([2, 3, 1])
    for k1, k2 in [(1, 1), (2, 1), (1, 3), (3, 2)]:
        params = random_params(rng, k1, k2, design, p_c=2, p_i=1)
        assert len(params.free_ids()) == params.n_free


def test_rasch_prob():
    assert rasch_prob(0.0, 0.0) == 0.5
    assert rasch_prob(1.0, 1.0) == 0.5
    assert rasch_prob(math.log(3.0), 0.0) == pytest.approx(0.75)
    assert rasch_prob(40.0, 0.0) == pytest.approx(1.0)
    assert 0.0 < rasch_prob(-40.0, 0.0) < 1e-15
    with pytest.raises(InvalidArgument):
        rasch_prob(float("nan"), 0.0)


def test_invert_global_logits_examples():
    np.testing.assert_allclose(invert_global_logits([0.0]), [0.5, 0.5])
    np.testing.assert_allclose(invert_global_logits([1e6, -1e6]), [0.0, 1.0, 0.0], atol=1e-12)
    g = [math.log(3.0)]
    np.testing.assert_allclose(invert_global_logits(g), [0.25, 0.75])


def test_invert_global_logits_rejects_increase():
    with pytest.raises(ConstraintViolation):
        invert_global_logits([0.0, 1.0])


def test_invert_global_logits_equal_logits_zero_category():
    pi = invert_global_logits([0.5, 0.5])
    assert pi[1] == 0.0
    assert pi.sum() == pytest.approx(1.0)


def test_global_logits_round_trip(rng):
    for _ in range(20):
        g = -np.sort(-rng.normal(0.0, 3.0, 4))
        np.testing.assert_allclose(cumulative_logits(invert_global_logits(g)), g, atol=1e-8)


def test_invert_global_logits_tail_accuracy():
    pi = invert_global_logits([-40.0, -41.0])
    assert pi[1] > 0.0
    assert pi[2] > 0.0


def test_cluster_class_probs():
    design = ItemDesign.unlinked([1])
    params = Parameters.zeros(3, 1, design.D, 1, 0, 1)
    np.testing.assert_allclose(cluster_class_probs(params, [0.7]), [1 / 3] * 3)
    params = params.replace(gamma0=np.array([math.log(3.0), 0.0]))
    np.testing.assert_allclose(cluster_class_probs(params, [0.0]), [0.2, 0.6, 0.2])
    with pytest.raises(InvalidArgument):
        cluster_class_probs(params, [0.0, 1.0])


def test_initial_and_transition_probs(rng):
    design = ItemDesign.unlinked([2, 2, 2])
    params = random_params(rng, 2, 3, design, p_i=2)
    z = rng.normal(size=2)
    pi = initial_probs(params, z, 2)
    assert pi.shape == (3,)
    assert pi.sum() == pytest.approx(1.0)
    matrix = transition_matrix(params, z, 1, 3)
    np.testing.assert_allclose(matrix.sum(axis=1), 1.0)
    with pytest.raises(InvalidArgument):
        initial_probs(params, z, 3)
    with pytest.raises(InvalidArgument):
        transition_matrix(params, z, 1, 1)


def test_uniform_transition():
    design = ItemDesign.unlinked([1, 1])
    params = Parameters.zeros(1, 2, design.D, 0, 0, 2)
    np.testing.assert_allclose(transition_matrix(params, [], 1, 2), 0.5)


def test_parameters_constraints():
    design = ItemDesign.unlinked([1, 1])
    params = Parameters.zeros(1, 3, design.D, 0, 0, 2)
    with pytest.raises(ConstraintViolation, match="theta_1"):
        params.replace(theta=np.array([1.0, 2.0, 3.0]))
    with pytest.raises(ConstraintViolation, match="non-decreasing"):
        params.replace(theta=np.array([0.0, 2.0, 1.0]))
    with pytest.raises(ConstraintViolation, match="delta1"):
        params.replace(delta1=np.array([0.0, 1.0]))
    with pytest.raises(ConstraintViolation, match="eta1"):
        params.replace(eta1=np.array([[[0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]]))
    with pytest.raises(InvalidArgument):
        params.replace(beta=np.array([np.inf, 0.0]))


def test_parameters_are_read_only():
    params = Parameters.zeros(2, 2, 3, 0, 0, 2)
    with pytest.raises(ValueError):
        params.beta[0] = 1.0


def test_param_id_parse():
    pid = ParamId.parse("gamma1:2,1")
    assert pid == ParamId("gamma1", (2, 1))
    assert str(pid) == "gamma1:2,1"
    assert pid.position == (0, 0)
    with pytest.raises(InvalidArgument, match="block:i,j"):
        ParamId.parse("gamma1")
    with pytest.raises(KeyError):
        ParamId.parse("alpha:1")
    with pytest.raises(InvalidArgument):
        ParamId.parse("eta1:2,1")


def test_value_and_with_value(rng):
    design = ItemDesign.unlinked([2, 2])
    params = random_params(rng, 2, 3, design, p_c=1, p_i=1)
    changed = params.with_value("beta:3", 0.25)
    assert changed.value("beta:3") == 0.25
    assert params.value("beta:3") != 0.25
    with pytest.raises(KeyError):
        params.value("beta:9")
    with pytest.raises(ConstraintViolation):
        params.with_value("theta:1", 1.0)


def test_with_value_moves_ordered_row(rng):
    design = ItemDesign.unlinked([2, 2])
    params = random_params(rng, 1, 3, design)
    gaps = np.diff(params.eta1[0, 1])
    moved = params.with_value("eta1:2,2,2", 0.0)
    assert moved.eta1[0, 1, 0] == 0.0
    np.testing.assert_allclose(np.diff(moved.eta1[0, 1]), gaps)


def test_profile_ids_exclude_ordered_gaps(rng):
    params = random_params(rng, 2, 3, ItemDesign.unlinked([1, 1]), p_i=1)
    ids = {str(pid) for pid in params.profile_ids()}
    assert "delta1:2" in ids
    assert "delta1:3" not in ids
    assert "eta1:2,3,2" in ids
    assert "eta1:2,3,3" not in ids
    assert not any(pid.startswith("theta") for pid in ids)


def test_to_dict_round_trip(rng):
    params = random_params(rng, 2, 3, ItemDesign.unlinked([2, 1, 2]), p_c=1, p_i=2)
    restored = Parameters.from_dict(params.to_dict())
    for pid in params.free_ids():
        assert restored.value(pid) == params.value(pid)


def test_layout_round_trip_and_jacobian(rng):
    layout = Layout(Segment("increasing", 2), Segment("decreasing", 3), Segment("linear", 2))
    free = rng.normal(size=layout.n_free)
    raw = layout.raw(free)
    assert raw[0] == 0.0
    assert np.all(np.diff(raw[:3]) > 0)
    assert np.all(np.diff(raw[3:6]) < 0)
    np.testing.assert_allclose(layout.free(raw), free, atol=1e-12)
    jac = layout.jacobian(free)
    for i in range(layout.n_raw):
        numeric = central_gradient(lambda x, i=i: layout.raw(x)[i], free)
        np.testing.assert_allclose(jac[i], numeric, rtol=1e-6, atol=1e-8)


def test_layout_transform_matches_finite_differences(rng):
    """The chain rule through the reparametrization agrees with a direct numerical Hessian."""
    layout = Layout(Segment("increasing", 2), Segment("decreasing", 2))
    a = rng.normal(size=(layout.n_raw, layout.n_raw))
    quad = a @ a.T

    def value(free):
        raw = layout.raw(free)
        return -0.5 * raw @ quad @ raw + raw.sum()

    free = rng.normal(scale=0.5, size=layout.n_free)
    raw = layout.raw(free)
    grad, hess = layout.transform(free, -quad @ raw + 1.0, -quad)
    np.testing.assert_allclose(grad, central_gradient(value, free), rtol=1e-5, atol=1e-7)
    numeric = np.array([
        central_gradient(lambda x, i=i: layout.transform(x, -quad @ layout.raw(x) + 1.0,
                                                         -quad)[0][i], free)
        for i in range(layout.n_free)
    ])
    np.testing.assert_allclose(hess, numeric, rtol=1e-4, atol=1e-6)
