import dataclasses
import math

import numpy as np
import pytest

from lmrasch import (
    FitConfig,
    FitFailure,
    InvalidArgument,
    LikelihoodRatioError,
    bic,
    class_profile,
    fit,
    grid_search,
    lr_test,
    profile_se,
    standard_errors,
    wald_pvalue,
)
from lmrasch import selection
from lmrasch.selection import lr_slack, se_frame


def test_bic_examples():
    assert bic(-100.0, 10, 1000) == pytest.approx(200.0 + 10 * math.log(1000))
    assert bic(0.0, 0, 1) == 0.0


def test_lr_test_examples():
    assert lr_test(-100.0, -103.0) == pytest.approx(6.0)
    assert lr_test(-100.0, -100.0) == 0.0
    # Within numerical slack the statistic is returned unchanged.
    assert lr_test(-100.0, -100.0 + 4e-7) == pytest.approx(-8e-7)


def test_lr_test_rejects_better_constrained_fit():
    with pytest.raises(LikelihoodRatioError, match="restart|better optimum") as info:
        lr_test(-100.0, -99.0)
    assert info.value.statistic == pytest.approx(-2.0)


def test_wald_pvalue():
    p = wald_pvalue(1.263, 0.417)
    assert round(p, 3) == 0.002
    assert p == pytest.approx(0.00246, abs=1e-5)
    assert wald_pvalue(-1.263, 0.417) == p
    assert wald_pvalue(0.0, 1.0) == pytest.approx(1.0)
    assert math.isnan(wald_pvalue(1.0, 0.0))
    assert math.isnan(wald_pvalue(1.0, float("nan")))


def test_profile_se_identity(simulated, fitted):
    spec, dataset, _ = simulated
    config = FitConfig(max_iters=500, tol=1e-10)
    result = profile_se(spec.design, dataset, fitted, "beta:2", config)
    assert result.defined
    assert result.estimate == fitted.params.value("beta:2")
    assert (result.estimate / result.se) ** 2 == pytest.approx(result.lr_statistic, rel=1e-9)
    assert result.wald_p == pytest.approx(wald_pvalue(result.estimate, result.se))


def test_profile_se_undefined_at_zero(simulated, fitted):
    spec, dataset, _ = simulated
    restricted = fit(
        spec.design, dataset, 2, 2,
        FitConfig(max_iters=2000, tol=1e-5, n_random_starts=0),
        start=fitted.params.with_value("gamma1:2,1", 0.0),
        frozen=["gamma1:2,1"],
    )
    result = profile_se(spec.design, dataset, restricted, "gamma1:2,1")
    assert not result.defined
    assert result.estimate == 0.0
    assert result.lr_statistic == 0.0
    assert math.isnan(result.se)
    assert math.isnan(result.wald_p)


def test_profile_se_at_zero_skips_the_refit(monkeypatch, simulated, fitted):
    spec, dataset, _ = simulated

    def no_refit(*args, **kwargs):
        raise AssertionError("refit at a zero estimate")

    monkeypatch.setattr(selection, "fit", no_refit)
    zeroed = dataclasses.replace(fitted, params=fitted.params.with_value("beta:2", 0.0))
    assert not profile_se(spec.design, dataset, zeroed, "beta:2").defined


def test_profile_se_refits_full_model_after_better_constrained_fit(monkeypatch, simulated,
                                                                    fitted):
    spec, dataset, _ = simulated
    constrained = dataclasses.replace(
        fitted, params=fitted.params.with_value("beta:2", 0.0), loglik=fitted.loglik + 2.0
    )
    full = dataclasses.replace(fitted, loglik=fitted.loglik + 3.0)
    calls = []

    def fake_fit(design, data, k1, k2, config, *, start=None, frozen=()):
        calls.append((start, list(frozen)))
        return constrained if frozen else full

    monkeypatch.setattr(selection, "fit", fake_fit)
    result = profile_se(spec.design, dataset, fitted, "beta:2")
    assert len(calls) == 2
    assert calls[1][0] is constrained.params and calls[1][1] == []
    assert result.defined
    assert result.lr_statistic == pytest.approx(2.0)
    assert result.se == pytest.approx(abs(fitted.params.value("beta:2")) / math.sqrt(2.0))


def test_lr_slack_follows_em_tolerance():
    assert lr_slack(-1000.0, 1e-8) == pytest.approx(2.002e-5)
    assert lr_slack(-1.0, 1e-12) == 1e-6


def test_standard_errors_survive_a_failed_parameter(monkeypatch, simulated, fitted):
    spec, dataset, _ = simulated
    real_profile_se = selection.profile_se

    def flaky(design, data, result, pid, config):
        if str(pid) == "gamma0:2":
            raise LikelihoodRatioError(-3.0)
        if str(pid) == "delta0:1":
            raise FitFailure({0: "singular"})
        return real_profile_se(design, data, result, pid, config)

    monkeypatch.setattr(selection, "profile_se", flaky)
    results = standard_errors(spec.design, dataset, fitted, ["gamma0:2", "delta0:1", "beta:2"],
                              FitConfig(max_iters=300, tol=1e-9))
    assert [r.defined for r in results] == [False, False, True]
    assert results[0].lr_statistic == -3.0
    assert math.isnan(results[1].lr_statistic)
    assert results[0].estimate == fitted.params.value("gamma0:2")


def test_standard_errors_after_a_loose_fit(simulated):
    spec, dataset, _ = simulated
    loose = fit(spec.design, dataset, 2, 2, FitConfig(tol=1e-5, n_random_starts=0))
    ids = ["beta:2", "gamma1:2,1", "delta0:1"]
    results = standard_errors(spec.design, dataset, loose, ids, FitConfig(max_iters=500))
    assert [str(r.param) for r in results] == ids
    for r in results:
        if r.defined:
            assert (r.estimate / r.se) ** 2 == pytest.approx(r.lr_statistic, rel=1e-9)


def test_profile_se_rejects_ordered_parameters(simulated, fitted):
    spec, dataset, _ = simulated
    with pytest.raises(InvalidArgument, match="theta:2"):
        profile_se(spec.design, dataset, fitted, "theta:2")


def test_standard_errors_keep_order(simulated, fitted):
    spec, dataset, _ = simulated
    ids = ["gamma0:2", "beta:2"]
    results = standard_errors(spec.design, dataset, fitted, ids,
                              FitConfig(max_iters=300, tol=1e-9, threads=2))
    assert [str(r.param) for r in results] == ids
    frame = se_frame(results)
    assert list(frame.columns) == ["param", "estimate", "se", "wald_p"]
    assert list(frame["param"]) == ids


def test_grid_search_flags_one_best(simulated, quick_config):
    spec, dataset, _ = simulated
    result = grid_search(spec.design, dataset, range(1, 3), range(1, 3), quick_config)
    assert [(row.k1, row.k2) for row in result.rows] == [(1, 1), (1, 2), (2, 1), (2, 2)]
    flagged = [row for row in result.rows if row.best]
    assert len(flagged) == 1
    converged = [row.bic for row in result.rows if row.converged]
    assert flagged[0].bic == min(converged)
    assert result.best is flagged[0]
    assert set(result.fits) == {(1, 1), (1, 2), (2, 1), (2, 2)}
    for k1 in (1, 2):
        assert result.fits[(k1, 2)].loglik >= result.fits[(k1, 1)].loglik - 1e-4
    frame = result.to_frame()
    assert list(frame.columns) == ["k1", "k2", "loglik", "bic", "np", "converged", "best"]
    assert frame["best"].sum() == 1


def test_grid_search_keeps_failed_cells(monkeypatch, simulated, quick_config):
    spec, dataset, _ = simulated
    real_fit = selection.fit

    def flaky(design, data, k1, k2, config):
        if k2 == 2:
            raise FitFailure({0: "singular"})
        return real_fit(design, data, k1, k2, config)

    monkeypatch.setattr(selection, "fit", flaky)
    result = grid_search(spec.design, dataset, [1], [1, 2], quick_config)
    failed = result.rows[1]
    assert "singular" in failed.error
    assert not failed.best
    assert math.isnan(failed.bic)
    assert result.best.k2 == 1


def test_grid_search_rejects_empty_ranges(simulated):
    spec, dataset, _ = simulated
    with pytest.raises(InvalidArgument):
        grid_search(spec.design, dataset, [], [1])


def test_class_profile(simulated, fitted):
    _, dataset, _ = simulated
    frame = class_profile(fitted.params, dataset, "school_type")
    assert list(frame.columns) == ["school_type", "clusters", "class_1", "class_2"]
    assert frame["clusters"].sum() == dataset.H
    np.testing.assert_allclose(frame[["class_1", "class_2"]].sum(axis=1), 1.0)
    assert set(frame["school_type"]) <= {0.0, 1.0}
    with pytest.raises(KeyError):
        class_profile(fitted.params, dataset, "missing")
