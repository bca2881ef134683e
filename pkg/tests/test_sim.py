import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longmix import sim
from longmix.lmm import LmmSpec, fit_lmm
from longmix.nlmm import smm_curve
from longmix.sim import (
    GRID,
    SCENARIOS,
    Challenge,
    Scenario,
    StudyError,
    apply_challenge,
    generate_dataset,
    mse_bias,
    run_study,
)

A = SCENARIOS["A"]


# ---------------------------------------------------------------- mse / bias


def test_mse_bias_examples():
    truth = A.truth(GRID)
    exact = mse_bias(np.tile(truth, (5, 1)), truth, GRID)
    assert np.all(exact.bias == 0) and np.all(exact.mse == 0)
    off = mse_bias(np.tile(truth + 0.1, (3, 1)), truth, GRID)
    np.testing.assert_allclose(off.bias, 0.1, atol=1e-14)
    np.testing.assert_allclose(off.mse, 0.01, atol=1e-14)
    pm = np.tile(truth, (2, 1))
    pm[0, 4] += 1.0
    pm[1, 4] -= 1.0
    cells = mse_bias(pm, truth, GRID)
    assert abs(cells.bias[4]) < 1e-14 and cells.mse[4] == pytest.approx(1.0, abs=1e-14)


def test_mse_bias_errors_and_single_replicate():
    truth = A.truth(GRID)
    with pytest.raises(ValueError):
        mse_bias(np.zeros((2, 5)), truth, GRID)
    one = mse_bias(truth[None, :] + np.linspace(0, 1, GRID.size), truth, GRID)
    assert one.R == 1 and np.all(one.var == 0)
    np.testing.assert_array_equal(one.mse, one.bias ** 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(0, 10_000))
def test_mse_dominates_squared_bias(R, seed):
    rng = np.random.default_rng(seed)
    truth = A.truth(GRID)
    curves = truth + rng.normal(0.0, rng.uniform(0.01, 2.0), (R, GRID.size))
    cells = mse_bias(curves, truth, GRID)
    assert np.all(cells.mse >= cells.bias ** 2)
    np.testing.assert_allclose(cells.mse, np.mean((curves - truth) ** 2, axis=0), rtol=1e-10, atol=1e-14)


# ---------------------------------------------------------------- scenarios and generation


def test_scenario_validation():
    with pytest.raises(ValueError):
        Scenario("bad", (-1.0, 0.4, 1.0, 1.0))
    with pytest.raises(ValueError):
        Scenario("bad", (-1.0, 0.4, -4.0, 0.0))
    with pytest.raises(ValueError):
        Scenario("bad", (-1.0, 0.4, -4.0, 1.0), var_b0=0.0)
    with pytest.raises(ValueError):
        Scenario("bad", (-1.0, 0.4, -4.0, 1.0), corr=1.5)
    with pytest.raises(ValueError):
        Challenge("weekly-visits")
    with pytest.raises(ValueError):
        generate_dataset(A, 0, 1)


def test_generation_is_deterministic():
    a, b = generate_dataset(A, 200, 7), generate_dataset(A, 200, 7)
    assert a.dataset.to_csv() == b.dataset.to_csv()
    assert generate_dataset(A, 200, 8).dataset.to_csv() != a.dataset.to_csv()


def test_visit_jitter_bound_and_final_visit():
    d = generate_dataset(A, 500, 3)
    for s in d.dataset.subjects:
        plan = d.planned[s.id]
        assert np.all(np.abs(s.times - plan) <= 2 / 12 + 1e-12)
        assert np.all(s.times <= 0) and plan[-1] == 0.0
        assert np.all(np.abs(s.times - np.round(s.times)) <= 2 / 12 + 1e-12)


def test_missing_includes_final_flag():
    s = Scenario("A", A.beta, missing_rate=0.5, missing_includes_final=True)
    d = generate_dataset(s, 400, 2)
    lost = sum(d.planned[x.id][-1] != 0.0 for x in d.dataset.subjects)
    assert 150 < lost < 250


def test_scenario_a_marginal_levels():
    d = generate_dataset(A, 1000, 11)
    se = np.sqrt((A.var_b0 + A.error_var) / 1000) * 1.1
    y0 = [s.outcomes[-1] for s in d.dataset.subjects if d.planned[s.id][-1] == 0]
    assert abs(np.mean(y0) - (-1.03)) < 3 * se
    y15 = [s.outcomes[d.planned[s.id] == -15][0] for s in d.dataset.subjects if np.any(d.planned[s.id] == -15)]
    assert abs(np.mean(y15) - A.truth([-15.0])[0]) < 3 * np.sqrt((A.var_b1 + A.error_var) / len(y15))


def test_large_cohort_mean_matches_truth():
    d = generate_dataset(A, 10_000, 5)
    beta = np.array(A.beta)
    for t in GRID:
        r = []
        for s in d.dataset.subjects:
            hit = d.planned[s.id] == t
            if hit.any():
                r.append(s.outcomes[hit][0] - smm_curve(s.times[hit], beta)[0])
        r = np.array(r)
        assert abs(r.mean()) < 3 * r.std(ddof=1) / np.sqrt(r.size)


# ---------------------------------------------------------------- challenges


def test_terminal_missing_removes_exactly_thirty_percent():
    d = generate_dataset(A, 1000, 4)
    c = apply_challenge(d, Challenge("terminal-missing-30pct"), 4)
    lost = 0
    for before, after in zip(d.dataset.subjects, c.dataset.subjects):
        had = np.any(before.times > -1)
        has = np.any(after.times > -1)
        lost += had and not has
        assert after.n_obs >= 1
    assert lost == 300


def test_challenge_none_is_identity():
    d = generate_dataset(A, 50, 1)
    assert apply_challenge(d, Challenge("none"), 9).dataset.to_csv() == d.dataset.to_csv()


def test_half_short_series():
    d = generate_dataset(A, 400, 6)
    c = apply_challenge(d, Challenge("half-short-series-4"), 6)
    changed = 0
    for before, after in zip(d.dataset.subjects, c.dataset.subjects):
        if before.n_obs <= 4:
            np.testing.assert_array_equal(after.times, before.times)
        if after.n_obs != before.n_obs:
            changed += 1
            assert after.n_obs == 4
            np.testing.assert_array_equal(after.times, before.times[-4:])
    short = sum(s.n_obs <= 4 for s in c.dataset.subjects)
    assert short >= 200 and changed <= 200


def test_triennial_spacing():
    d = generate_dataset(A, 200, 2)
    c = apply_challenge(d, Challenge("triennial-visits"), 2)
    for s in c.dataset.subjects:
        plan = c.planned[s.id]
        assert np.all(np.mod(-plan, 3) == 0)
        if plan.size > 1:
            assert np.all(np.mod(np.diff(plan), 3) == 0)


def test_small_n_regenerates():
    d = generate_dataset(A, 500, 2)
    assert apply_challenge(d, Challenge("small-n-150"), 2).dataset.n_subjects == 150


# ---------------------------------------------------------------- models and study


def test_quadratic_marginal_is_non_monotone_in_scenario_a():
    ds = generate_dataset(A, 500, 1).dataset
    fit = fit_lmm(ds, LmmSpec("quadratic", method="ML"))
    y = fit.model.marginal({}, GRID).values
    d = np.diff(y)
    assert np.any(d > 0) and np.any(d < 0)


def test_single_replicate_study_has_zero_variance():
    rep = run_study(A, Challenge("none"), models=("lmm-quadratic",), R=1, N=60, seed=1)
    cells = rep.cells["lmm-quadratic"]
    assert cells.R == 1 and np.all(cells.var == 0)
    np.testing.assert_array_equal(cells.mse, cells.bias ** 2)
    header = rep.to_csv().splitlines()[0]
    assert header == "scenario,challenge,model,t,bias,mse,var,R_effective"


def test_study_is_deterministic():
    kw = dict(models=("lmm-quadratic", "smm"), R=2, N=60, seed=3)
    a = run_study(SCENARIOS["B"], Challenge("none"), **kw)
    b = run_study(SCENARIOS["B"], Challenge("none"), **kw)
    assert a.to_csv() == b.to_csv() and a.curves_csv() == b.curves_csv()


def test_study_rejects_unknown_model():
    with pytest.raises(ValueError):
        run_study(A, Challenge("none"), models=("gam",), R=1, N=20)


def test_all_failed_replicates_raise(monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("no convergence")

    monkeypatch.setattr(sim, "fit_model", boom)
    with pytest.raises(StudyError):
        run_study(A, Challenge("none"), models=("lmm-quadratic",), R=2, N=30, seed=0)


def test_failed_replicates_are_excluded_and_counted(monkeypatch):
    real = sim.fit_model
    calls = {"n": 0}

    def flaky(model, ds, seed, jitter=None):
        calls["n"] += 1
        if calls["n"] <= 2:
            raise RuntimeError("no convergence")
        return real(model, ds, seed, jitter)

    monkeypatch.setattr(sim, "fit_model", flaky)
    rep = run_study(A, Challenge("none"), models=("lmm-quadratic",), R=3, N=40, seed=0)
    assert rep.failures["lmm-quadratic"] == 1 and rep.cells["lmm-quadratic"].R == 2
