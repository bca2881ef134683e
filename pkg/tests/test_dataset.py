import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longmix.dataset import (
    DatasetError,
    LongitudinalDataset,
    Subject,
    center_covariates,
    load_dataset,
    summarize,
    uncenter_covariates,
)
from longmix.sim import SCENARIOS, generate_dataset

CSV = """subject_id,time,outcome,edu,ageDeath
a,-2,0.5,17,95
a,-1,0.25,17,95
a,0,-0.5,17,95
b,-3.5,1.0,12,88
b,0,0.0,12,88
"""


def test_minimal_file():
    ds = load_dataset("subject_id,time,outcome\ns,-2,1\ns,-1,2\ns,0,3\n")
    assert ds.n_subjects == 1 and ds.subjects[0].n_obs == 3


def test_grouping_sorting_and_counts():
    ds = load_dataset(CSV)
    assert ds.n_subjects == 2 and ds.n_obs == 5
    assert ds.covariate_names == ("edu", "ageDeath")
    np.testing.assert_array_equal(ds.subject("a").times, [-2, -1, 0])


def test_positive_time_names_row():
    rows = ["subject_id,time,outcome"] + [f"s,{-10 + k},0" for k in range(6)] + ["s,0.5,1"]
    with pytest.raises(DatasetError, match="row 7"):
        load_dataset("\n".join(rows) + "\n")


@pytest.mark.parametrize(
    "text, match",
    [
        ("subject_id,outcome\ns,1\n", "missing column"),
        ("subject_id,time,outcome\ns,-1,abc\n", "row 1: non-numeric"),
        ("subject_id,time,outcome,edu\ns,-1,0,12\ns,0,0,13\n", "row 2: covariate 'edu' varies"),
        ("subject_id,time,outcome\ns,-1,0\ns,-1,1\n", "duplicate time"),
        ("subject_id,time,outcome\ns,-30,0\n", "horizon"),
        ("", "header"),
    ],
)
def test_load_errors(text, match):
    with pytest.raises(DatasetError, match=match):
        load_dataset(text)


def test_schema_maps_column_names():
    ds = load_dataset("id,yrs,cog\ns,-1,0\n", schema={"subject_id": "id", "time": "yrs", "outcome": "cog"})
    assert ds.n_obs == 1


def test_missing_outcome_dropped_with_warning(caplog):
    ds = load_dataset("subject_id,time,outcome\ns,-2,1\ns,-1,\ns,0,NA\n")
    assert ds.n_obs == 1
    assert "dropped 2 rows" in caplog.text


def test_large_panel_counts():
    # 13,064 rows over 1,276 subjects
    rng = np.random.default_rng(0)
    sizes = np.full(1276, 10)
    sizes[: 13064 - 12760] += 1
    rng.shuffle(sizes)
    lines = ["subject_id,time,outcome"]
    for i, n in enumerate(sizes):
        lines += [f"p{i},{-k},{rng.normal():.3f}" for k in range(n)]
    ds = load_dataset("\n".join(lines))
    assert (ds.n_subjects, ds.n_obs) == (1276, 13064)


def test_centering_examples():
    ds = load_dataset(CSV)
    c = center_covariates(ds, {"edu": 17, "ageDeath": 90})
    assert c.subject("a").covariates == {"edu": 0.0, "ageDeath": 5.0}
    assert c.centers == {"edu": 17.0, "ageDeath": 90.0}
    z = center_covariates(ds, {"edu": 0})
    np.testing.assert_array_equal(z.covariate_matrix(["edu"]), ds.covariate_matrix(["edu"]))
    with pytest.raises(DatasetError, match="unknown covariate"):
        center_covariates(ds, {"height": 1})


def test_centering_replaces_not_accumulates():
    ds = load_dataset(CSV)
    twice = center_covariates(center_covariates(ds, {"edu": 10}), {"edu": 17})
    assert twice.subject("a").covariates["edu"] == 0.0


def test_summary_examples():
    ds = load_dataset("subject_id,time,outcome\ns,-4,0\ns,-3,0\ns,-2,0\ns,-1,0\ns,0,0\n")
    summ = summarize(ds)
    assert summ.follow_up_mean == 4.0 and "covariates" not in summ.to_dict()


def test_summary_on_simulated_cohort():
    s = summarize(generate_dataset(SCENARIOS["A"], 1000, 1).dataset)
    # follow-up is Normal(10, 5) truncated to [4, 24]; the truncated mean is about 11.1
    assert 9.5 < s.follow_up_mean < 12.0 and 3.5 < s.follow_up_sd < 5.5


def test_json_round_trip():
    ds = center_covariates(load_dataset(CSV), {"edu": 17})
    back = LongitudinalDataset.from_dict(json.loads(ds.to_json()))
    assert back.to_csv() == ds.to_csv() and back.centers == ds.centers


def test_subject_validation():
    with pytest.raises(DatasetError):
        Subject("x", [0.0, -1.0], [1.0, 2.0])
    with pytest.raises(DatasetError):
        Subject("x", [], [])
    with pytest.raises(DatasetError):
        LongitudinalDataset(())


def _panels():
    times = st.lists(st.integers(-240, 0), min_size=1, max_size=6, unique=True)
    subject = st.tuples(times, st.floats(-5, 5, allow_nan=False), st.integers(8, 20))
    return st.lists(subject, min_size=1, max_size=6)


def _write(panel, order=None):
    rows = []
    for i, (ts, y0, edu) in enumerate(panel):
        for k, t in enumerate(ts):
            rows.append(f"s{i},{t / 10},{y0 + k * 0.125!r},{edu}")
    if order is not None:
        rows = [rows[j] for j in order]
    return "subject_id,time,outcome,edu\n" + "\n".join(rows) + "\n"


@settings(max_examples=40, deadline=None)
@given(_panels(), st.randoms())
def test_round_trip_and_permutation(panel, rnd):
    text = _write(panel)
    ds = load_dataset(text)
    again = load_dataset(ds.to_csv())
    assert again.to_dict() == ds.to_dict()
    order = list(range(sum(len(p[0]) for p in panel)))
    rnd.shuffle(order)
    assert load_dataset(_write(panel, order)).to_dict() == ds.to_dict()


@settings(max_examples=40, deadline=None)
@given(_panels(), st.floats(-50, 50, allow_nan=False))
def test_center_uncenter_exact(panel, c):
    ds = load_dataset(_write(panel))
    back = uncenter_covariates(center_covariates(ds, {"edu": c}))
    assert [s.raw_covariates for s in back.subjects] == [s.raw_covariates for s in ds.subjects]
    assert back.centers == {}
