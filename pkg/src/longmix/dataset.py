"""Unbalanced longitudinal panels on a retrospective (years-before-event) time scale.

Times are non-positive: t = 0 is the terminal event, t = -5 is five years
before it. Subjects carry baseline covariates; centering is recorded as an
offset registry so that raw values stay recoverable bit-for-bit.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_HORIZON = 24.0

REQUIRED_COLUMNS = ("subject_id", "time", "outcome")


class DatasetError(ValueError):
    """Raised for malformed input data; the message names the offending row."""


class Observation(NamedTuple):
    time: float
    outcome: float


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Subject:
    """One subject: strictly increasing times, outcomes, raw baseline covariates."""

    id: str
    times: np.ndarray
    outcomes: np.ndarray
    raw_covariates: Mapping[str, float] = field(default_factory=dict)
    centers: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        times = _frozen(self.times)
        outcomes = _frozen(self.outcomes)
        if times.ndim != 1 or times.shape != outcomes.shape:
            raise DatasetError(f"subject {self.id}: times and outcomes must be 1-d of equal length")
        if times.size == 0:
            raise DatasetError(f"subject {self.id}: no observations")
        if np.any(np.diff(times) <= 0):
            raise DatasetError(f"subject {self.id}: times must be strictly increasing")
        if not np.all(np.isfinite(outcomes)):
            raise DatasetError(f"subject {self.id}: non-finite outcome")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "raw_covariates", dict(self.raw_covariates))
        object.__setattr__(self, "centers", dict(self.centers))

    @property
    def n_obs(self) -> int:
        return int(self.times.size)

    @property
    def observations(self) -> list[Observation]:
        return [Observation(float(t), float(y)) for t, y in zip(self.times, self.outcomes)]

    @property
    def covariates(self) -> dict[str, float]:
        """Covariates after centering (raw value minus the registered offset)."""
        return {k: v - self.centers.get(k, 0.0) for k, v in self.raw_covariates.items()}

    @property
    def follow_up(self) -> float:
        return float(self.times[-1] - self.times[0])

    def with_observations(self, keep: np.ndarray) -> "Subject":
        """Copy restricted to a boolean mask (or index array) of observations."""
        return Subject(self.id, self.times[keep], self.outcomes[keep], self.raw_covariates, self.centers)


@dataclass(frozen=True)
class LongitudinalDataset:
    subjects: tuple[Subject, ...]
    centers: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        subjects = tuple(self.subjects)
        if not subjects:
            raise DatasetError("dataset has no subjects")
        ids = [s.id for s in subjects]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate subject ids")
        object.__setattr__(self, "subjects", subjects)
        object.__setattr__(self, "centers", dict(self.centers))

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_obs(self) -> int:
        return sum(s.n_obs for s in self.subjects)

    @property
    def covariate_names(self) -> tuple[str, ...]:
        names: dict[str, None] = {}
        for s in self.subjects:
            for k in s.raw_covariates:
                names.setdefault(k, None)
        return tuple(names)

    @property
    def all_times(self) -> np.ndarray:
        return np.concatenate([s.times for s in self.subjects])

    @property
    def all_outcomes(self) -> np.ndarray:
        return np.concatenate([s.outcomes for s in self.subjects])

    @property
    def mean_n_obs(self) -> float:
        return self.n_obs / self.n_subjects

    def subject(self, subject_id: str) -> Subject:
        for s in self.subjects:
            if s.id == subject_id:
                return s
        raise KeyError(subject_id)

    def covariate_matrix(self, names: Iterable[str]) -> np.ndarray:
        """(N, len(names)) matrix of centered covariates, subjects in dataset order."""
        names = list(names)
        out = np.empty((self.n_subjects, len(names)))
        for i, s in enumerate(self.subjects):
            cov = s.covariates
            for j, name in enumerate(names):
                if name not in cov or not math.isfinite(cov[name]):
                    raise DatasetError(f"subject {s.id}: covariate {name!r} missing or not finite")
                out[i, j] = cov[name]
        return out

    def replace_subjects(self, subjects: Iterable[Subject]) -> "LongitudinalDataset":
        return LongitudinalDataset(tuple(subjects), self.centers)

    def to_csv(self, raw: bool = True) -> str:
        """Serialize as CSV (one row per observation)."""
        names = self.covariate_names
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(REQUIRED_COLUMNS) + list(names))
        for s in self.subjects:
            cov = s.raw_covariates if raw else s.covariates
            tail = [repr(float(cov[n])) for n in names]
            for t, y in zip(s.times, s.outcomes):
                writer.writerow([s.id, repr(float(t)), repr(float(y))] + tail)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "covariate_registry": {"names": list(self.covariate_names), "centers": dict(self.centers)},
            "subjects": [
                {
                    "id": s.id,
                    "observations": [{"time": float(t), "outcome": float(y)} for t, y in zip(s.times, s.outcomes)],
                    "covariates": {k: float(v) for k, v in s.raw_covariates.items()},
                }
                for s in self.subjects
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "LongitudinalDataset":
        centers = dict(payload.get("covariate_registry", {}).get("centers", {}))
        subjects = []
        for rec in payload["subjects"]:
            obs = rec["observations"]
            subjects.append(
                Subject(
                    str(rec["id"]),
                    [o["time"] for o in obs],
                    [o["outcome"] for o in obs],
                    {k: float(v) for k, v in rec.get("covariates", {}).items()},
                    centers,
                )
            )
        return cls(tuple(subjects), centers)


def load_dataset(
    csv_text: str | io.TextIOBase,
    schema: Mapping[str, str] | None = None,
    horizon: float = DEFAULT_HORIZON,
) -> LongitudinalDataset:
    """Parse a long-format CSV into a dataset.

    ``schema`` maps the canonical names ``subject_id``, ``time`` and ``outcome``
    to the file's column names; every other column is read as a baseline
    covariate. Rows with an empty outcome are dropped (and counted in a log
    warning). Row numbers in error messages are 1-based data rows, so the
    first line after the header is row 1.
    """
    schema = dict(schema or {})
    stream = io.StringIO(csv_text) if isinstance(csv_text, str) else csv_text
    reader = csv.reader(stream)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DatasetError("empty file: header row required") from None

    colmap = {canon: schema.get(canon, canon) for canon in REQUIRED_COLUMNS}
    for canon, col in colmap.items():
        if col not in header:
            raise DatasetError(f"missing column {col!r} (for {canon})")
    index = {canon: header.index(col) for canon, col in colmap.items()}
    cov_cols = [(j, h) for j, h in enumerate(header) if j not in index.values()]

    rows: dict[str, list[tuple[float, float, int]]] = {}
    covs: dict[str, tuple[dict[str, float], int]] = {}
    n_dropped = 0
    for rownum, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DatasetError(f"row {rownum}: expected {len(header)} fields, got {len(row)}")
        sid = row[index["subject_id"]].strip()
        if not sid:
            raise DatasetError(f"row {rownum}: empty subject_id")
        t = _parse_float(row[index["time"]], rownum, "time")
        if t is None:
            raise DatasetError(f"row {rownum}: empty time")
        if t > 0:
            raise DatasetError(f"row {rownum}: time {t} > 0 (times are years before the event)")
        if t < -horizon:
            raise DatasetError(f"row {rownum}: time {t} is before the horizon -{horizon}")
        y = _parse_float(row[index["outcome"]], rownum, "outcome")
        cov = {}
        for j, name in cov_cols:
            v = _parse_float(row[j], rownum, name)
            if v is None:
                raise DatasetError(f"row {rownum}: empty covariate {name!r}")
            cov[name] = v
        if sid in covs:
            prev, first_row = covs[sid]
            for name, v in cov.items():
                if prev[name] != v:
                    raise DatasetError(
                        f"row {rownum}: covariate {name!r} varies within subject {sid} (row {first_row} has {prev[name]})"
                    )
        else:
            covs[sid] = (cov, rownum)
        if y is None:
            n_dropped += 1
            continue
        rows.setdefault(sid, []).append((t, y, rownum))

    if n_dropped:
        logger.warning("dropped %d rows with missing outcome", n_dropped)

    subjects = []
    for sid in sorted(rows):
        obs = sorted(rows[sid])
        for (t0, _, r0), (t1, _, r1) in zip(obs, obs[1:]):
            if t0 == t1:
                raise DatasetError(f"row {max(r0, r1)}: duplicate time {t1} for subject {sid} (also row {min(r0, r1)})")
        subjects.append(Subject(sid, [o[0] for o in obs], [o[1] for o in obs], covs[sid][0]))
    if not subjects:
        raise DatasetError("no observations")
    return LongitudinalDataset(tuple(subjects))


def _parse_float(cell: str, rownum: int, name: str) -> float | None:
    cell = cell.strip()
    if cell == "" or cell.upper() == "NA":
        return None
    try:
        value = float(cell)
    except ValueError:
        raise DatasetError(f"row {rownum}: non-numeric value {cell!r} in column {name!r}") from None
    if not math.isfinite(value):
        raise DatasetError(f"row {rownum}: non-finite value in column {name!r}")
    return value


def center_covariates(ds: LongitudinalDataset, centers: Mapping[str, float]) -> LongitudinalDataset:
    """Register centering offsets; centered value = raw value - center.

    Offsets replace (not accumulate onto) previously registered ones, so
    raw values are always recoverable with ``uncenter_covariates``.
    """
    known = set(ds.covariate_names)
    for name in centers:
        if name not in known:
            raise DatasetError(f"unknown covariate {name!r}")
    merged = dict(ds.centers)
    merged.update({k: float(v) for k, v in centers.items()})
    return _with_centers(ds, merged)


def uncenter_covariates(ds: LongitudinalDataset) -> LongitudinalDataset:
    return _with_centers(ds, {})


def _with_centers(ds: LongitudinalDataset, centers: dict[str, float]) -> LongitudinalDataset:
    subjects = tuple(Subject(s.id, s.times, s.outcomes, s.raw_covariates, centers) for s in ds.subjects)
    return LongitudinalDataset(subjects, centers)


@dataclass(frozen=True)
class DatasetSummary:
    n_subjects: int
    n_obs: int
    follow_up_mean: float
    follow_up_sd: float
    covariates: dict[str, tuple[float, float]]

    def to_dict(self) -> dict:
        out = {
            "n_subjects": self.n_subjects,
            "n_obs": self.n_obs,
            "follow_up_mean": self.follow_up_mean,
            "follow_up_sd": self.follow_up_sd,
        }
        if self.covariates:
            out["covariates"] = {k: {"mean": m, "sd": sd} for k, (m, sd) in self.covariates.items()}
        return out


def summarize(ds: LongitudinalDataset) -> DatasetSummary:
    fu = np.array([s.follow_up for s in ds.subjects])
    sd = float(fu.std(ddof=1)) if fu.size > 1 else 0.0
    cov = {}
    names = ds.covariate_names
    if names:
        mat = ds.covariate_matrix(names)
        for j, name in enumerate(names):
            col = mat[:, j]
            cov[name] = (float(col.mean()), float(col.std(ddof=1)) if col.size > 1 else 0.0)
    return DatasetSummary(ds.n_subjects, ds.n_obs, float(fu.mean()), sd, cov)
