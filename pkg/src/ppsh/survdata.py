"""Trial data model: subject records, validated datasets and CSV I/O.

A dataset holds one row per randomized subject. Each subject carries an
arm indicator, optional baseline covariates, the last known follow-up
time, an optional first non-fatal event time and an optional death time
(death always terminates follow-up).

Internally the records are stored column-wise as numpy arrays; the
estimators work on those arrays directly.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DataError",
    "SubjectRecord",
    "Dataset",
    "load_dataset",
    "save_dataset",
    "event_times",
    "risk_set",
    "at_risk_matrix",
]

BASE_COLUMNS = ("subject_id", "arm", "followup_time", "event_time",
                "event_status", "death_status")


class DataError(ValueError):
    """Raised for malformed or inconsistent trial data."""


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    arm: int
    followup_time: float
    event_time: float | None = None
    death_time: float | None = None
    covariates: tuple[float, ...] = field(default_factory=tuple)

    def validate(self) -> None:
        if self.arm not in (0, 1):
            raise DataError(f"subject {self.id!r}: arm must be 0 or 1, got {self.arm!r}")
        times = [("followup_time", self.followup_time),
                 ("event_time", self.event_time),
                 ("death_time", self.death_time)]
        for name, value in times:
            if value is None:
                continue
            if not math.isfinite(value) or value < 0:
                raise DataError(f"subject {self.id!r}: {name} must be finite and >= 0, got {value!r}")
        if self.event_time is not None and self.event_time > self.followup_time:
            raise DataError(
                f"subject {self.id!r}: event_time {self.event_time} exceeds "
                f"followup_time {self.followup_time}")
        if self.death_time is not None and self.death_time != self.followup_time:
            raise DataError(
                f"subject {self.id!r}: death_time {self.death_time} must equal "
                f"followup_time {self.followup_time}")
        for x in self.covariates:
            if not math.isfinite(x):
                raise DataError(f"subject {self.id!r}: non-finite covariate {x!r}")


class Dataset:
    """Immutable, validated collection of subjects stored column-wise.

    Attributes
    ----------
    ids : tuple of str
    arm : (n,) int array of 0/1
    followup : (n,) float array, last known follow-up time D_i
    event_time : (n,) float array, NaN where no non-fatal event was observed
    died : (n,) bool array, death observed at ``followup``
    covariates : (n, p) float array
    """

    __slots__ = ("ids", "arm", "followup", "event_time", "died", "covariates", "_design")

    def __init__(self, ids, arm, followup, event_time, died, covariates=None, *, check=True):
        n = len(ids)
        arm = np.asarray(arm, dtype=np.int64).reshape(n)
        followup = np.asarray(followup, dtype=float).reshape(n)
        event_time = np.asarray(event_time, dtype=float).reshape(n)
        died = np.asarray(died, dtype=bool).reshape(n)
        if covariates is None:
            covariates = np.zeros((n, 0))
        covariates = np.asarray(covariates, dtype=float)
        covariates = covariates.reshape(n, covariates.shape[-1] if covariates.ndim == 2 else -1)
        object.__setattr__(self, "ids", tuple(str(i) for i in ids))
        object.__setattr__(self, "arm", arm)
        object.__setattr__(self, "followup", followup)
        object.__setattr__(self, "event_time", event_time)
        object.__setattr__(self, "died", died)
        object.__setattr__(self, "covariates", covariates)
        object.__setattr__(self, "_design", None)
        for a in (arm, followup, event_time, died, covariates):
            a.setflags(write=False)
        if check:
            self._validate()

    def __setattr__(self, name, value):
        raise AttributeError("Dataset is immutable")

    def __reduce__(self):
        return (_restore, (self.ids, self.arm, self.followup, self.event_time, self.died,
                           self.covariates))

    def _validate(self) -> None:
        if len(set(self.ids)) != len(self.ids):
            seen = set()
            for k, i in enumerate(self.ids):
                if i in seen:
                    raise DataError(f"row {k + 1}: duplicate subject id {i!r}")
                seen.add(i)
        bad = ~np.isin(self.arm, (0, 1))
        if bad.any():
            raise DataError(f"row {int(np.argmax(bad)) + 1}: arm must be 0 or 1")
        bad = ~np.isfinite(self.followup) | (self.followup < 0)
        if bad.any():
            raise DataError(f"row {int(np.argmax(bad)) + 1}: followup_time must be finite and >= 0")
        has = ~np.isnan(self.event_time)
        bad = has & (~np.isfinite(self.event_time) | (self.event_time < 0)
                     | (self.event_time > self.followup))
        if bad.any():
            k = int(np.argmax(bad))
            raise DataError(
                f"row {k + 1}: event_time {self.event_time[k]} must lie in "
                f"[0, followup_time={self.followup[k]}]")
        bad = ~np.isfinite(self.covariates).all(axis=1)
        if bad.any():
            raise DataError(f"row {int(np.argmax(bad)) + 1}: non-finite covariate")

    # construction -----------------------------------------------------

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord]) -> "Dataset":
        records = list(records)
        dims = {len(r.covariates) for r in records}
        if len(dims) > 1:
            raise DataError(f"covariate lengths differ across records: {sorted(dims)}")
        for k, r in enumerate(records):
            try:
                r.validate()
            except DataError as exc:
                raise DataError(f"row {k + 1}: {exc}") from None
        p = dims.pop() if dims else 0
        return cls(
            [r.id for r in records],
            [r.arm for r in records],
            [r.followup_time for r in records],
            [np.nan if r.event_time is None else r.event_time for r in records],
            [r.death_time is not None for r in records],
            np.array([r.covariates for r in records], dtype=float).reshape(len(records), p),
        )

    # views -------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.ids)

    def __repr__(self) -> str:
        return (f"Dataset(n={len(self)}, covariate_dim={self.covariate_dim}, "
                f"events={int(self.has_event.sum())}, deaths={int(self.died.sum())})")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.ids == other.ids
                and np.array_equal(self.arm, other.arm)
                and np.array_equal(self.followup, other.followup)
                and np.array_equal(self.event_time, other.event_time, equal_nan=True)
                and np.array_equal(self.died, other.died)
                and np.array_equal(self.covariates, other.covariates))

    @property
    def covariate_dim(self) -> int:
        return self.covariates.shape[1]

    @property
    def has_event(self) -> np.ndarray:
        return ~np.isnan(self.event_time)

    @property
    def design(self) -> np.ndarray:
        """Regressor matrix with the arm indicator in column 0."""
        if self._design is None:
            x = np.column_stack([self.arm.astype(float), self.covariates])
            x.setflags(write=False)
            object.__setattr__(self, "_design", x)
        return self._design

    @property
    def records(self) -> list[SubjectRecord]:
        out = []
        for k in range(len(self)):
            ev = self.event_time[k]
            out.append(SubjectRecord(
                id=self.ids[k],
                arm=int(self.arm[k]),
                followup_time=float(self.followup[k]),
                event_time=None if np.isnan(ev) else float(ev),
                death_time=float(self.followup[k]) if self.died[k] else None,
                covariates=tuple(float(x) for x in self.covariates[k]),
            ))
        return out

    def subset(self, index, ids: Sequence[str] | None = None) -> "Dataset":
        """Rows selected by ``index`` (repeats allowed when ``ids`` relabels them)."""
        index = np.asarray(index, dtype=np.int64)
        new_ids = [self.ids[k] for k in index] if ids is None else list(ids)
        if len(set(new_ids)) != len(new_ids):
            raise DataError("subset would duplicate subject ids; pass fresh ids")
        return Dataset(new_ids, self.arm[index], self.followup[index],
                       self.event_time[index], self.died[index],
                       self.covariates[index], check=False)

    def require_both_arms(self) -> None:
        if len(self) == 0 or self.arm.min() == self.arm.max():
            raise DataError("both arms must be non-empty")


# CSV ---------------------------------------------------------------------

def _restore(*columns) -> Dataset:
    return Dataset(*columns, check=False)


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {row}: non-numeric {column} {text!r}") from None
    return value


def _parse_flag(text: str, row: int, column: str) -> int:
    value = _parse_float(text, row, column)
    if value not in (0.0, 1.0):
        raise DataError(f"row {row}: {column} must be 0 or 1, got {text!r}")
    return int(value)


def load_dataset(path) -> Dataset:
    """Read a trial CSV; rows are validated and kept in file order.

    Row numbers in error messages count data rows from 1 (header excluded).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file (header required)") from None
        if tuple(header[:len(BASE_COLUMNS)]) != BASE_COLUMNS:
            raise DataError(f"{path}: header must start with {', '.join(BASE_COLUMNS)}")
        cov_cols = header[len(BASE_COLUMNS):]
        for k, name in enumerate(cov_cols, start=1):
            if name != f"cov_{k}":
                raise DataError(f"{path}: covariate column {k} must be named cov_{k}, got {name!r}")

        records = []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
            row = [c.strip() for c in row]
            sid, arm_s, fu_s, ev_s, evst_s, dst_s = row[:6]
            if not sid:
                raise DataError(f"row {row_no}: empty subject_id")
            arm = _parse_flag(arm_s, row_no, "arm")
            followup = _parse_float(fu_s, row_no, "followup_time")
            ev_status = _parse_flag(evst_s, row_no, "event_status")
            death_status = _parse_flag(dst_s, row_no, "death_status")
            if ev_status == 1 and not ev_s:
                raise DataError(f"row {row_no}: event_status=1 but event_time is empty")
            if ev_status == 0 and ev_s:
                raise DataError(f"row {row_no}: event_time given but event_status=0")
            event = _parse_float(ev_s, row_no, "event_time") if ev_status else None
            covs = tuple(_parse_float(c, row_no, name) for c, name in zip(row[6:], cov_cols))
            rec = SubjectRecord(sid, arm, followup, event,
                                followup if death_status else None, covs)
            try:
                rec.validate()
            except DataError as exc:
                raise DataError(f"row {row_no}: {exc}") from None
            records.append(rec)

    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        seen = set()
        for k, i in enumerate(ids, start=1):
            if i in seen:
                raise DataError(f"row {k}: duplicate subject id {i!r}")
            seen.add(i)
    p = len(cov_cols)
    return Dataset(
        ids,
        [r.arm for r in records],
        [r.followup_time for r in records],
        [np.nan if r.event_time is None else r.event_time for r in records],
        [r.death_time is not None for r in records],
        np.array([r.covariates for r in records], dtype=float).reshape(len(records), p),
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(ds: Dataset, path) -> None:
    """Write ``ds`` in the CSV layout read by :func:`load_dataset`."""
    path = Path(path)
    header = list(BASE_COLUMNS) + [f"cov_{k}" for k in range(1, ds.covariate_dim + 1)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(len(ds)):
            ev = ds.event_time[k]
            has = not np.isnan(ev)
            w.writerow([ds.ids[k], int(ds.arm[k]), _fmt(ds.followup[k]),
                        _fmt(ev) if has else "", int(has), int(ds.died[k]),
                        *(_fmt(x) for x in ds.covariates[k])])


# risk sets -------------------------------------------------------------

def event_times(ds: Dataset) -> list[tuple[float, list[str]]]:
    """Distinct observed event times in increasing order with their subjects."""
    has = ds.has_event
    idx = np.flatnonzero(has)
    if idx.size == 0:
        return []
    order = idx[np.argsort(ds.event_time[idx], kind="stable")]
    out: list[tuple[float, list[str]]] = []
    for k in order:
        t = float(ds.event_time[k])
        if out and out[-1][0] == t:
            out[-1][1].append(ds.ids[k])
        else:
            out.append((t, [ds.ids[k]]))
    return out


def at_risk_matrix(ds: Dataset, times) -> np.ndarray:
    """Boolean (len(times), n) matrix of risk-set membership.

    Subject i is at risk at t when D_i > t and it has had no non-fatal event
    before t. A subject whose event is observed exactly at t is always
    counted, including when the event coincides with the end of follow-up.
    """
    t = np.asarray(times, dtype=float).reshape(-1, 1)
    ev = ds.event_time[None, :]
    no_event = np.isnan(ev)
    with np.errstate(invalid="ignore"):
        return ((ds.followup[None, :] > t) & (no_event | (ev >= t))) | (ev == t)


def risk_set(ds: Dataset, t: float) -> list[str]:
    if t < 0:
        raise ValueError("t must be >= 0")
    mask = at_risk_matrix(ds, [t])[0]
    return [ds.ids[k] for k in np.flatnonzero(mask)]
