"""Data model and model-free estimators.

Holds the subject/dataset containers, a right-continuous step function, the
(reverse) Kaplan-Meier product-limit estimators, the exact Poisson-binomial
distribution and the standard normal quantile.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import ndtri

#: Sentinel for a missing covariate entry. Never coerced to zero.
MISSING = float("nan")


def is_missing(value: float) -> bool:
    return value != value


@dataclass(frozen=True)
class SubjectRecord:
    """One patient: center, (entry, exit] observation window, status, case mix."""

    center_id: str
    time: float
    status: int
    covariates: tuple[float, ...] = ()
    entry_time: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.time) or self.time < 0:
            raise ValueError(f"time must be finite and >= 0, got {self.time}")
        if not self.time > self.entry_time:
            raise ValueError(
                f"time ({self.time}) must exceed entry_time ({self.entry_time})"
            )
        if self.status not in (0, 1):
            raise ValueError(f"status must be 0 or 1, got {self.status}")
        object.__setattr__(self, "covariates", tuple(float(v) for v in self.covariates))


class Dataset:
    """A cohort of subjects grouped by center.

    Internally the records are held column-wise as numpy arrays so that the
    estimators can work vectorized; ``records`` rebuilds :class:`SubjectRecord`
    objects on demand.
    """

    def __init__(
        self,
        center_ids: Sequence,
        time: Sequence[float],
        status: Sequence[int],
        covariates: np.ndarray | Sequence[Sequence[float]] | None = None,
        covariate_names: Sequence[str] = (),
        entry_time: Sequence[float] | None = None,
        require_event: bool = True,
    ):
        self.center_ids = np.asarray([str(c) for c in center_ids], dtype=object)
        self.time = np.asarray(time, dtype=float)
        self.status = np.asarray(status, dtype=int)
        n = self.time.shape[0]
        self.entry_time = (
            np.zeros(n) if entry_time is None else np.asarray(entry_time, dtype=float)
        )
        self.covariate_names = tuple(covariate_names)
        p = len(self.covariate_names)
        if covariates is None:
            covariates = np.empty((n, p))
        self.covariates = np.asarray(covariates, dtype=float).reshape(n, p)
        for arr in (self.center_ids, self.status, self.entry_time):
            if arr.shape[0] != n:
                raise ValueError("column lengths differ")
        if n == 0:
            raise ValueError("empty cohort")
        if not np.all(np.isfinite(self.time)) or np.any(self.time < 0):
            raise ValueError("times must be finite and >= 0")
        if np.any(self.time <= self.entry_time):
            bad = int(np.flatnonzero(self.time <= self.entry_time)[0])
            raise ValueError(f"record {bad}: time must exceed entry_time")
        if not np.isin(self.status, (0, 1)).all():
            raise ValueError("status must be 0 or 1")
        if require_event and not self.status.any():
            raise ValueError("dataset contains no events")
        for arr in (self.time, self.status, self.entry_time, self.covariates):
            arr.setflags(write=False)

        self.centers = tuple(sorted(set(self.center_ids.tolist())))
        codes = {c: k for k, c in enumerate(self.centers)}
        self.center_codes = np.fromiter(
            (codes[c] for c in self.center_ids), dtype=np.intp, count=n
        )
        order = np.argsort(self.center_codes, kind="stable")
        bounds = np.searchsorted(self.center_codes[order], np.arange(len(self.centers) + 1))
        self.center_index: Mapping[str, np.ndarray] = {
            c: order[bounds[k]: bounds[k + 1]] for k, c in enumerate(self.centers)
        }

    @classmethod
    def from_records(
        cls, records: Iterable[SubjectRecord], covariate_names: Sequence[str] = (), **kw
    ) -> "Dataset":
        records = list(records)
        p = len(covariate_names)
        for k, r in enumerate(records):
            if len(r.covariates) != p:
                raise ValueError(
                    f"record {k}: expected {p} covariates, got {len(r.covariates)}"
                )
        return cls(
            [r.center_id for r in records],
            [r.time for r in records],
            [r.status for r in records],
            np.array([r.covariates for r in records], dtype=float).reshape(len(records), p),
            covariate_names,
            [r.entry_time for r in records],
            **kw,
        )

    def __len__(self) -> int:
        return self.time.shape[0]

    @property
    def records(self) -> list[SubjectRecord]:
        return [
            SubjectRecord(
                str(self.center_ids[k]),
                float(self.time[k]),
                int(self.status[k]),
                tuple(self.covariates[k]),
                float(self.entry_time[k]),
            )
            for k in range(len(self))
        ]

    def subset(self, index: np.ndarray, require_event: bool = False) -> "Dataset":
        return Dataset(
            self.center_ids[index],
            self.time[index],
            self.status[index],
            self.covariates[index],
            self.covariate_names,
            self.entry_time[index],
            require_event=require_event,
        )

    def with_covariates(self, covariates: np.ndarray) -> "Dataset":
        return Dataset(
            self.center_ids,
            self.time,
            self.status,
            covariates,
            self.covariate_names,
            self.entry_time,
            require_event=False,
        )

    def center(self, center_id) -> "Dataset":
        return self.subset(self.center_index[str(center_id)])

    def has_missing(self) -> bool:
        return bool(np.isnan(self.covariates).any())


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous piecewise-constant function on [0, inf).

    ``values[k]`` holds on ``[knots[k], knots[k+1])`` and ``initial_value`` on
    ``[0, knots[0])``.
    """

    knots: np.ndarray
    values: np.ndarray
    initial_value: float = 1.0
    _all: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if knots.shape != values.shape or knots.ndim != 1:
            raise ValueError("knots and values must be 1-d arrays of equal length")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        knots.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_all", np.concatenate([[self.initial_value], values]))

    def __call__(self, t):
        idx = np.searchsorted(self.knots, t, side="right")
        out = self._all[idx]
        return float(out) if np.ndim(out) == 0 else out

    def eval_left(self, t):
        """Left limit f(t-)."""
        idx = np.searchsorted(self.knots, t, side="left")
        out = self._all[idx]
        return float(out) if np.ndim(out) == 0 else out

    @property
    def jumps(self) -> np.ndarray:
        return np.diff(self._all)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "value"])
            w.writerow([repr(0.0), repr(float(self.initial_value))])
            for t, v in zip(self.knots, self.values):
                w.writerow([repr(float(t)), repr(float(v))])

    @classmethod
    def from_csv(cls, path) -> "StepFunction":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        initial = float(rows[0]["value"])
        return cls(
            np.array([float(r["time"]) for r in rows[1:]]),
            np.array([float(r["value"]) for r in rows[1:]]),
            initial,
        )


def _as_arrays(records):
    if isinstance(records, Dataset):
        return records.time, records.status, records.entry_time
    records = list(records)
    if not records:
        raise ValueError("empty cohort")
    return (
        np.array([r.time for r in records], dtype=float),
        np.array([r.status for r in records], dtype=int),
        np.array([r.entry_time for r in records], dtype=float),
    )


def risk_set_counts(time, entry, at) -> np.ndarray:
    """Number of subjects with entry < s <= time, for each s in ``at``."""
    t_sorted = np.sort(time)
    e_sorted = np.sort(entry)
    n_exit_before = np.searchsorted(t_sorted, at, side="left")
    n_entered = np.searchsorted(e_sorted, at, side="left")
    return n_entered - n_exit_before


def product_limit(time, status, entry=None, events_first: bool = True) -> StepFunction:
    """Product-limit estimator on arrays.

    Args:
        time: exit times.
        status: 1 where the counted transition happened at ``time``.
        entry: delayed-entry times (default all zero).
        events_first: if False, subjects with the *other* outcome at a tied
            time are taken to leave the risk set first (used by reverse KM).
    """
    time = np.asarray(time, dtype=float)
    status = np.asarray(status, dtype=int)
    if time.size == 0:
        raise ValueError("empty cohort")
    entry = np.zeros_like(time) if entry is None else np.asarray(entry, dtype=float)
    ev_times, d = np.unique(time[status == 1], return_counts=True)
    if ev_times.size == 0:
        return StepFunction(np.empty(0), np.empty(0), 1.0)
    n = risk_set_counts(time, entry, ev_times)
    if not events_first:
        other = time[status == 0]
        if other.size:
            o_times, o_counts = np.unique(other, return_counts=True)
            pos = np.searchsorted(o_times, ev_times)
            pos_c = np.minimum(pos, o_times.size - 1)
            tied = o_times[pos_c] == ev_times
            n = n - np.where(tied, o_counts[pos_c], 0)
    if np.any(n <= 0):
        raise ValueError("empty risk set")
    values = np.cumprod(1.0 - d / n)
    return StepFunction(ev_times, values, 1.0)


def kaplan_meier(records) -> StepFunction:
    """Kaplan-Meier survival curve with knots at event times.

    Subjects are at risk on (entry_time, time]; at tied times events precede
    censorings.
    """
    t, s, e = _as_arrays(records)
    return product_limit(t, s, e, events_first=True)


def reverse_kaplan_meier(records) -> StepFunction:
    """Follow-up (censoring) distribution estimate G(t) = P(C > t).

    Kaplan-Meier with status flipped; a death at a tied time leaves before the
    censorings at that time, so it is not in the censoring risk set.
    """
    t, s, e = _as_arrays(records)
    return product_limit(t, 1 - s, e, events_first=False)


def poisson_binomial_pmf(probs: Sequence[float]) -> np.ndarray:
    """Exact PMF over {0..n} of a sum of independent Bernoulli(p_j)."""
    probs = np.asarray(probs, dtype=float).ravel()
    if np.any(~np.isfinite(probs)) or np.any(probs < 0) or np.any(probs > 1):
        raise ValueError("invalid probability")
    pmf = np.zeros(probs.size + 1)
    pmf[0] = 1.0
    for k, p in enumerate(probs, start=1):
        # in-place convolution with (1-p, p); right-to-left keeps old values
        pmf[1: k + 1] = pmf[1: k + 1] * (1 - p) + pmf[:k] * p
        pmf[0] *= 1 - p
    return pmf


def poisson_binomial_pvalue(observed: int, probs: Sequence[float]) -> float:
    """Two-sided exact p-value 2*min(P(O <= k), P(O >= k)), capped at 1."""
    pmf = poisson_binomial_pmf(probs)
    k = int(observed)
    if k < 0 or k > pmf.size - 1:
        return 0.0
    lower = pmf[: k + 1].sum()
    upper = pmf[k:].sum()
    return float(min(1.0, 2 * min(lower, upper)))


def normal_quantile(p: float) -> float:
    """Standard normal quantile z_p."""
    if not 0 < p < 1:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    return float(ndtri(p))
