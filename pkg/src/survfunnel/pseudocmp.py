"""Pseudo-observation comparator.

Jackknife Kaplan-Meier pseudo-values of the death probability at tau, an
logit-link independence GEE fit on case mix, and a
Pearson-residual bootstrap giving per-center prediction intervals for the
center's death probability under no center effects.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .funnelbench import Classification
from .survdata import Dataset, kaplan_meier, normal_quantile, product_limit

logger = logging.getLogger(__name__)

FITTED_BAND = (-0.2, 1.2)
SCALE_BAND = (0.001, 0.999)


def _as_arrays(records):
    if isinstance(records, Dataset):
        return records.time, records.status, records.entry_time
    records = list(records)
    return (
        np.array([r.time for r in records], dtype=float),
        np.array([r.status for r in records], dtype=int),
        np.array([r.entry_time for r in records], dtype=float),
    )


def km_identified(time, status, tau: float) -> bool:
    """Whether the KM curve is determined at tau (someone at risk, or curve hit 0)."""
    time = np.asarray(time)
    if np.any(time >= tau):
        return True
    return product_limit(time, status)(tau) == 0.0


def _log_factor(num, den):
    """log(1 - num/den) split into (log of nonzero part, zero flag); 0/0 -> factor 1."""
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(den > 0, 1.0 - num / np.where(den > 0, den, 1), 1.0)
    zero = f <= 0
    return np.where(zero, 0.0, np.log(np.where(zero, 1.0, f))), zero.astype(np.int64)


def pseudo_observations(records, tau: float) -> np.ndarray:
    """Jackknife pseudo-values of F(tau) = 1 - S_KM(tau).

    theta_i = n F(tau) - (n-1) F_{-i}(tau). The leave-one-out curves are
    obtained in O(n log n) by adjusting the risk-set counts of the event
    times each subject is at risk at.
    """
    time, status, entry = _as_arrays(records)
    n = time.size
    if n < 2:
        raise ValueError("need at least two subjects")
    if not km_identified(time, status, tau):
        raise ValueError("Kaplan-Meier undefined at tau: empty risk set")

    ev = np.unique(time[(status == 1) & (time <= tau)])
    if ev.size == 0:
        return np.zeros(n)
    d = np.searchsorted(np.sort(time[status == 1]), ev, side="right") - np.searchsorted(
        np.sort(time[status == 1]), ev, side="left"
    )
    at_risk = (
        np.searchsorted(np.sort(entry), ev, side="left")
        - np.searchsorted(np.sort(time), ev, side="left")
    )

    la, za = _log_factor(d, at_risk)  # full sample
    lb, zb = _log_factor(d, at_risk - 1)  # subject at risk, not its event
    lc, zc = _log_factor(d - 1, at_risk - 1)  # subject's own event time

    full_log, full_zero = la.sum(), za.sum()
    F = 1.0 - (0.0 if full_zero else math.exp(full_log))

    cum_dl = np.concatenate([[0.0], np.cumsum(lb - la)])
    cum_dz = np.concatenate([[0], np.cumsum(zb - za)])
    lo = np.searchsorted(ev, entry, side="right")  # first event time > entry
    hi = np.searchsorted(ev, np.minimum(time, tau), side="right")  # past last <= exit
    hi = np.maximum(hi, lo)
    dlog = cum_dl[hi] - cum_dl[lo]
    dz = cum_dz[hi] - cum_dz[lo]

    own = (status == 1) & (time <= tau)
    k = np.searchsorted(ev, time[own])
    dlog[own] += lc[k] - lb[k]
    dz[own] += zc[k] - zb[k]

    s_loo = np.where(full_zero + dz > 0, 0.0, np.exp(full_log + dlog))
    return n * F - (n - 1) * (1.0 - s_loo)


@dataclass(frozen=True)
class PseudoFit:
    coefficients: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    scale_mean: np.ndarray

    def __post_init__(self):
        if self.residuals.shape != self.fitted.shape:
            raise ValueError("one residual per subject required")


def _expit(eta):
    return 0.5 * (1.0 + np.tanh(0.5 * eta))


def _fit_logit(X, y, max_iter=50, tol=1e-10):
    """Quasi-binomial estimating equations sum x_i (y_i - expit(x_i'b)) = 0."""
    ybar = float(np.clip(y.mean(), 0.01, 0.99))
    beta = np.zeros(X.shape[1])
    beta[0] = math.log(ybar / (1 - ybar))
    for _ in range(max_iter):
        mu = _expit(X @ beta)
        score = X.T @ (y - mu)
        info = (X * (mu * (1 - mu))[:, None]).T @ X
        step = np.linalg.solve(info, score)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            return beta
    raise ValueError("pseudo-value GEE did not converge")


def fit_pseudo_model(
    pseudo, covariates=None, add_intercept: bool = True, link: str = "logit"
) -> PseudoFit:
    """Independence-working-correlation fit of pseudo-values on case mix.

    ``link="logit"`` solves the quasi-binomial estimating equations;
    ``link="identity"`` is plain least squares. Pearson residuals use the fitted
    value clamped to [0.001, 0.999] as the Bernoulli mean in the variance.
    """
    y = np.asarray(pseudo, dtype=float)
    n = y.size
    if covariates is None:
        X = np.empty((n, 0))
    else:
        X = np.asarray(covariates, dtype=float).reshape(n, -1)
    if add_intercept:
        X = np.column_stack([np.ones(n), X])
    if np.isnan(X).any():
        raise ValueError("covariates incomplete")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValueError("singular design matrix")
    if link == "identity":
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        fitted = X @ coef
    elif link == "logit":
        coef = _fit_logit(X, y)
        fitted = _expit(X @ coef)
    else:
        raise ValueError(f"unknown link {link!r}")
    if fitted.min() < FITTED_BAND[0] or fitted.max() > FITTED_BAND[1]:
        logger.warning("pseudo-value fitted values outside %s; clamped", FITTED_BAND)
        fitted = np.clip(fitted, *FITTED_BAND)
    mu = np.clip(fitted, *SCALE_BAND)
    resid = (y - fitted) / np.sqrt(mu * (1 - mu))
    return PseudoFit(coef, fitted, resid, mu)


@dataclass(frozen=True)
class PredictionInterval:
    center_id: str
    lower: float
    upper: float
    observed: float
    z_pseudo: float
    classification: Classification

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError("lower bound above upper bound")

    CSV_FIELDS = ("center_id", "observed", "lower", "upper", "z_pseudo", "classification")

    def csv_row(self) -> list[str]:
        z = "NA" if not math.isfinite(self.z_pseudo) else repr(float(self.z_pseudo))
        return [self.center_id, repr(float(self.observed)), repr(float(self.lower)),
                repr(float(self.upper)), z, self.classification.value]


def order_statistic_indices(B: int, alpha: float) -> tuple[int, int]:
    """0-based positions of the interval endpoints among B sorted replicates.

    Lower endpoint is the floor(B*alpha/2)-th order statistic (1-based, at
    least the first) and the upper one mirrors it: for B=1000, alpha=0.05
    these are the 25th and 976th.
    """
    k = max(int(math.floor(B * alpha / 2 + 1e-9)), 1)
    return k - 1, B - k


def interval_z(lower: float, upper: float, observed: float) -> float:
    """Z-score reading [lower, upper] as the central 95% of a normal."""
    if not upper > lower:
        raise ValueError("zero-width prediction interval")
    mid = (lower + upper) / 2
    scale = (upper - lower) / (2 * normal_quantile(0.975))
    return (observed - mid) / scale


def pseudo_z(interval: "PredictionInterval") -> float:
    return interval_z(interval.lower, interval.upper, interval.observed)


def _classify(observed, lower, upper) -> Classification:
    if observed < lower:
        return Classification.OVER
    if observed > upper:
        return Classification.UNDER
    return Classification.TARGET


def bootstrap_prediction_intervals(
    fit: PseudoFit,
    data: Dataset,
    tau: float,
    B: int = 1000,
    alpha: float = 0.05,
    seed: int | np.random.SeedSequence = 0,
    center_residuals: bool = False,
) -> list[PredictionInterval]:
    """Per-center bootstrap prediction intervals of the death probability at tau.

    Each replicate draws one stream from ``SeedSequence(seed).spawn(B)``, so
    results do not depend on how replicates are scheduled.
    """
    if B < 100:
        raise ValueError("B must be at least 100")
    n = len(data)
    if fit.fitted.size != n:
        raise ValueError("fit does not match data")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    codes = data.center_codes
    sizes = np.bincount(codes, minlength=len(data.centers))
    mu, sd = fit.fitted, np.sqrt(fit.scale_mean * (1 - fit.scale_mean))
    resid = fit.residuals - fit.residuals.mean() if center_residuals else fit.residuals

    reps = np.empty((B, len(data.centers)))
    for b, child in enumerate(ss.spawn(B)):
        rng = np.random.default_rng(child)
        r = resid[rng.integers(0, n, size=n)]
        reps[b] = np.bincount(codes, weights=mu + r * sd, minlength=sizes.size) / sizes
    reps.sort(axis=0)
    i_lo, i_hi = order_statistic_indices(B, alpha)

    out = []
    for k, c in enumerate(data.centers):
        idx = data.center_index[c]
        if not km_identified(data.time[idx], data.status[idx], tau):
            logger.warning("center %s: no subject at risk at tau; excluded", c)
            continue
        observed = 1.0 - kaplan_meier(data.subset(idx))(tau)
        lo, hi = float(reps[i_lo, k]), float(reps[i_hi, k])
        z = interval_z(lo, hi, observed) if hi > lo else float("nan")
        out.append(PredictionInterval(c, lo, hi, observed, z, _classify(observed, lo, hi)))
    return out


def pseudo_compare(
    data: Dataset,
    tau: float,
    covariate_names: Sequence[str] | None = None,
    B: int = 1000,
    alpha: float = 0.05,
    seed=0,
    link: str = "logit",
    center_residuals: bool = False,
) -> list[PredictionInterval]:
    """Whole comparator pipeline on a (complete-case-mix) dataset."""
    names = tuple(covariate_names) if covariate_names is not None else data.covariate_names
    cols = [data.covariate_names.index(n) for n in names]
    pseudo = pseudo_observations(data, tau)
    fit = fit_pseudo_model(pseudo, data.covariates[:, cols], link=link)
    return bootstrap_prediction_intervals(fit, data, tau, B, alpha, seed, center_residuals)


def write_intervals_csv(intervals: Sequence[PredictionInterval], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PredictionInterval.CSV_FIELDS)
        for iv in sorted(intervals, key=lambda iv: iv.center_id):
            w.writerow(iv.csv_row())
