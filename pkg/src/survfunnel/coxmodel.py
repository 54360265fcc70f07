"""Proportional hazards benchmark model.

Newton-Raphson on the Breslow log partial likelihood with optional
stratification by center and support for delayed entry. The fitted baseline
is kept as per-stratum cumulative hazard step functions (Breslow jumps).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .survdata import Dataset, StepFunction

logger = logging.getLogger(__name__)

POOLED = "__pooled__"


class CollinearityError(ValueError):
    pass


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ModelSpec:
    covariate_names: tuple[str, ...] = ()
    stratify_by_center: bool = False
    tie_method: str = "breslow"
    max_iter: int = 50
    tolerance: float = 1e-9
    allow_eventless_strata: bool = False

    def __post_init__(self):
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if self.tie_method != "breslow":
            raise ValueError("only Breslow ties are supported")
        if self.tolerance <= 0 or self.max_iter < 1:
            raise ValueError("tolerance must be > 0 and max_iter >= 1")


@dataclass(frozen=True)
class CoxFit:
    """Fitted benchmark model. ``baseline`` maps stratum -> cumulative hazard."""

    beta: np.ndarray
    baseline: Mapping[str, StepFunction]
    covariate_names: tuple[str, ...] = ()
    stratified: bool = False
    log_likelihood: float = float("nan")
    iterations: int = 0
    converged: bool = True
    score_norm: float = 0.0
    eventless_strata: tuple[str, ...] = field(default=())

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    def baseline_for(self, stratum=None) -> StepFunction:
        if not self.stratified:
            return self.baseline[POOLED]
        if stratum is None:
            raise ValueError("stratum required for a stratified fit")
        try:
            return self.baseline[str(stratum)]
        except KeyError:
            raise KeyError(f"unknown stratum {stratum!r}") from None

    def report(self) -> str:
        lines = [
            "Cox proportional hazards fit (Breslow ties)",
            f"stratified: {self.stratified}",
            f"log partial likelihood: {self.log_likelihood:.6f}",
            f"iterations: {self.iterations}  converged: {self.converged}",
            "",
            f"{'covariate':<24}{'coef':>14}{'exp(coef)':>14}",
        ]
        for name, b in zip(self.covariate_names, self.beta):
            lines.append(f"{name:<24}{b:>14.6f}{np.exp(b):>14.6f}")
        return "\n".join(lines) + "\n"

    def baseline_rows(self):
        """(stratum, time, jump) rows of the Breslow baseline hazard."""
        for stratum in sorted(self.baseline):
            h = self.baseline[stratum]
            for t, j in zip(h.knots, h.jumps):
                yield stratum, float(t), float(j)


def linear_predictor(fit: CoxFit, x) -> float | np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != fit.beta.shape[0]:
        raise ValueError(
            f"covariate arity {x.shape[-1]} does not match model ({fit.beta.shape[0]})"
        )
    out = x @ fit.beta
    return float(out) if np.ndim(out) == 0 else out


def cumulative_hazard(fit: CoxFit, x, t, stratum=None):
    """H(t | x) = H0(t) exp(beta'x)."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be >= 0")
    return fit.baseline_for(stratum)(t) * np.exp(linear_predictor(fit, x))


def survival(fit: CoxFit, x, t, stratum=None):
    return np.exp(-cumulative_hazard(fit, x, t, stratum))


def survival_left(fit: CoxFit, x, t, stratum=None):
    """S(t-), the survival just before t."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be >= 0")
    h = fit.baseline_for(stratum).eval_left(t)
    return np.exp(-h * np.exp(linear_predictor(fit, x)))


class _Stratum:
    """Precomputed sort orders for risk-set sums in one stratum."""

    def __init__(self, time, status, entry, X):
        self.X = X
        self.ev_times, self.d = np.unique(time[status == 1], return_counts=True)
        self.t_order = np.argsort(time, kind="stable")
        self.t_sorted = time[self.t_order]
        self.e_order = np.argsort(entry, kind="stable")
        self.e_sorted = entry[self.e_order]
        # first index with time >= s, and with entry >= s
        self.t_pos = np.searchsorted(self.t_sorted, self.ev_times, side="left")
        self.e_pos = np.searchsorted(self.e_sorted, self.ev_times, side="left")
        self.x_event_sum = X[status == 1].sum(axis=0)
        self.n_events = int(status.sum())

    def _suffix(self, arr, order, pos):
        # sum over sorted positions >= pos
        c = np.concatenate([np.zeros((1,) + arr.shape[1:]), np.cumsum(arr[order][::-1], axis=0)])
        n = arr.shape[0]
        return c[n - pos]

    def risk_sums(self, w, need_second=True):
        X = self.X
        wX = w[:, None] * X
        s0 = self._suffix(w, self.t_order, self.t_pos) - self._suffix(w, self.e_order, self.e_pos)
        s1 = self._suffix(wX, self.t_order, self.t_pos) - self._suffix(wX, self.e_order, self.e_pos)
        s2 = None
        if need_second:
            wXX = wX[:, :, None] * X[:, None, :]
            s2 = self._suffix(wXX, self.t_order, self.t_pos) - self._suffix(
                wXX, self.e_order, self.e_pos
            )
        return s0, s1, s2


def _loglik_parts(strata, beta, need_info=True):
    p = beta.shape[0]
    ll = 0.0
    score = np.zeros(p)
    info = np.zeros((p, p))
    for st in strata:
        if st.n_events == 0:
            continue
        lp = st.X @ beta
        w = np.exp(lp)
        s0, s1, s2 = st.risk_sums(w, need_info)
        ll += float(st.x_event_sum @ beta) - float(st.d @ np.log(s0))
        mean = s1 / s0[:, None]
        score += st.x_event_sum - st.d @ mean
        if need_info:
            cov = s2 / s0[:, None, None] - mean[:, :, None] * mean[:, None, :]
            info += np.tensordot(st.d, cov, axes=1)
    return ll, score, info


def partial_log_likelihood(data: Dataset, beta, stratify_by_center: bool = False):
    """Breslow log partial likelihood, score and observed information at beta."""
    strata = _build_strata(data, np.asarray(data.covariates, float), stratify_by_center)
    return _loglik_parts(list(strata.values()), np.asarray(beta, dtype=float))


def _build_strata(data: Dataset, X, stratify):
    if not stratify:
        return {POOLED: _Stratum(data.time, data.status, data.entry_time, X)}
    out = {}
    for c in data.centers:
        idx = data.center_index[c]
        out[c] = _Stratum(data.time[idx], data.status[idx], data.entry_time[idx], X[idx])
    return out


def fit_cox(data: Dataset, spec: ModelSpec | None = None) -> CoxFit:
    """Maximum partial likelihood fit of the proportional hazards model."""
    spec = spec or ModelSpec(covariate_names=data.covariate_names)
    names = spec.covariate_names
    try:
        cols = [data.covariate_names.index(n) for n in names]
    except ValueError as exc:
        raise ValueError(f"unknown covariate: {exc}") from None
    X = np.asarray(data.covariates[:, cols], dtype=float)
    if np.isnan(X).any():
        raise ValueError("covariates incomplete; impute before fitting")
    p = X.shape[1]

    # center at event-weighted means; the baseline is shifted back afterwards
    events = data.status == 1
    shift = X[events].mean(axis=0) if events.any() else np.zeros(p)
    Xc = X - shift

    strata = _build_strata(data, Xc, spec.stratify_by_center)
    eventless = tuple(k for k, st in strata.items() if st.n_events == 0)
    if eventless and not spec.allow_eventless_strata:
        raise ValueError(f"stratum without events: {eventless[0]}")
    if len(eventless) == len(strata):
        raise ValueError("no events in any stratum")
    active = [st for st in strata.values() if st.n_events]

    if p and np.any(np.ptp(X, axis=0) == 0):
        raise CollinearityError("collinear case mix")

    beta = np.zeros(p)
    ll, score, info = _loglik_parts(active, beta)
    converged = p == 0
    it = 0
    while not converged and it < spec.max_iter:
        it += 1
        try:
            chol = np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            raise CollinearityError("collinear case mix") from None
        if np.linalg.cond(info) > 1e12:
            raise CollinearityError("collinear case mix")
        step = np.linalg.solve(chol.T, np.linalg.solve(chol, score))
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            ll_new, score_new, info_new = _loglik_parts(active, cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            t /= 2
        else:
            break
        rel = abs(ll_new - ll) / max(abs(ll), 1e-300)
        beta, ll, score, info = cand, ll_new, score_new, info_new
        snorm = float(np.linalg.norm(score))
        if snorm < 1e-8 or (rel < spec.tolerance and snorm <= 1e-6):
            converged = True
    snorm = float(np.linalg.norm(score))
    if not converged:
        warnings.warn(
            f"Cox fit did not converge after {it} iterations (score norm {snorm:.3g})",
            ConvergenceWarning,
            stacklevel=2,
        )

    # Breslow jumps on the original covariate scale
    baseline = {}
    offset = float(np.exp(-shift @ beta)) if p else 1.0
    for key, st in strata.items():
        if st.n_events == 0:
            baseline[key] = StepFunction(np.empty(0), np.empty(0), 0.0)
            continue
        s0, _, _ = st.risk_sums(np.exp(st.X @ beta), need_second=False)
        jumps = st.d / s0 * offset
        baseline[key] = StepFunction(st.ev_times, np.cumsum(jumps), 0.0)

    return CoxFit(
        beta=beta,
        baseline=baseline,
        covariate_names=names,
        stratified=spec.stratify_by_center,
        log_likelihood=ll,
        iterations=it,
        converged=converged,
        score_norm=snorm,
        eventless_strata=eventless,
    )
