"""Observed/expected benchmarking of centers and funnel plot geometry.

Mortality: each patient's probability of an *observed* death within the
horizon combines the pooled Cox benchmark with the center's own follow-up
distribution. Follow-up: each patient's probability of an observed loss to
follow-up combines the pooled follow-up distribution with a center-stratified
survival model. Both feed the same O/E/V summaries and funnel limits.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .coxmodel import CoxFit, ModelSpec, fit_cox
from .survdata import (
    Dataset,
    StepFunction,
    normal_quantile,
    poisson_binomial_pvalue,
    reverse_kaplan_meier,
)

logger = logging.getLogger(__name__)

CLAMP_TOL = 1e-6


class Classification(str, enum.Enum):
    OVER = "Over"
    TARGET = "Target"
    UNDER = "Under"


@dataclass(frozen=True)
class BenchmarkConfig:
    tau: float = 12.0
    alpha: float = 0.05
    multiplicity: str = "bonferroni"
    min_center_size: int = 1
    imputation_enabled: bool = True
    min_censoring_center_size: int = 10

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.multiplicity not in ("none", "bonferroni"):
            raise ValueError(f"unknown multiplicity method {self.multiplicity!r}")


@dataclass(frozen=True)
class CenterSummary:
    center_id: str
    n: int
    O: int
    E: float
    V: float
    Z: float
    oe_ratio: float
    eff_n: float
    p_exact: float
    classification: Classification | None
    degenerate: bool = False

    CSV_FIELDS = (
        "center_id", "n", "O", "E", "V", "Z", "oe_ratio", "eff_n", "p_exact", "classification",
    )

    def csv_row(self) -> list[str]:
        def num(v):
            return "NA" if not math.isfinite(v) else repr(float(v))

        return [
            self.center_id,
            str(self.n),
            str(self.O),
            num(self.E),
            num(self.V),
            num(self.Z),
            num(self.oe_ratio),
            num(self.eff_n),
            num(self.p_exact),
            self.classification.value if self.classification else "NA",
        ]


@dataclass(frozen=True)
class FunnelGeometry:
    p0: float
    alpha: float
    alpha_prime: float

    def __post_init__(self):
        if not 0 < self.p0 < 1:
            raise ValueError(f"pooled proportion must lie in (0, 1), got {self.p0}")
        if not 0 < self.alpha_prime <= self.alpha < 1:
            raise ValueError("need 0 < alpha_prime <= alpha < 1")

    @classmethod
    def from_config(cls, p0: float, config: BenchmarkConfig, n_centers: int) -> "FunnelGeometry":
        if config.multiplicity == "bonferroni":
            alpha_prime = config.alpha / max(n_centers, 1)
        else:
            alpha_prime = config.alpha
        return cls(p0, config.alpha, alpha_prime)

    @property
    def z_inner(self) -> float:
        return normal_quantile(1 - self.alpha / 2)

    @property
    def z_outer(self) -> float:
        return normal_quantile(1 - self.alpha_prime / 2)

    @property
    def scale(self) -> float:
        """sqrt((1-p0)/p0): converts precision E^2/V to effective sample size."""
        return math.sqrt((1 - self.p0) / self.p0)


def _clamp(p: np.ndarray, what: str) -> np.ndarray:
    if p.size and (p.max() > 1 + CLAMP_TOL or p.min() < -CLAMP_TOL):
        logger.warning("%s probability outside [0,1] by more than %g; clamped", what, CLAMP_TOL)
    return np.clip(p, 0.0, 1.0)


def _window(h: StepFunction, tau: float):
    """Knots <= tau with their jumps and the cumulative value just before each."""
    k = np.searchsorted(h.knots, tau, side="right")
    knots = h.knots[:k]
    jumps = h.jumps[:k]
    before = np.concatenate([[h.initial_value], h.values[: max(k - 1, 0)]])[:k]
    return knots, jumps, before


def event_probabilities(fit: CoxFit, X, G: StepFunction, tau: float) -> np.ndarray:
    """Probability of an observed event within tau for each row of X.

    Sum over baseline jump times s <= tau of h0(s) e^{b'x} S(s-) G(s-).
    """
    if fit.stratified:
        raise ValueError("pooled (unstratified) model required")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    risk = np.exp(X @ fit.beta)
    knots, jumps, h_before = _window(fit.baseline_for(), tau)
    if knots.size == 0:
        return np.zeros(X.shape[0])
    g_left = G.eval_left(knots)
    weights = jumps * g_left
    # (n, K) work matrix; chunked to bound memory on large centers
    out = np.empty(X.shape[0])
    step = max(1, 2_000_000 // knots.size)
    for a in range(0, X.shape[0], step):
        r = risk[a: a + step, None]
        out[a: a + step] = (r * np.exp(-r * h_before[None, :])) @ weights
    return _clamp(out, "event")


def event_probability(fit: CoxFit, x, G_i: StepFunction, tau: float) -> float:
    if tau <= 0:
        return 0.0
    return float(event_probabilities(fit, np.asarray(x, dtype=float)[None, :], G_i, tau)[0])


def followup_probabilities(
    stratified_fit: CoxFit,
    G_pooled: StepFunction,
    X,
    center,
    tau: float,
    censoring_hazard: StepFunction | None = None,
) -> np.ndarray:
    """Probability of an observed loss to follow-up before tau for each row of X.

    Sum over pooled censoring times s < tau of h_C(s) G(s-) S_ij(s-), with
    S_ij from the center's stratum of ``stratified_fit``. Without an explicit
    censoring cumulative hazard, h_C(s) G(s-) is the product-limit mass
    G(s-) - G(s).
    """
    if not stratified_fit.stratified:
        raise ValueError("center-stratified model required for follow-up probabilities")
    base = stratified_fit.baseline_for(center)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    k = np.searchsorted(G_pooled.knots, tau, side="left")
    s = G_pooled.knots[:k]
    if s.size == 0:
        return np.zeros(X.shape[0])
    g_left = G_pooled.eval_left(s)
    if censoring_hazard is None:
        mass = g_left - G_pooled(s)
    else:
        mass = (censoring_hazard(s) - censoring_hazard.eval_left(s)) * g_left
    risk = np.exp(X @ stratified_fit.beta)
    h_left = base.eval_left(s)
    out = np.exp(-risk[:, None] * h_left[None, :]) @ mass
    return _clamp(out, "follow-up")


def followup_probability(
    stratified_fit: CoxFit,
    G_pooled: StepFunction,
    h_C_jumps: StepFunction | None,
    x,
    center,
    tau: float,
) -> float:
    x = np.asarray(x, dtype=float)[None, :]
    return float(followup_probabilities(stratified_fit, G_pooled, x, center, tau, h_C_jumps)[0])


def observed_events(time, status, entry, tau: float) -> np.ndarray:
    """Indicator of an event observed in (entry, tau]."""
    time = np.asarray(time)
    return (np.asarray(status) == 1) & (time <= tau) & (time > np.asarray(entry))


def observed_losses(time, status, tau: float) -> np.ndarray:
    """Indicator of a censoring strictly before tau."""
    return (np.asarray(status) == 0) & (np.asarray(time) < tau)


def effective_sample_size(E: float, V: float, p0: float) -> float:
    if not V > 0:
        raise ValueError("V must be > 0")
    if not 0 < p0 < 1:
        raise ValueError("p0 must lie in (0, 1)")
    return E * E / V * (1 - p0) / p0


def classify(z: float, alpha: float) -> Classification:
    crit = normal_quantile(1 - alpha / 2)
    if z < -crit:
        return Classification.OVER
    if z > crit:
        return Classification.UNDER
    return Classification.TARGET


def summarize_counts(center_id, observed: int, probs, config: BenchmarkConfig, p0: float) -> CenterSummary:
    probs = np.asarray(probs, dtype=float)
    n = probs.size
    E = float(probs.sum())
    V = float((probs * (1 - probs)).sum())
    O = int(observed)
    oe = O / E if E > 0 else float("nan")
    if V <= 0:
        logger.warning("center %s: zero variance under the null; excluded from funnel", center_id)
        return CenterSummary(str(center_id), n, O, E, V, float("nan"), oe, float("nan"),
                             poisson_binomial_pvalue(O, probs), None, degenerate=True)
    Z = (O - E) / math.sqrt(V)
    return CenterSummary(
        center_id=str(center_id),
        n=n,
        O=O,
        E=E,
        V=V,
        Z=Z,
        oe_ratio=oe,
        eff_n=effective_sample_size(E, V, p0) if 0 < p0 < 1 else float("nan"),
        p_exact=poisson_binomial_pvalue(O, probs),
        classification=classify(Z, config.alpha),
    )


def summarize_center(
    records_i,
    probs,
    config: BenchmarkConfig,
    p0: float,
    outcome: str = "death",
    center_id=None,
) -> CenterSummary:
    """Per-center O/E summary; ``outcome`` is "death" or "loss"."""
    if isinstance(records_i, Dataset):
        t, s, e = records_i.time, records_i.status, records_i.entry_time
        ids = records_i.center_ids
    else:
        records_i = list(records_i)
        t = np.array([r.time for r in records_i])
        s = np.array([r.status for r in records_i])
        e = np.array([r.entry_time for r in records_i])
        ids = [r.center_id for r in records_i]
    if len(t) != len(probs):
        raise ValueError("probabilities not aligned with records")
    if outcome == "death":
        O = int(observed_events(t, s, e, config.tau).sum())
    elif outcome == "loss":
        O = int(observed_losses(t, s, config.tau).sum())
    else:
        raise ValueError(f"unknown outcome {outcome!r}")
    if center_id is None:
        center_id = ids[0] if len(ids) else ""
    return summarize_counts(center_id, O, probs, config, p0)


def funnel_limits(x, geometry: FunnelGeometry, level: str = "inner", variant: str = "eff_n"):
    """(lower, upper) control limits for O/E at x.

    ``variant="eff_n"``: x is the effective sample size, limits
    1 +/- z sqrt((1-p0)/p0)/sqrt(x). ``variant="raw"``: x is E^2/V, limits
    1 +/- z/sqrt(x).
    """
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("x must be > 0")
    if level == "inner":
        z = geometry.z_inner
    elif level == "outer":
        z = geometry.z_outer
    else:
        raise ValueError(f"unknown level {level!r}")
    if variant == "eff_n":
        half = z * geometry.scale / np.sqrt(x)
    elif variant == "raw":
        half = z / np.sqrt(x)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    lo, hi = 1 - half, 1 + half
    if lo.ndim == 0:
        return float(lo), float(hi)
    return lo, hi


@dataclass
class ImputationReport:
    counts: dict[str, int] = field(default_factory=dict)
    fill_values: dict[str, float] = field(default_factory=dict)


def favorable_outcome(time, status, tau: float) -> np.ndarray:
    """Known to be alive at tau."""
    time = np.asarray(time)
    status = np.asarray(status)
    return ((status == 0) & (time >= tau)) | ((status == 1) & (time > tau))


def impute_case_mix(data: Dataset, tau: float) -> tuple[Dataset, ImputationReport]:
    """Fill missing covariates with their median among favorable-outcome patients.

    This makes an incompletely registered patient look relatively healthy,
    lowering the center's expected count.
    """
    report = ImputationReport()
    if not data.has_missing():
        return data, report
    fav = favorable_outcome(data.time, data.status, tau)
    X = np.array(data.covariates, dtype=float)
    for j, name in enumerate(data.covariate_names):
        miss = np.isnan(X[:, j])
        if not miss.any():
            continue
        pool = X[fav & ~miss, j]
        if pool.size == 0:
            raise ValueError(f"covariate {name!r} missing for all favorable-outcome patients")
        value = float(np.median(pool))
        X[miss, j] = value
        report.counts[name] = int(miss.sum())
        report.fill_values[name] = value
    return data.with_covariates(X), report


@dataclass
class FunnelChart:
    """Plain descriptor of a funnel plot, independent of any renderer."""

    title: str
    points: list[dict]
    curves: dict[str, dict[str, list[float]]]
    target: float
    counts: dict[str, int]
    p0: float
    alpha: float
    alpha_prime: float
    xlabel: str = "Effective sample size"
    ylabel: str = "Observed / Expected"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FunnelChart":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "FunnelChart":
        return cls.from_dict(json.loads(text))


def build_funnel_chart(
    summaries: Sequence[CenterSummary],
    geometry: FunnelGeometry,
    title: str = "",
    n_grid: int = 200,
) -> FunnelChart:
    plotted = [s for s in summaries if not s.degenerate]
    if not plotted:
        raise ValueError("no non-degenerate centers to plot")
    xs = np.array([s.eff_n for s in plotted])
    lo, hi = float(xs.min()), float(xs.max())
    if hi <= lo:
        lo, hi = lo / 2, hi * 2
    grid = np.geomspace(lo, hi, n_grid)
    curves = {}
    for level in ("inner", "outer"):
        lower, upper = funnel_limits(grid, geometry, level)
        curves[level] = {"x": grid.tolist(), "lower": lower.tolist(), "upper": upper.tolist()}
    counts = {c.value: 0 for c in Classification}
    points = []
    for s in sorted(plotted, key=lambda s: s.center_id):
        counts[s.classification.value] += 1
        points.append(
            {"center_id": s.center_id, "x": s.eff_n, "y": s.oe_ratio,
             "classification": s.classification.value}
        )
    return FunnelChart(
        title=title,
        points=points,
        curves=curves,
        target=1.0,
        counts=counts,
        p0=geometry.p0,
        alpha=geometry.alpha,
        alpha_prime=geometry.alpha_prime,
    )


@dataclass
class BenchmarkResult:
    fit: CoxFit
    summaries: list[CenterSummary]
    probabilities: np.ndarray
    p0: float
    geometry: FunnelGeometry | None
    chart: FunnelChart | None
    imputation: ImputationReport
    warnings: list[str] = field(default_factory=list)

    def bucket_counts(self) -> dict[str, int]:
        counts = {c.value: 0 for c in Classification}
        for s in self.summaries:
            if s.classification is not None:
                counts[s.classification.value] += 1
        counts["Degenerate"] = sum(s.degenerate for s in self.summaries)
        return counts


def _warn(msgs: list[str], text: str) -> None:
    logger.warning(text)
    msgs.append(text)


def _prepare(data: Dataset, config: BenchmarkConfig, msgs):
    report = ImputationReport()
    if config.imputation_enabled:
        data, report = impute_case_mix(data, config.tau)
        for name, cnt in report.counts.items():
            _warn(msgs, f"imputed {cnt} missing values of {name} with {report.fill_values[name]:g}")
    elif data.has_missing():
        raise ValueError("missing covariate values and imputation disabled")
    sizes = {c: len(idx) for c, idx in data.center_index.items()}
    benchmarked = [c for c in data.centers if sizes[c] >= config.min_center_size]
    for c in data.centers:
        if sizes[c] < config.min_center_size:
            _warn(msgs, f"center {c} below minimum size ({sizes[c]}); not benchmarked")
    return data, report, benchmarked


def _finish(summaries, p0, config, title, msgs):
    ok = [s for s in summaries if not s.degenerate]
    if not 0 < p0 < 1 or not ok:
        _warn(msgs, "no non-degenerate centers; funnel not drawn")
        return None, None
    geometry = FunnelGeometry.from_config(p0, config, len(ok))
    return geometry, build_funnel_chart(summaries, geometry, title)


def benchmark_mortality(
    data: Dataset,
    config: BenchmarkConfig | None = None,
    covariate_names: Sequence[str] | None = None,
) -> BenchmarkResult:
    """Case-mix adjusted mortality benchmark of every center."""
    config = config or BenchmarkConfig()
    msgs: list[str] = []
    data, report, benchmarked = _prepare(data, config, msgs)
    names = tuple(covariate_names) if covariate_names is not None else data.covariate_names
    fit = fit_cox(data, ModelSpec(covariate_names=names))
    if not fit.converged:
        _warn(msgs, "benchmark Cox model did not converge")
    cols = [data.covariate_names.index(n) for n in names]
    X = data.covariates[:, cols]

    G_pooled = reverse_kaplan_meier(data)
    p0 = float(observed_events(data.time, data.status, data.entry_time, config.tau).mean())
    probs = np.full(len(data), np.nan)
    summaries = []
    for c in benchmarked:
        idx = data.center_index[c]
        if idx.size < config.min_censoring_center_size:
            _warn(msgs, f"center {c} has {idx.size} patients; using pooled follow-up curve")
            G = G_pooled
        else:
            G = reverse_kaplan_meier(data.subset(idx))
        p = event_probabilities(fit, X[idx], G, config.tau)
        probs[idx] = p
        O = int(observed_events(data.time[idx], data.status[idx], data.entry_time[idx], config.tau).sum())
        summaries.append(summarize_counts(c, O, p, config, p0))

    geometry, chart = _finish(summaries, p0, config, "Death within horizon", msgs)
    return BenchmarkResult(fit, summaries, probs, p0, geometry, chart, report, msgs)


def benchmark_followup(
    data: Dataset,
    config: BenchmarkConfig | None = None,
    covariate_names: Sequence[str] | None = None,
) -> BenchmarkResult:
    """Benchmark of losses to follow-up against the pooled follow-up curve."""
    config = config or BenchmarkConfig()
    msgs: list[str] = []
    data, report, benchmarked = _prepare(data, config, msgs)
    names = tuple(covariate_names) if covariate_names is not None else data.covariate_names
    fit = fit_cox(
        data, ModelSpec(covariate_names=names, stratify_by_center=True, allow_eventless_strata=True)
    )
    for c in fit.eventless_strata:
        _warn(msgs, f"center {c} has no deaths; its survival is taken as 1 (zero hazard stratum)")
    cols = [data.covariate_names.index(n) for n in names]
    X = data.covariates[:, cols]
    G = reverse_kaplan_meier(data)
    p0 = float(observed_losses(data.time, data.status, config.tau).mean())
    probs = np.full(len(data), np.nan)
    summaries = []
    for c in benchmarked:
        idx = data.center_index[c]
        p = followup_probabilities(fit, G, X[idx], c, config.tau)
        probs[idx] = p
        O = int(observed_losses(data.time[idx], data.status[idx], config.tau).sum())
        summaries.append(summarize_counts(c, O, p, config, p0))
    geometry, chart = _finish(summaries, p0, config, "Loss to follow-up within horizon", msgs)
    return BenchmarkResult(fit, summaries, probs, p0, geometry, chart, report, msgs)


def write_summaries_csv(summaries: Sequence[CenterSummary], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CenterSummary.CSV_FIELDS)
        for s in sorted(summaries, key=lambda s: s.center_id):
            w.writerow(s.csv_row())
