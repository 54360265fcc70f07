"""Simulation study of the funnel procedure and the pseudo-observation comparator.

Event times are Weibull with cumulative hazard (rate * t) ** shape. Censoring
times default to the proportional-hazards form rate * t ** shape, the form in
which the center-level censoring parameters are specified; ``censoring_form =
scale`` switches them to the event-time form.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .funnelbench import BenchmarkConfig, Classification, benchmark_mortality
from .pseudocmp import pseudo_compare
from .survdata import Dataset

logger = logging.getLogger(__name__)

NB_RESAMPLE_LIMIT = 1000


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "base"
    n_centers: int = 300
    center_size_mean: float = 200.0
    center_size_sd: float = 150.0
    censoring_log_mean: tuple[float, float] = (0.4, -4.8)
    censoring_log_sd: tuple[float, float] = (0.24, 1.72)
    censoring_log_corr: float = -0.87
    covariate_between_var: float = 0.056
    covariate_within_var: float = 0.224
    covariate_beta: float = 1.0
    baseline_shape: float = 0.94
    baseline_rate: float = 0.032
    frailty_log_variance: float = 0.0
    same_followup: bool = False
    shared_censoring_log_shape: float = 0.4
    shared_censoring_log_rate: float = 0.8
    censoring_form: str = "ph"
    non_ph: bool = False
    nonph_t_star: float = 12.0
    tau: float = 12.0
    alpha: float = 0.05
    replications: int = 50
    bootstrap: int = 1000
    run_pseudo: bool = True
    seed: int = 20240101

    def __post_init__(self):
        object.__setattr__(self, "censoring_log_mean", tuple(map(float, self.censoring_log_mean)))
        object.__setattr__(self, "censoring_log_sd", tuple(map(float, self.censoring_log_sd)))
        if self.n_centers < 2:
            raise ValueError("n_centers must be >= 2")
        if min(self.censoring_log_sd) < 0 or self.covariate_between_var < 0 or \
                self.covariate_within_var < 0 or self.frailty_log_variance < 0 or \
                self.center_size_sd < 0:
            raise ValueError("variances must be >= 0")
        if abs(self.censoring_log_corr) > 1:
            raise ValueError("|correlation| must be <= 1")
        if self.center_size_mean <= 0 or self.baseline_rate <= 0 or self.baseline_shape <= 0:
            raise ValueError("size mean, baseline rate and shape must be > 0")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.censoring_form not in ("ph", "scale"):
            raise ValueError("censoring_form must be 'ph' or 'scale'")

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)

    def desk_scale(self) -> "ScenarioConfig":
        return self.replace(
            n_centers=min(self.n_centers, 100), replications=20, bootstrap=200
        )


def _standard_scenarios() -> dict[str, ScenarioConfig]:
    base = ScenarioConfig()
    return {
        "base": base,
        "base_same_fup": base.replace(name="base_same_fup", same_followup=True),
        "fewer_centers": base.replace(name="fewer_centers", n_centers=30, replications=500),
        "fewer_patients": base.replace(
            name="fewer_patients", center_size_mean=20.0, center_size_sd=15.0, replications=500
        ),
        "non_ph": base.replace(name="non_ph", frailty_log_variance=0.15, non_ph=True),
        "small_frailty": base.replace(name="small_frailty", frailty_log_variance=0.15),
        "large_frailty": base.replace(name="large_frailty", frailty_log_variance=0.30),
    }


SCENARIOS = _standard_scenarios()
TABLE_ORDER = tuple(SCENARIOS)


# -- scenario files ---------------------------------------------------------

def _coerce(name: str, ftype, raw: str):
    raw = raw.strip()
    if ftype in ("bool", bool):
        v = raw.lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: not a boolean: {raw!r}")
    if ftype in ("int", int):
        return int(raw)
    if ftype in ("float", float):
        return float(raw)
    if ftype in ("str", str):
        return raw
    if "tuple" in str(ftype):
        parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(float(p) for p in parts)
    raise TypeError(f"unsupported field type for {name}")


def parse_scenario(text: str, base: ScenarioConfig | None = None) -> ScenarioConfig:
    """Parse a ``[scenario]`` key = value document; unknown keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_string(text)
    extra = [s for s in cp.sections() if s != "scenario"]
    if extra:
        raise ValueError(f"unknown section: {extra[0]}")
    if not cp.has_section("scenario"):
        raise ValueError("missing [scenario] section")
    fields = {f.name: f.type for f in dataclasses.fields(ScenarioConfig)}
    values = {}
    for key, raw in cp.items("scenario"):
        if key not in fields:
            raise ValueError(f"unknown scenario field: {key}")
        values[key] = _coerce(key, fields[key], raw)
    base = base or ScenarioConfig()
    return base.replace(**values)


def load_scenario(path) -> ScenarioConfig:
    return parse_scenario(Path(path).read_text())


def dump_scenario(config: ScenarioConfig) -> str:
    lines = ["[scenario]"]
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def bundled_scenario_path(name: str) -> Path:
    return Path(__file__).parent / "scenarios" / f"{name}.scenario"


# -- data generation --------------------------------------------------------

def solve_nonph_shape(center_rate: float, base_shape: float, base_rate: float,
                      t_star: float = 12.0) -> float:
    """Weibull shape giving a center the baseline's survival at t_star.

    Solves (center_rate*t)^a = (base_rate*t)^base_shape at t = t_star.
    """
    if min(center_rate, base_shape, base_rate, t_star) <= 0:
        raise ValueError("all inputs must be > 0")
    denom = math.log(center_rate * t_star)
    if denom == 0.0:
        raise ValueError("shape unsolvable at this rate")
    shape = base_shape * math.log(base_rate * t_star) / denom
    if shape <= 0:
        raise ValueError("shape unsolvable at this rate")
    return shape


def negative_binomial_sizes(rng: np.random.Generator, mean: float, sd: float, size: int) -> np.ndarray:
    """Center sizes with the given mean and sd; draws below 1 are redrawn."""
    var = sd * sd
    if var > mean:
        p = mean / var
        r = mean * p / (1 - p)

        def draw(m):
            return rng.negative_binomial(r, p, size=m)
    else:
        def draw(m):
            return rng.poisson(mean, size=m)

    out = draw(size)
    for _ in range(NB_RESAMPLE_LIMIT):
        bad = out < 1
        if not bad.any():
            return out
        out[bad] = draw(int(bad.sum()))
    raise RuntimeError("could not draw positive center sizes")


@dataclass
class SimulatedData:
    data: Dataset
    censoring_shape: np.ndarray
    censoring_rate: np.ndarray
    log_frailty: np.ndarray
    event_shape: np.ndarray


def weibull_times(rng, shape, rate, log_hr=0.0):
    """Inverse-CDF draws with cumulative hazard (rate*t)^shape * exp(log_hr)."""
    shape, rate, log_hr = np.broadcast_arrays(
        np.asarray(shape, float), np.asarray(rate, float), np.asarray(log_hr, float)
    )
    e = rng.standard_exponential(size=shape.shape)
    return (e * np.exp(-log_hr)) ** (1.0 / shape) / rate


def weibull_ph_times(rng, shape, rate):
    """Inverse-CDF draws with cumulative hazard rate * t^shape."""
    shape, rate = np.broadcast_arrays(np.asarray(shape, float), np.asarray(rate, float))
    e = rng.standard_exponential(size=shape.shape)
    return (e / rate) ** (1.0 / shape)


def generate_dataset(config: ScenarioConfig, replicate_seed) -> SimulatedData:
    rng = np.random.default_rng(replicate_seed)
    k = config.n_centers
    sizes = negative_binomial_sizes(rng, config.center_size_mean, config.center_size_sd, k)

    if config.same_followup:
        c_shape = np.full(k, math.exp(config.shared_censoring_log_shape))
        c_rate = np.full(k, math.exp(config.shared_censoring_log_rate))
    else:
        s1, s2 = config.censoring_log_sd
        rho = config.censoring_log_corr
        cov = [[s1 * s1, rho * s1 * s2], [rho * s1 * s2, s2 * s2]]
        logs = rng.multivariate_normal(config.censoring_log_mean, cov, size=k, method="cholesky")
        c_shape, c_rate = np.exp(logs[:, 0]), np.exp(logs[:, 1])

    sd_w = math.sqrt(config.frailty_log_variance)
    w = rng.normal(0.0, sd_w, size=k) if sd_w > 0 else np.zeros(k)
    rate = config.baseline_rate * np.exp(w)
    shape = np.full(k, config.baseline_shape)
    if config.non_ph:
        for i in range(k):
            # the shape cannot be solved once rate*t_star >= 1; redraw that frailty
            while rate[i] * config.nonph_t_star >= 1.0:
                w[i] = rng.normal(0.0, sd_w)
                rate[i] = config.baseline_rate * math.exp(w[i])
            shape[i] = solve_nonph_shape(
                rate[i], config.baseline_shape, config.baseline_rate, config.nonph_t_star
            )

    n = int(sizes.sum())
    center = np.repeat(np.arange(k), sizes)
    u = rng.normal(0.0, math.sqrt(config.covariate_between_var), size=k)
    x = u[center] + rng.normal(0.0, math.sqrt(config.covariate_within_var), size=n)
    t_event = weibull_times(rng, shape[center], rate[center], config.covariate_beta * x)
    if config.censoring_form == "ph":
        t_cens = weibull_ph_times(rng, c_shape[center], c_rate[center])
    else:
        t_cens = weibull_times(rng, c_shape[center], c_rate[center])
    time = np.minimum(t_event, t_cens)
    status = (t_event <= t_cens).astype(int)

    width = len(str(k))
    ids = np.array([f"C{i + 1:0{width}d}" for i in range(k)], dtype=object)
    data = Dataset(ids[center], time, status, x[:, None], ("x",), require_event=False)
    return SimulatedData(data, c_shape, c_rate, w, shape)


# -- running scenarios ------------------------------------------------------

DIAGNOSTIC_FIELDS = (
    "scenario", "replicate", "center", "n", "O", "E", "V",
    "Z_funnel", "Z_pseudo", "cens_shape", "cens_rate",
)


@dataclass
class ReplicateResult:
    index: int
    rows: list[dict]
    funnel: dict[str, int]
    pseudo: dict[str, int]
    error: str | None = None


def _replicate_seeds(seed: int, index: int):
    root = np.random.SeedSequence([seed, index])
    data_ss, boot_ss = root.spawn(2)
    return data_ss, boot_ss


def run_replicate(config: ScenarioConfig, index: int) -> ReplicateResult:
    data_ss, boot_ss = _replicate_seeds(config.seed, index)
    empty = {c.value: 0 for c in Classification}
    try:
        sim = generate_dataset(config, data_ss)
        bench = benchmark_mortality(
            sim.data,
            BenchmarkConfig(tau=config.tau, alpha=config.alpha, imputation_enabled=False,
                            min_censoring_center_size=1),
        )
        pseudo = {}
        if config.run_pseudo:
            for iv in pseudo_compare(sim.data, config.tau, B=config.bootstrap,
                                     alpha=config.alpha, seed=boot_ss):
                pseudo[iv.center_id] = iv
    except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
        logger.warning("replicate %d dropped: %s", index, exc)
        return ReplicateResult(index, [], dict(empty), dict(empty), error=str(exc))

    rows = []
    funnel_counts, pseudo_counts = dict(empty), dict(empty)
    pos = {c: i for i, c in enumerate(sim.data.centers)}
    for s in bench.summaries:
        iv = pseudo.get(s.center_id)
        i = pos[s.center_id]
        if s.classification is not None:
            funnel_counts[s.classification.value] += 1
        if iv is not None:
            pseudo_counts[iv.classification.value] += 1
        rows.append({
            "scenario": config.name,
            "replicate": index,
            "center": s.center_id,
            "n": s.n,
            "O": s.O,
            "E": s.E,
            "V": s.V,
            "Z_funnel": s.Z,
            "Z_pseudo": iv.z_pseudo if iv is not None else float("nan"),
            "cens_shape": float(sim.censoring_shape[i]),
            "cens_rate": float(sim.censoring_rate[i]),
        })
    return ReplicateResult(index, rows, funnel_counts, pseudo_counts)


def _pct(counts: dict[str, int]) -> dict[str, float]:
    total = sum(counts.values())
    if total == 0:
        return {k: float("nan") for k in counts}
    return {k: 100.0 * v / total for k, v in counts.items()}


@dataclass
class SimulationSummary:
    scenario: str
    z_mean: float
    z_sd: float
    funnel_pct: dict[str, float]
    pseudo_pct: dict[str, float]
    replications: int
    dropped: int
    n_center_results: int
    mc_se_coverage: float
    mc_se_coverage_between: float
    diagnostics: list[dict] = field(default_factory=list, repr=False)

    def rejection(self, method: str = "funnel") -> float:
        pct = self.funnel_pct if method == "funnel" else self.pseudo_pct
        return pct["Under"] + pct["Over"]


def run_scenario(config: ScenarioConfig, workers: int = 1) -> SimulationSummary:
    """Run all replications of one scenario and pool the center-level results."""
    indices = range(config.replications)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_replicate, [config] * config.replications, indices))
    else:
        results = [run_replicate(config, i) for i in indices]
    results.sort(key=lambda r: r.index)

    dropped = sum(r.error is not None for r in results)
    if dropped > 0.05 * config.replications:
        raise RuntimeError(
            f"{dropped} of {config.replications} replicates failed; first error: "
            f"{next(r.error for r in results if r.error)}"
        )
    ok = [r for r in results if r.error is None]
    rows = [row for r in ok for row in r.rows]
    z = np.array([row["Z_funnel"] for row in rows])
    z = z[np.isfinite(z)]
    funnel = {c.value: sum(r.funnel[c.value] for r in ok) for c in Classification}
    pseudo = {c.value: sum(r.pseudo[c.value] for r in ok) for c in Classification}
    funnel_pct = _pct(funnel)

    cover = funnel_pct["Target"] / 100
    total = sum(funnel.values())
    mc_se = math.sqrt(cover * (1 - cover) / total) if total else float("nan")
    per_rep = [r.funnel["Target"] / max(sum(r.funnel.values()), 1) for r in ok]
    mc_se_between = float(np.std(per_rep, ddof=1) / math.sqrt(len(per_rep))) if len(per_rep) > 1 \
        else float("nan")

    return SimulationSummary(
        scenario=config.name,
        z_mean=float(z.mean()),
        z_sd=float(z.std(ddof=1)),
        funnel_pct=funnel_pct,
        pseudo_pct=_pct(pseudo),
        replications=len(ok),
        dropped=dropped,
        n_center_results=int(z.size),
        mc_se_coverage=mc_se,
        mc_se_coverage_between=mc_se_between,
        diagnostics=rows,
    )


def coverage_standard_error(coverage: float, replications: int, n_centers: int) -> float:
    """sqrt(p(1-p)/(R*K)) for coverage p pooled over R replicates of K centers."""
    return math.sqrt(coverage * (1 - coverage) / (replications * n_centers))


TABLE_HEADER = (
    "scenario", "z_mean", "z_sd",
    "funnel_under", "funnel_target", "funnel_over",
    "pseudo_under", "pseudo_target", "pseudo_over",
)


def summarize_table(summaries: Sequence[SimulationSummary]) -> str:
    """CSV table with one row per scenario: Z moments and classification percentages."""
    if not summaries:
        raise ValueError("no summaries")

    def pct(v):
        return "NA" if not math.isfinite(v) else f"{v:.1f}"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for s in summaries:
        w.writerow([
            s.scenario, f"{s.z_mean:.3f}", f"{s.z_sd:.3f}",
            pct(s.funnel_pct["Under"]), pct(s.funnel_pct["Target"]), pct(s.funnel_pct["Over"]),
            pct(s.pseudo_pct["Under"]), pct(s.pseudo_pct["Target"]), pct(s.pseudo_pct["Over"]),
        ])
    return buf.getvalue()


def write_diagnostics_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAGNOSTIC_FIELDS)
        for row in rows:
            out = []
            for k in DIAGNOSTIC_FIELDS:
                v = row[k]
                if isinstance(v, float):
                    v = "NA" if not math.isfinite(v) else repr(v)
                out.append(v)
            w.writerow(out)


@dataclass(frozen=True)
class DispersionTrend:
    slope: float
    pvalue: float
    n: int


def censoring_dispersion_trend(rows: Sequence[dict], column: str = "Z_funnel") -> DispersionTrend:
    """OLS slope of |Z| on log censoring rate across center results."""
    z = np.array([r[column] for r in rows], dtype=float)
    lr = np.log(np.array([r["cens_rate"] for r in rows], dtype=float))
    keep = np.isfinite(z) & np.isfinite(lr)
    res = stats.linregress(lr[keep], np.abs(z[keep]))
    return DispersionTrend(float(res.slope), float(res.pvalue), int(keep.sum()))
