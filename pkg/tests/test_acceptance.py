"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Scenario runs are at desk scale (100 centers, 20 replicates, 200 bootstrap
draws) with the seed stored in the bundled scenario file, and are shared
between criteria through module fixtures.
"""

import itertools
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from survfunnel.cli import main
from survfunnel.coxmodel import POOLED, CoxFit, fit_cox, partial_log_likelihood
from survfunnel.funnelbench import event_probability, followup_probability
from survfunnel.simlab import (
    SCENARIOS,
    censoring_dispersion_trend,
    dump_scenario,
    generate_dataset,
    run_scenario,
)
from survfunnel.survdata import Dataset, StepFunction, poisson_binomial_pmf


def verdict(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def desk(name: str, **override):
    return SCENARIOS[name].desk_scale().replace(**override)


@pytest.fixture(scope="module")
def base_run():
    start = time.perf_counter()
    summary = run_scenario(desk("base"), workers=1)
    return summary, time.perf_counter() - start


# -- scenario criteria ------------------------------------------------------------

@pytest.mark.slow
def test_base_scenario_calibration(base_run):
    s, elapsed = base_run
    ok = (abs(s.z_mean) <= 0.1 and 0.90 <= s.z_sd <= 1.08
          and 92.5 <= s.funnel_pct["Target"] <= 98 and elapsed <= 300)
    verdict("base calibration", ok,
            f"Z mean {s.z_mean:+.3f} (|.|<=0.1), Z sd {s.z_sd:.3f} in [0.90, 1.08], "
            f"Target {s.funnel_pct['Target']:.1f}% in [92.5, 98], runtime {elapsed:.0f}s <= 300s")


@pytest.mark.slow
def test_same_followup_and_rejection_gap(base_run):
    # the shared censoring rate is on the PH scale: log rate -4.8 gives
    # roughly 30% censored by month 12 at the median censoring shape
    same = run_scenario(desk("base_same_fup", shared_censoring_log_rate=-4.8))
    base, _ = base_run
    gap = base.rejection("pseudo") - base.rejection("funnel")
    ok_same = same.pseudo_pct["Target"] >= same.funnel_pct["Target"] - 2
    ok_gap = gap >= 1.5
    verdict("pseudo comparator vs funnel", ok_same and ok_gap,
            f"same follow-up pseudo Target {same.pseudo_pct['Target']:.1f}% >= funnel "
            f"{same.funnel_pct['Target']:.1f}% - 2; base rejection pseudo "
            f"{base.rejection('pseudo'):.1f}% - funnel {base.rejection('funnel'):.1f}% = "
            f"{gap:.2f} >= 1.5")


@pytest.mark.slow
def test_frailty_scenarios():
    small = run_scenario(desk("small_frailty"))
    large = run_scenario(desk("large_frailty"))
    ts, tl = small.funnel_pct["Target"], large.funnel_pct["Target"]
    verdict("frailty overdispersion", 48 <= ts <= 66 and 36 <= tl <= 54,
            f"small frailty Target {ts:.1f}% in [48, 66]; large frailty Target {tl:.1f}% in [36, 54]")


@pytest.mark.slow
def test_non_ph_robustness():
    s = run_scenario(desk("non_ph"))
    t = s.funnel_pct["Target"]
    verdict("non-PH robustness", 91 <= t <= 98,
            f"Target {t:.1f}% in [91, 98] (Z mean {s.z_mean:+.3f}, sd {s.z_sd:.3f})")


# -- oracle equivalences -------------------------------------------------------------

def _enumerated_pmf(p):
    pmf = np.zeros(len(p) + 1)
    for outcome in itertools.product((0, 1), repeat=len(p)):
        pmf[sum(outcome)] += np.prod(np.where(outcome, p, 1 - p))
    return pmf


def _brute_loglik(B, time_, status, X):
    ll = np.zeros(B.shape[0])
    for i in np.flatnonzero(status == 1):
        r = time_ >= time_[i]
        ll += X[i] @ B.T - np.log(np.exp(X[r] @ B.T).sum(axis=0))
    return ll


def _ten_subjects(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(10, 2))
    t = rng.exponential(np.exp(-0.5 * X[:, 0]))
    c = rng.exponential(2.0, 10)
    return Dataset(["A"] * 10, np.minimum(t, c), (t <= c).astype(int), X, ("a", "b"))


def test_oracle_equivalences():
    rng = np.random.default_rng(0)
    pb_err = 0.0
    for n in range(1, 13):
        for _ in range(3):
            p = rng.uniform(size=n)
            pb_err = max(pb_err, np.abs(poisson_binomial_pmf(p) - _enumerated_pmf(p)).max())

    h, c, tau, n_grid = 0.05, 0.03, 12.0, 10_000
    grid = np.linspace(tau / n_grid, tau, n_grid)
    H0 = StepFunction(grid, h * grid, 0.0)
    G = StepFunction(grid, np.exp(-c * grid), 1.0)
    p = event_probability(CoxFit(np.zeros(1), {POOLED: H0}), [0.0], G, tau)
    pt = followup_probability(CoxFit(np.zeros(1), {"A": H0}, stratified=True), G, None, [0.0],
                              "A", tau)
    closed = h / (h + c) * (1 - math.exp(-(h + c) * tau))
    ep_err = abs(p - closed)
    mass_err = abs(p + pt + math.exp(-(h + c) * tau) - 1)

    beta_err, score_err = 0.0, 0.0
    g = np.arange(-3, 3.0001, 0.01)
    coarse = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    f = np.arange(-0.02, 0.02001, 0.0002)
    fine = np.stack(np.meshgrid(f, f, indexing="ij"), -1).reshape(-1, 2)
    for seed in (0, 1, 2, 4):
        ds = _ten_subjects(seed)
        best = coarse[np.argmax(_brute_loglik(coarse, ds.time, ds.status, ds.covariates))]
        cand = best + fine
        best = cand[np.argmax(_brute_loglik(cand, ds.time, ds.status, ds.covariates))]
        beta_err = max(beta_err, np.abs(fit_cox(ds).beta - best).max())

        beta = np.random.default_rng(seed).normal(scale=0.5, size=2)
        _, score, _ = partial_log_likelihood(ds, beta)
        for k in range(2):
            e = np.zeros(2)
            e[k] = 1e-5
            fd = (partial_log_likelihood(ds, beta + e)[0]
                  - partial_log_likelihood(ds, beta - e)[0]) / 2e-5
            score_err = max(score_err, abs(score[k] - fd) / max(abs(fd), 1e-8))

    ok = (pb_err <= 1e-12 and ep_err <= 1e-3 and mass_err <= 2e-3 and beta_err <= 1e-3
          and score_err <= 1e-4)
    verdict("oracle equivalences", ok,
            f"PB vs enumeration {pb_err:.1e} <= 1e-12; closed form {ep_err:.1e} <= 1e-3; "
            f"mass {mass_err:.1e} <= 2e-3; Cox beta vs grid {beta_err:.1e} <= 1e-3; "
            f"score vs finite difference {score_err:.1e} <= 1e-4 rel")


# -- diagnostic property ---------------------------------------------------------------

@pytest.mark.slow
def test_dispersion_vs_censoring(base_run):
    s, _ = base_run
    fun = censoring_dispersion_trend(s.diagnostics, "Z_funnel")
    pse = censoring_dispersion_trend(s.diagnostics, "Z_pseudo")
    ok = s.replications >= 10 and fun.pvalue > 0.05 and pse.slope > 0 and pse.pvalue < 0.05
    verdict("dispersion vs censoring", ok,
            f"{s.replications} null replicates; funnel |Z| slope {fun.slope:+.4f} "
            f"(p={fun.pvalue:.2f} > 0.05); pseudo |Z| slope {pse.slope:+.4f} "
            f"(p={pse.pvalue:.1e} < 0.05)")


# -- end-to-end determinism -------------------------------------------------------------

def _snapshot(root):
    return {p.name: p.read_bytes() for p in sorted(root.iterdir())
            if p.suffix in (".csv", ".svg")}


def test_end_to_end_determinism(tmp_path, capsys):
    data = generate_dataset(SCENARIOS["base"].replace(n_centers=30), 99).data
    csv_path = tmp_path / "cohort.csv"
    with open(csv_path, "w") as fh:
        fh.write("center_id,time,status,x\n")
        for r in data.records:
            fh.write(f"{r.center_id},{r.time!r},{r.status},{r.covariates[0]!r}\n")
    scen = tmp_path / "tiny.scenario"
    scen.write_text(dump_scenario(SCENARIOS["base"].replace(
        name="tiny", n_centers=12, center_size_mean=60, center_size_sd=25, replications=2,
        bootstrap=100)))

    commands = {
        "funnel-mortality": ["--input", str(csv_path)],
        "funnel-followup": ["--input", str(csv_path)],
        "fit-report": ["--input", str(csv_path)],
        "pseudo-compare": ["--input", str(csv_path), "--bootstrap", "200"],
        "simulate": ["--input", str(scen), "--paper-scale"],
    }
    bad = []
    files = 0
    for cmd, args in commands.items():
        snaps = []
        for k in range(2):
            out = tmp_path / f"{cmd}-{k}"
            rc = main([cmd, *args, "--seed", "7", "--out-dir", str(out)])
            snaps.append(_snapshot(out) if rc == 0 else None)
        if snaps[0] is None or not snaps[0] or snaps[0] != snaps[1]:
            bad.append(cmd)
        else:
            files += len(snaps[0])
    capsys.readouterr()
    verdict("end-to-end determinism", not bad,
            f"{len(commands)} commands, {files} CSV/SVG files byte-identical across two runs"
            + (f"; differing: {', '.join(bad)}" if bad else ""))
