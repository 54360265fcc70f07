"""Command-line interface: ``survfunnel <command> [flags]``.

Data go to files in ``--out-dir``; warnings and errors go to stderr; a short
bucket summary is printed to stdout. Exit status is 0 on success, 1 on a
data or configuration error and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import simlab
from .coxmodel import ModelSpec, fit_cox
from .funnelbench import (
    BenchmarkConfig,
    BenchmarkResult,
    benchmark_followup,
    benchmark_mortality,
    impute_case_mix,
    write_summaries_csv,
)
from .pseudocmp import pseudo_compare, write_intervals_csv
from .survdata import MISSING, Dataset

logger = logging.getLogger("survfunnel")

REQUIRED_COLUMNS = ("center_id", "time", "status")
OPTIONAL_COLUMNS = ("entry_time",)


class DataError(ValueError):
    """Input file problems; ``problems`` holds one message per offending line."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        shown = self.problems[:20]
        more = len(self.problems) - len(shown)
        text = "\n".join(shown) + (f"\n... and {more} more" if more > 0 else "")
        super().__init__(text)


@dataclass(frozen=True)
class RunConfig:
    input: Path | None = None
    covariates: tuple[str, ...] | None = None
    tau: float = 12.0
    alpha: float = 0.05
    multiplicity: str = "bonferroni"
    min_center_size: int = 1
    min_censoring_center_size: int = 10
    impute: bool = True
    out_dir: Path = Path(".")
    seed: int = 0
    bootstrap: int = 1000

    def __post_init__(self):
        if self.covariates is not None:
            object.__setattr__(self, "covariates", tuple(self.covariates))
        # validate the numeric fields through BenchmarkConfig
        self.benchmark_config()
        if self.bootstrap < 100:
            raise ValueError("bootstrap must be at least 100")

    def benchmark_config(self) -> BenchmarkConfig:
        return BenchmarkConfig(
            tau=self.tau,
            alpha=self.alpha,
            multiplicity=self.multiplicity,
            min_center_size=self.min_center_size,
            imputation_enabled=self.impute,
            min_censoring_center_size=self.min_censoring_center_size,
        )

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


_CONFIG_TYPES = {
    "input": Path,
    "covariates": "names",
    "tau": float,
    "alpha": float,
    "multiplicity": str,
    "min_center_size": int,
    "min_censoring_center_size": int,
    "impute": bool,
    "out_dir": Path,
    "seed": int,
    "bootstrap": int,
}


def parse_run_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse a ``[run]`` key = value document. Unknown keys are rejected."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_string(text)
    extra = [s for s in cp.sections() if s != "run"]
    if extra:
        raise ValueError(f"unknown config section: {extra[0]}")
    values = {}
    if cp.has_section("run"):
        for key, raw in cp.items("run"):
            kind = _CONFIG_TYPES.get(key)
            if kind is None:
                raise ValueError(f"unknown config key: {key}")
            raw = raw.strip()
            if kind is bool:
                values[key] = cp.getboolean("run", key)
            elif kind == "names":
                values[key] = tuple(n.strip() for n in raw.split(",") if n.strip())
            else:
                values[key] = kind(raw)
    return (base or RunConfig()).replace(**values)


def load_run_config(path) -> RunConfig:
    return parse_run_config(Path(path).read_text())


def _parse_float(text: str, what: str, line: int, problems: list[str]) -> float:
    try:
        value = float(text)
    except ValueError:
        problems.append(f"line {line}: {what} is not a number: {text!r}")
        return math.nan
    if not math.isfinite(value):
        problems.append(f"line {line}: {what} must be finite")
    return value


def load_dataset(path, config: RunConfig) -> Dataset:
    """Read a one-row-per-subject CSV file.

    Required columns are center_id, time and status; entry_time is optional.
    Covariates are the configured columns, or every remaining column when
    none are configured. Empty covariate cells are read as missing.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError([f"{path}: no header row"]) from None
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise DataError([f"{path}: missing required column {missing[0]!r}"])
        if len(set(header)) != len(header):
            raise DataError([f"{path}: duplicate column names in header"])
        if config.covariates is None:
            names = tuple(h for h in header if h not in REQUIRED_COLUMNS + OPTIONAL_COLUMNS)
        else:
            names = config.covariates
            absent = [n for n in names if n not in header]
            if absent:
                raise DataError([f"{path}: covariate column {absent[0]!r} not in header"])
        col = {h: k for k, h in enumerate(header)}
        has_entry = "entry_time" in col

        problems: list[str] = []
        centers, times, status, entry, cov = [], [], [], [], []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                problems.append(f"line {line}: expected {len(header)} fields, got {len(row)}")
                continue
            center = row[col["center_id"]].strip()
            if not center:
                problems.append(f"line {line}: empty center_id")
            t = _parse_float(row[col["time"]], "time", line, problems)
            raw_status = row[col["status"]].strip()
            if raw_status not in ("0", "1"):
                problems.append(f"line {line}: status must be 0 or 1, got {raw_status!r}")
            e = 0.0
            if has_entry and row[col["entry_time"]].strip():
                e = _parse_float(row[col["entry_time"]], "entry_time", line, problems)
            if math.isfinite(t) and t < 0:
                problems.append(f"line {line}: time must be >= 0")
            elif math.isfinite(t) and math.isfinite(e) and t <= e:
                problems.append(f"line {line}: time must exceed entry_time")
            x = []
            for name in names:
                cell = row[col[name]].strip()
                x.append(MISSING if cell == "" else
                         _parse_float(cell, f"covariate {name}", line, problems))
            centers.append(center)
            times.append(t)
            status.append(1 if raw_status == "1" else 0)
            entry.append(e)
            cov.append(x)
    if problems:
        raise DataError(problems)
    if not times:
        raise DataError([f"{path}: no data rows"])
    return Dataset(
        centers, times, status, np.array(cov, dtype=float).reshape(len(times), len(names)),
        names, entry,
    )


# -- commands ---------------------------------------------------------------

def _out(config: RunConfig, name: str) -> Path:
    return Path(config.out_dir) / name


def _print_buckets(label: str, result: BenchmarkResult) -> None:
    counts = result.bucket_counts()
    parts = "  ".join(f"{k}: {v}" for k, v in counts.items())
    print(f"{label}: {parts}")


def _write_benchmark(result: BenchmarkResult, config: RunConfig, stem: str, csv_name: str):
    from .plotting import render_funnel_svg

    write_summaries_csv(result.summaries, _out(config, csv_name))
    if result.chart is not None:
        _out(config, f"{stem}.json").write_text(result.chart.to_json())
        render_funnel_svg(result.chart, _out(config, f"{stem}.svg"))


def _write_fit_report(fit, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write(fit.report())


def cmd_funnel_mortality(config: RunConfig) -> BenchmarkResult:
    data = load_dataset(config.input, config)
    result = benchmark_mortality(data, config.benchmark_config())
    _write_benchmark(result, config, "funnel_mortality", "centers.csv")
    _write_fit_report(result.fit, _out(config, "fit_report.txt"))
    _print_buckets("mortality", result)
    return result


def cmd_funnel_followup(config: RunConfig) -> BenchmarkResult:
    data = load_dataset(config.input, config)
    result = benchmark_followup(data, config.benchmark_config())
    _write_benchmark(result, config, "funnel_followup", "followup.csv")
    _print_buckets("follow-up", result)
    return result


def cmd_fit_report(config: RunConfig, stratified: bool = False):
    data = load_dataset(config.input, config)
    if config.impute:
        data, report = impute_case_mix(data, config.tau)
        for name, cnt in report.counts.items():
            logger.warning("imputed %d missing values of %s", cnt, name)
    fit = fit_cox(
        data,
        ModelSpec(covariate_names=data.covariate_names, stratify_by_center=stratified,
                  allow_eventless_strata=stratified),
    )
    _write_fit_report(fit, _out(config, "fit_report.txt"))
    with open(_out(config, "baseline_hazard.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("stratum", "time", "hazard_jump"))
        for stratum, t, j in fit.baseline_rows():
            w.writerow((stratum, repr(t), repr(j)))
    return fit


def cmd_pseudo_compare(config: RunConfig):
    data = load_dataset(config.input, config)
    if config.impute:
        data, _ = impute_case_mix(data, config.tau)
    elif data.has_missing():
        raise ValueError("missing covariate values and imputation disabled")
    intervals = pseudo_compare(
        data, config.tau, B=config.bootstrap, alpha=config.alpha, seed=config.seed
    )
    write_intervals_csv(intervals, _out(config, "pseudo_intervals.csv"))
    counts = {"Over": 0, "Target": 0, "Under": 0}
    for iv in intervals:
        counts[iv.classification.value] += 1
    print("pseudo: " + "  ".join(f"{k}: {v}" for k, v in counts.items()))
    return intervals


def cmd_simulate(
    scenario: simlab.ScenarioConfig,
    out_dir: Path,
    paper_scale: bool = False,
    seed: int | None = None,
    workers: int = 1,
) -> simlab.SimulationSummary:
    """Run one scenario; desk scale unless ``paper_scale``."""
    from .plotting import render_zscore_scatter, render_zscore_vs_censoring

    if not paper_scale:
        scenario = scenario.desk_scale()
    if seed is not None:
        scenario = scenario.replace(seed=seed)
    summary = simlab.run_scenario(scenario, workers=workers)
    out_dir = Path(out_dir)
    (out_dir / "summary.csv").write_text(simlab.summarize_table([summary]))
    simlab.write_diagnostics_csv(summary.diagnostics, out_dir / "diagnostics.csv")
    render_zscore_vs_censoring(summary.diagnostics, out_dir / "z_vs_censoring.svg")
    if scenario.run_pseudo:
        render_zscore_scatter(summary.diagnostics, out_dir / "z_scatter.svg")
    print(
        f"{summary.scenario}: Z mean {summary.z_mean:.3f} sd {summary.z_sd:.3f}  "
        f"funnel Target {summary.funnel_pct['Target']:.1f}%  "
        f"pseudo Target {summary.pseudo_pct['Target']:.1f}%  "
        f"({summary.replications} replicates, {summary.dropped} dropped)"
    )
    return summary


# -- argument parsing ---------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, data_input: bool = True) -> None:
    if data_input:
        p.add_argument("--input", type=Path, help="subject-level CSV file")
        p.add_argument("--config", type=Path, help="run configuration file ([run] section)")
        p.add_argument("--covariates", help="comma-separated covariate columns")
        p.add_argument("--tau", type=float, help="time horizon (default 12)")
        p.add_argument("--alpha", type=float, help="two-sided level of the inner limits")
        p.add_argument("--no-impute", action="store_true",
                       help="fail on missing covariates instead of imputing")
    p.add_argument("--out-dir", type=Path, help="output directory (created if absent)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("-v", "--verbose", action="store_true", help="log informational messages")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="survfunnel",
        description="Case-mix adjusted funnel plots for censored survival outcomes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("funnel-mortality", help="benchmark deaths within tau")
    _add_common(p)
    p = sub.add_parser("funnel-followup", help="benchmark losses to follow-up within tau")
    _add_common(p)
    p = sub.add_parser("fit-report", help="fit the benchmark Cox model and report it")
    _add_common(p)
    p.add_argument("--stratified", action="store_true", help="stratify the baseline by center")
    p = sub.add_parser("pseudo-compare", help="pseudo-observation prediction intervals")
    _add_common(p)
    p.add_argument("--bootstrap", type=int, help="bootstrap replicates (default 1000)")

    p = sub.add_parser("simulate", help="run a simulation scenario")
    _add_common(p, data_input=False)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", type=Path, help="scenario file ([scenario] section)")
    src.add_argument("--scenario", choices=simlab.TABLE_ORDER, help="bundled scenario name")
    p.add_argument("--config", type=Path, help=argparse.SUPPRESS)
    p.add_argument("--paper-scale", action="store_true",
                   help="run the scenario file as written instead of at desk scale")
    p.add_argument("--tau", type=float, help="time horizon override")
    p.add_argument("--alpha", type=float, help="level override")
    p.add_argument("--workers", type=int, default=1, help="worker processes")
    return parser


def _run_config(args) -> RunConfig:
    config = load_run_config(args.config) if args.config else RunConfig()
    kw = {}
    if args.input is not None:
        kw["input"] = args.input
    if args.covariates is not None:
        kw["covariates"] = tuple(n.strip() for n in args.covariates.split(",") if n.strip())
    for name in ("tau", "alpha", "seed", "out_dir", "bootstrap"):
        value = getattr(args, name, None)
        if value is not None:
            kw[name] = value
    if args.no_impute:
        kw["impute"] = False
    config = config.replace(**kw)
    if config.input is None:
        raise ValueError("--input (or input in the config file) is required")
    return config


def _prepare_out_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory not writable: {path}")
    return path


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        if args.command == "simulate":
            if args.input is not None:
                scenario = simlab.load_scenario(args.input)
            else:
                scenario = simlab.load_scenario(simlab.bundled_scenario_path(args.scenario))
            over = {k: getattr(args, k) for k in ("tau", "alpha") if getattr(args, k) is not None}
            if over:
                scenario = scenario.replace(**over)
            out_dir = _prepare_out_dir(args.out_dir or Path("."))
            cmd_simulate(scenario, out_dir, args.paper_scale, args.seed, args.workers)
            return 0

        config = _run_config(args)
        _prepare_out_dir(Path(config.out_dir))
        if args.command == "funnel-mortality":
            cmd_funnel_mortality(config)
        elif args.command == "funnel-followup":
            cmd_funnel_followup(config)
        elif args.command == "fit-report":
            cmd_fit_report(config, stratified=args.stratified)
        elif args.command == "pseudo-compare":
            cmd_pseudo_compare(config)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
