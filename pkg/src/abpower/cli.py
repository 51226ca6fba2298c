"""Command-line front end: ``abpower plan | analyze | simulate``.

Reports are built as JSON-compatible dicts; the text format is rendered from
the same dict, so both carry identical numbers.

Exit codes: 0 success, 2 configuration or schema error, 3 data error,
4 calibration band violated (simulate only).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

from .aggregation import ClusterTable, EventRecord, EventTable, aggregate_table
from .core_stats import NormalTail, sample_skewness
from .errors import (
    AbpowerError,
    ConfigError,
    DataError,
    DesignError,
    DomainError,
    EmptyInputError,
    HarnessError,
    RowError,
    SchemaError,
)
from .estimators import MetricKind, common_mean, estimate_arm, estimate_effect
from .power import PowerSpec, VarianceProfile, skewness_warning, solve
from .simulation import (
    GeneratorConfig,
    calibrate_se,
    calibration_bands,
    effect_for_power,
    empirical_power,
    pitfall_weighted_regression,
)

SCHEMA = "abpower/1"
SEED_ENV = "ABPOWER_SEED"
CONTROL_LABELS = ("c", "control")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_BAND = 0, 2, 3, 4


@dataclass
class RunConfig:
    command: Literal["plan", "analyze", "simulate"]
    input_path: str
    metric: str = "mean"
    y_column: str = "y"
    w_column: str | None = None
    unit_column: str = "unit"
    arm_column: str | None = None
    covariate_columns: list[str] = field(default_factory=list)
    w_mode: str | None = None
    cov_mode: str = "sum"
    alpha: float = 0.05
    psi: float = 0.5
    tail: NormalTail = NormalTail.ONE_SIDED
    power: float | None = None
    mde: float | None = None
    n: int | None = None
    control: str | None = None
    output_format: str = "text"
    seed: int | None = None
    scenario: str | None = None
    estimator: str | None = None
    replications: int | None = None

    def __post_init__(self):
        self.tail = NormalTail.parse(self.tail)
        if self.metric not in ("mean", "ratio"):
            raise ConfigError(f"--metric must be mean or ratio, got {self.metric!r}")
        if self.w_mode is None:
            self.w_mode = "sum" if self.w_column else "count"
        if self.w_mode == "sum" and self.w_column is None:
            raise ConfigError("--w-mode sum needs a --w column")
        if self.command == "analyze" and not self.arm_column:
            raise ConfigError("analyze needs --arm")

    @property
    def metric_kind(self) -> MetricKind:
        if self.covariate_columns:
            return MetricKind.ADJUSTED_RATIO if self.metric == "ratio" else MetricKind.ADJUSTED_MEAN
        return MetricKind(self.metric)

    @property
    def solve_target(self) -> str:
        return PowerSpec(alpha=self.alpha, power=self.power, mde=self.mde, n=self.n, psi=self.psi,
                         tail=self.tail).target


def ingest_csv(path: str | Path, config: RunConfig) -> list[EventRecord]:
    """Read events from a comma-separated UTF-8 file with a header row."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyInputError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        wanted = [config.unit_column, config.y_column]
        if config.w_column:
            wanted.append(config.w_column)
        if config.arm_column:
            wanted.append(config.arm_column)
        wanted += config.covariate_columns
        missing = [c for c in wanted if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s): {', '.join(missing)}")
        col = {name: header.index(name) for name in wanted}

        events = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise RowError(line, f"expected {len(header)} fields, got {len(row)}")
            unit = row[col[config.unit_column]].strip()
            if not unit:
                raise RowError(line, f"blank {config.unit_column!r}")
            arm = None
            if config.arm_column:
                arm = row[col[config.arm_column]].strip()
                if not arm:
                    raise RowError(line, f"blank {config.arm_column!r}")
            events.append(
                EventRecord(
                    unit_id=unit,
                    y=_number(row, col, config.y_column, line),
                    w=_number(row, col, config.w_column, line) if config.w_column else None,
                    covariates=tuple(_number(row, col, c, line) for c in config.covariate_columns),
                    arm=arm,
                )
            )
    if not events:
        raise EmptyInputError(f"{path}: no data rows")
    return events


def _number(row: list[str], col: dict, name: str, line: int) -> float:
    cell = row[col[name]].strip()
    if not cell:
        raise RowError(line, f"blank {name!r}")
    try:
        v = float(cell)
    except ValueError:
        raise RowError(line, f"cannot parse {name!r} value {cell!r} as a number") from None
    if not math.isfinite(v):
        raise RowError(line, f"non-finite {name!r} value {cell!r}")
    return v


def _clusters(config: RunConfig) -> ClusterTable:
    events = ingest_csv(config.input_path, config)
    return aggregate_table(EventTable.from_records(events), config.w_mode, config.cov_mode)


def _skewness(residuals: np.ndarray) -> float | None:
    try:
        return sample_skewness(residuals)
    except AbpowerError:
        return None


def run_plan(config: RunConfig) -> dict:
    """Power analysis from historical data pooled into a single arm."""
    target = config.solve_target
    table = _clusters(config)
    kind = config.metric_kind
    xbar = table.x.mean(axis=0)
    arm = estimate_arm(table, kind, xbar, theta_mode="unadjusted")
    profile = VarianceProfile.from_arm(arm)
    spec = PowerSpec(alpha=config.alpha, power=config.power, mde=config.mde, n=config.n, psi=config.psi,
                     tail=config.tail)
    solution = solve(spec, profile)

    base_kind = MetricKind(config.metric)
    report = {
        "schema": SCHEMA,
        "command": "plan",
        "metric": kind.value,
        "target": target,
        "n_units": len(table),
        "n_events": int(table.n_events.sum()),
        "profile": {
            "residual_sd": profile.residual_sd,
            "denom_mean": profile.denom_mean,
            "effective_sd": profile.effective_sd,
            "df": arm.df,
        },
        "solution": solution.to_dict(),
    }
    if kind.is_adjusted:
        base = estimate_arm(table, base_kind)
        ss_adj = float(arm.residuals @ arm.residuals)
        ss_base = float(base.residuals @ base.residuals)
        report["unadjusted"] = {
            "residual_sd": base.residual_sd,
            "denom_mean": base.denom_mean,
            "effective_sd": base.residual_sd / base.denom_mean,
        }
        report["residual_r2"] = 1.0 - ss_adj / ss_base if ss_base > 0 else 0.0
        ratio = profile.effective_sd / report["unadjusted"]["effective_sd"] if base.residual_sd > 0 else 1.0
        report["variance_reduction"] = 1.0 - ratio**2
    skew = _skewness(arm.residuals)
    warn = skewness_warning(skew, config.psi, emit=False) if skew is not None else None
    report["diagnostics"] = {"skewness": skew, "warnings": [warn] if warn else []}
    report["seed"] = config.seed
    return report


def _control_label(levels: list, requested: str | None) -> str:
    if requested is not None:
        if requested not in levels:
            raise DesignError(f"control label {requested!r} not among arm levels {levels}")
        return requested
    matches = [lv for lv in levels if str(lv).lower() in CONTROL_LABELS]
    if len(matches) != 1:
        raise DesignError(f"cannot tell which of {levels} is control; pass --control")
    return matches[0]


def run_analyze(config: RunConfig) -> dict:
    """Two-arm comparison; covariates are centered on their mean over both arms."""
    table = _clusters(config)
    levels = table.arm_levels()
    if len(levels) != 2:
        raise DesignError(f"analyze needs exactly 2 arm levels, found {len(levels)}: {levels}")
    control = _control_label(levels, config.control)
    treatment = next(lv for lv in levels if lv != control)
    c = table.subset(table.arms == control)
    t = table.subset(table.arms == treatment)
    kind = config.metric_kind
    xbar = common_mean(c, t)
    est_c = estimate_arm(c, kind, xbar, theta_mode="arm_adjusted")
    est_t = estimate_arm(t, kind, xbar, theta_mode="arm_adjusted")
    effect = estimate_effect(est_c, est_t, config.alpha, config.tail)
    psi_obs = len(t) / len(table)
    skew = _skewness(np.concatenate([est_c.residuals, est_t.residuals]))
    warn = skewness_warning(skew, psi_obs, emit=False) if skew is not None else None
    return {
        "schema": SCHEMA,
        "command": "analyze",
        "metric": kind.value,
        "control": control,
        "treatment": treatment,
        "arms": {control: est_c.to_dict(), treatment: est_t.to_dict()},
        "effect": effect.to_dict(),
        "diagnostics": {
            "skewness": skew,
            "skewness_by_arm": {control: _skewness(est_c.residuals), treatment: _skewness(est_t.residuals)},
            "psi_observed": psi_obs,
            "xbar": [float(v) for v in xbar],
            "warnings": [warn] if warn else [],
        },
        "seed": config.seed,
    }


_HARNESS_KEYS = ("scenario", "estimator", "replications", "alpha", "tail", "power")


def load_simulation_file(path: str | Path) -> tuple[dict, dict]:
    """Split a JSON or key=value file into (harness settings, generator fields)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object")
    else:
        raw = {}
        for i, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{i}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "covariates":
                raw[key] = [pair.split(":") for pair in value.split(",") if pair.strip()] if value else []
            else:
                raw[key] = value
    harness = {k: raw.pop(k) for k in _HARNESS_KEYS if k in raw}
    return harness, raw


def run_simulate(config: RunConfig) -> tuple[dict, bool]:
    """Run a Monte Carlo scenario; returns the report and whether it stayed in band."""
    harness, gen_fields = load_simulation_file(config.input_path)
    scenario = config.scenario or harness.get("scenario", "calibrate")
    if scenario not in ("calibrate", "power", "pitfall"):
        raise ConfigError(f"scenario: expected calibrate|power|pitfall, got {scenario!r}")
    if config.seed is not None:
        gen_fields["seed"] = config.seed
    gen = GeneratorConfig.from_dict(gen_fields)
    kind = MetricKind(config.estimator or harness.get("estimator", "ratio"))
    try:
        reps = int(config.replications or harness.get("replications", 1000))
        alpha = float(harness.get("alpha", config.alpha))
    except ValueError as exc:
        raise ConfigError(f"bad harness setting: {exc}") from None
    tail = NormalTail.parse(harness.get("tail", config.tail))
    bands = calibration_bands(reps)
    checks: dict[str, bool] = {}

    if scenario == "calibrate":
        rep = calibrate_se(gen, kind, reps, alpha=alpha, tail=tail)
        body = rep.to_dict()
        checks["calibration_ratio"] = _within(rep.calibration_ratio, bands["calibration_ratio"])
        checks["coverage"] = _within(rep.coverage, bands["coverage"])
    elif scenario == "power":
        if "power" in harness:
            gen = replace(gen, effect=effect_for_power(gen, kind, float(harness["power"]), alpha, tail))
        spec = PowerSpec(alpha=alpha, psi=gen.psi, n=gen.n_units, tail=tail)
        rep = empirical_power(gen, spec, reps, kind)
        body = rep.to_dict()
        if rep.predicted_power is None:
            half = max(0.01, 3.0 * math.sqrt(alpha * (1 - alpha) / reps))
            checks["rejection_rate_null"] = abs(rep.empirical_power - alpha) <= half
        else:
            p = rep.predicted_power
            half = max(0.02, 3.0 * math.sqrt(p * (1 - p) / reps))
            checks["empirical_power"] = abs(rep.empirical_power - p) <= half
    else:
        rep = pitfall_weighted_regression(gen, reps)
        body = rep.to_dict()
        checks["delta_ratio"] = _within(rep.delta_ratio, bands["calibration_ratio"])

    ok = all(checks.values())
    report = {
        "schema": SCHEMA,
        "command": "simulate",
        "scenario": scenario,
        "generator": gen.to_dict(),
        "report": body,
        "bands": {k: list(v) for k, v in bands.items()},
        "checks": checks,
        "ok": ok,
        "seed": gen.seed,
    }
    return report, ok


def _within(value: float, band: tuple[float, float]) -> bool:
    return band[0] <= value <= band[1]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def flatten(report: dict, prefix: str = "") -> list[tuple[str, object]]:
    items = []
    for k, v in report.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            items.extend(flatten(v, key + "."))
        else:
            items.append((key, v))
    return items


def render_text(report: dict) -> str:
    """One ``key = value`` line per leaf; floats use their shortest round-trip repr."""
    lines = []
    for key, v in flatten(report):
        if isinstance(v, list):
            v = "[" + ", ".join(_text_value(x) for x in v) + "]"
        else:
            v = _text_value(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def _text_value(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render(report: dict, fmt: str) -> str:
    report = _jsonable(report)
    if fmt == "json":
        return json.dumps(report, indent=2, allow_nan=False) + "\n"
    return render_text(report)


def _csv_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--alpha", type=float, default=0.05)
    common.add_argument("--psi", type=float, default=0.5, help="fraction of units in treatment")
    common.add_argument("--tail", choices=["one", "two"], default="one")
    common.add_argument("--format", choices=["text", "json"], default="text", dest="output_format")
    common.add_argument("--seed", type=int, default=None, help=f"falls back to ${SEED_ENV}")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("input_path", metavar="CSV")
    data.add_argument("--metric", choices=["mean", "ratio"], default="mean")
    data.add_argument("--y", dest="y_column", required=True)
    data.add_argument("--w", dest="w_column")
    data.add_argument("--unit", dest="unit_column", required=True)
    data.add_argument("--arm", dest="arm_column")
    data.add_argument("--covariates", type=_csv_list, default=[], dest="covariate_columns")
    data.add_argument("--w-mode", choices=["sum", "count"])
    data.add_argument("--cov-mode", choices=["sum", "mean", "first"], default="sum")

    parser = argparse.ArgumentParser(prog="abpower", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    plan = sub.add_parser("plan", parents=[common, data], help="power analysis from historical data")
    plan.add_argument("--power", type=float)
    plan.add_argument("--mde", type=float)
    plan.add_argument("--n", type=int)

    analyze = sub.add_parser("analyze", parents=[common, data], help="estimate a two-arm experiment")
    analyze.add_argument("--control", help="label of the control arm (default: C or control)")

    sim = sub.add_parser("simulate", parents=[common], help="Monte Carlo calibration run")
    sim.add_argument("input_path", metavar="CONFIG", help="JSON or key=value generator config")
    sim.add_argument("--scenario", choices=["calibrate", "power", "pitfall"])
    sim.add_argument("--estimator", choices=[k.value for k in MetricKind])
    sim.add_argument("--replications", type=int)
    return parser


def _seed(args_seed: int | None) -> int | None:
    if args_seed is not None:
        return args_seed
    env = os.environ.get(SEED_ENV)
    if env is None or not env.strip():
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"${SEED_ENV} must be an integer, got {env!r}") from None


def config_from_args(args: argparse.Namespace) -> RunConfig:
    kw = {k: v for k, v in vars(args).items() if v is not None}
    kw["seed"] = _seed(args.seed)
    kw["tail"] = NormalTail.parse(args.tail)
    return RunConfig(**kw)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = config_from_args(args)
        if config.command == "plan":
            report, ok = run_plan(config), True
        elif config.command == "analyze":
            report, ok = run_analyze(config), True
        else:
            report, ok = run_simulate(config)
        sys.stdout.write(render(report, config.output_format))
        return EXIT_OK if ok else EXIT_BAND
    except (ConfigError, DomainError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"abpower: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, HarnessError) as exc:
        print(f"abpower: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
