"""Command line entry point: ``modelswap run | sweep | report``.

Scenario settings resolve as flags > config file > bundled defaults.  Output
goes under ``--out``, else ``$EDGE_MULTIAI_OUT``, else ``./results``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import __version__
from .core import (
    InvalidScenario,
    Policy,
    ScenarioConfig,
    config_from_dict,
    config_sha256,
    config_to_dict,
    default_scenario,
    validate_scenario,
)
from .engine import events_to_jsonl, run, runlog_summary_csv, runlog_to_jsonl
from .metrics import (
    AGGREGATE_METRICS,
    InsufficientRepetitions,
    SimulationReport,
    build_report,
    coefficient_of_variation,
    mean_ci,
    pareto_mask,
    report_to_json,
    reports_to_tidy_csv,
)
from .workload import generate_pair

log = logging.getLogger("modelswap")

EXIT_OK, EXIT_IO, EXIT_CONFIG = 0, 1, 2
OUT_ENV = "EDGE_MULTIAI_OUT"
SWEEP_AXES = ("deviation", "mean_concurrency", "alpha")


class ConfigError(Exception):
    pass


# -- config resolution --------------------------------------------------------

def read_json(path: str | Path, what: str = "config") -> dict:
    """Parse a JSON file; syntax errors report the byte offset."""
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: {what} is not UTF-8 (byte offset {exc.start})") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ConfigError(
            f"{path}: malformed JSON at byte offset {offset} (line {exc.lineno}, column {exc.colno}): {exc.msg}"
        ) from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: {what} must be a JSON object")
    return data


def _unwrap_manifest(data: dict) -> dict:
    # a run manifest carries the resolved config under "config"
    if "config" in data and "config_sha256" in data:
        return data["config"]
    return data


OVERRIDES = {
    "policy": "policy",
    "seed": "seed",
    "deviation": "deviation",
    "mean_concurrency": "mean_concurrency",
    "alpha": "alpha",
    "budget_mb": "memory_budget_mb",
}


def resolve_config(args: argparse.Namespace, base: ScenarioConfig | None = None) -> ScenarioConfig:
    cfg = base or default_scenario()
    if getattr(args, "config", None):
        data = _unwrap_manifest(read_json(args.config))
        try:
            cfg = config_from_dict(data, base=cfg)
        except InvalidScenario as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
    changes = {}
    for flag, name in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            changes[name] = Policy.parse(value) if name == "policy" else value
    try:
        return validate_scenario(cfg.with_(**changes))
    except InvalidScenario as exc:
        raise ConfigError(str(exc)) from None


def output_root(args: argparse.Namespace) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "results")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- single runs --------------------------------------------------------------

def simulate(cfg: ScenarioConfig):
    pair = generate_pair(cfg, cfg.seed)
    runlog = run(cfg, pair)
    return pair, runlog, build_report(runlog, pair, cfg)


def _simulate_report(cfg_dict: dict) -> dict:
    # worker entry point; plain dicts cross the process boundary
    cfg = validate_scenario(config_from_dict(cfg_dict))
    return simulate(cfg)[2].to_dict()


def run_dir_name(cfg: ScenarioConfig) -> str:
    return f"run_{cfg.policy.value}_s{cfg.seed}_{config_sha256(cfg)[:12]}"


def cmd_run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    sha = config_sha256(cfg)
    _, runlog, report = simulate(cfg)
    out = output_root(args) / run_dir_name(cfg)
    stamp = {"seed": cfg.seed, "config_sha256": sha}
    _write(out / "runlog.jsonl", runlog_to_jsonl(runlog, stamp))
    _write(out / "events.jsonl", events_to_jsonl(runlog, stamp))
    _write(out / "summary.csv", runlog_summary_csv(runlog, sha))
    if args.format == "json":
        _write(out / "report.json", report_to_json(report))
    else:
        _write(out / "report.csv", reports_to_tidy_csv([report]))
    _write(out / "manifest.json", _json({
        "command": "run",
        "version": __version__,
        "seed": cfg.seed,
        "config_sha256": sha,
        "config": config_to_dict(cfg),
    }))
    print(
        f"{cfg.policy.value} seed={cfg.seed}: satisfaction {report.satisfaction_rate_pct:.1f}%, "
        f"cold {report.cold_start_pct:.1f}%, failures {report.failure_pct:.1f}%, "
        f"robustness {report.robustness:.3f} -> {out}"
    )
    return EXIT_OK


# -- sweeps ------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple[float, ...]
    policies: tuple[Policy, ...]
    repetitions: int
    base: ScenarioConfig

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep axis must be one of {', '.join(SWEEP_AXES)}, got {self.axis!r}")
        if not self.values:
            raise ConfigError("sweep values must be non-empty")
        if list(self.values) != sorted(self.values):
            raise ConfigError("sweep values must be sorted ascending")
        if not self.policies:
            raise ConfigError("sweep needs at least one policy")
        if isinstance(self.repetitions, bool) or not isinstance(self.repetitions, int) or self.repetitions < 1:
            raise ConfigError(f"repetitions must be a positive integer, got {self.repetitions!r}")

    def configs(self) -> list[ScenarioConfig]:
        """Every run, ordered by policy, axis value, then repetition (seed offset)."""
        out = []
        for policy in self.policies:
            for value in self.values:
                for rep in range(self.repetitions):
                    cfg = self.base.with_(policy=policy, seed=self.base.seed + rep, **{self.axis: value})
                    try:
                        out.append(validate_scenario(cfg))
                    except InvalidScenario as exc:
                        raise ConfigError(f"sweep point {self.axis}={value}: {exc}") from None
        return out

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "values": list(self.values),
            "policies": [p.value for p in self.policies],
            "repetitions": self.repetitions,
            "base": config_to_dict(self.base),
        }


def sweep_from_dict(d: dict, base: ScenarioConfig) -> SweepSpec:
    unknown = set(d) - {"axis", "values", "policies", "repetitions", "base"}
    if unknown:
        raise ConfigError(f"unknown sweep field(s): {', '.join(sorted(unknown))}")
    try:
        if "base" in d:
            base = config_from_dict(_unwrap_manifest(d["base"]), base=base)
        values = tuple(float(v) for v in d.get("values", ()))
        policies = tuple(Policy.parse(p) for p in d.get("policies", [p.value for p in Policy]))
    except (InvalidScenario, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return SweepSpec(
        axis=d.get("axis", ""),
        values=values,
        policies=policies,
        repetitions=d.get("repetitions", 10),
        base=base,
    )


AGG_HEADER = (
    "metric", "policy", "deviation", "alpha", "mean_concurrency",
    "n", "mean", "ci95_low", "ci95_high", "seeds", "config_sha256",
)


def _num(v) -> str:
    return "" if v is None else repr(float(v))


def aggregate_rows(reports: Sequence[SimulationReport], sha: str) -> list[dict]:
    groups = defaultdict(list)
    for r in reports:
        m = r.meta
        groups[(m["policy"], m["deviation"], m["alpha"], m["mean_concurrency"])].append(r)
    rows = []
    for (policy, dev, alpha, conc), rs in groups.items():
        seeds = ";".join(str(r.meta["seed"]) for r in rs)
        for metric in AGGREGATE_METRICS:
            values = [getattr(r, metric) for r in rs]
            mean, lo, hi = _mean_bounds(values)
            rows.append({
                "metric": metric, "policy": policy, "deviation": dev, "alpha": alpha,
                "mean_concurrency": conc, "n": len(values), "mean": mean,
                "ci95_low": lo, "ci95_high": hi, "seeds": seeds, "config_sha256": sha,
            })
    return rows


def _mean_bounds(values: Sequence[float]) -> tuple[float, float | None, float | None]:
    finite = [v for v in values if not math.isnan(v)]
    if not finite:
        return math.nan, None, None
    try:
        ci = mean_ci(finite)
    except InsufficientRepetitions:
        return finite[0], None, None
    return ci.mean, ci.low, ci.high


def _agg_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGG_HEADER)
    for r in rows:
        w.writerow([
            r["metric"], r["policy"], _num(r["deviation"]), _num(r["alpha"]), _num(r["mean_concurrency"]),
            r["n"], _num(r["mean"]), _num(r["ci95_low"]), _num(r["ci95_high"]), r["seeds"], r["config_sha256"],
        ])
    return buf.getvalue()


def run_many(configs: Sequence[ScenarioConfig], jobs: int) -> list[SimulationReport]:
    payloads = [config_to_dict(c) for c in configs]
    if jobs <= 1 or len(payloads) <= 1:
        dicts = [_simulate_report(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            dicts = list(pool.map(_simulate_report, payloads, chunksize=max(1, len(payloads) // (4 * jobs))))
    return [SimulationReport.from_dict(d) for d in dicts]


def cmd_sweep(args: argparse.Namespace) -> int:
    base = resolve_config(args)
    spec = sweep_from_dict(read_json(args.sweep, "sweep spec"), base)
    # explicit flags still win over the sweep file's base
    flagged = {name: getattr(args, flag) for flag, name in OVERRIDES.items() if getattr(args, flag, None) is not None}
    if flagged:
        spec = SweepSpec(spec.axis, spec.values, spec.policies, spec.repetitions, spec.base.with_(**flagged))
    configs = spec.configs()
    sha = config_sha256(spec.base)
    reports = run_many(configs, args.jobs or os.cpu_count() or 1)

    out = output_root(args)
    runs = []
    for cfg, rep in zip(configs, reports):
        name = f"reports/{cfg.policy.value}_{spec.axis}{getattr(cfg, spec.axis)!r}_s{cfg.seed}.json"
        _write(out / name, report_to_json(rep))
        runs.append({"policy": cfg.policy.value, spec.axis: getattr(cfg, spec.axis), "seed": cfg.seed,
                     "config_sha256": rep.meta["config_sha256"], "report": name})
    _write(out / "runs.csv", reports_to_tidy_csv(reports))
    rows = aggregate_rows(reports, sha)
    if args.format == "json":
        _write(out / "aggregate.json", _json(rows))
    else:
        _write(out / "aggregate.csv", _agg_csv(rows))
    _write(out / "manifest.json", _json({
        "command": "sweep",
        "version": __version__,
        "sweep": spec.to_dict(),
        "config_sha256": sha,
        "runs": runs,
    }))
    print(f"{len(reports)} runs ({spec.axis} x {len(spec.policies)} policies x {spec.repetitions} reps) -> {out}")
    return EXIT_OK


# -- report -----------------------------------------------------------------

def load_reports(results: Path) -> list[SimulationReport]:
    if not results.is_dir():
        raise OSError(f"{results}: not a directory")
    reports = []
    for path in sorted(results.rglob("*.json")):
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise OSError(f"{path}: corrupt report ({exc})") from None
        if not isinstance(data, dict) or "per_app" not in data:
            continue
        policy = data.get("meta", {}).get("policy")
        if not policy:
            log.warning("skipping %s: no policy recorded", path)
            continue
        try:
            reports.append(SimulationReport.from_dict(data))
        except (TypeError, KeyError) as exc:
            raise OSError(f"{path}: corrupt report ({exc})") from None
    if not reports:
        raise OSError(f"{results}: no reports found")
    return reports


GROUP_COLS = ("policy", "deviation", "alpha", "mean_concurrency")


def _group(reports):
    groups = defaultdict(list)
    for r in reports:
        groups[tuple(r.meta.get(k) for k in GROUP_COLS)].append(r)
    return sorted(groups.items(), key=lambda kv: tuple(str(x) if isinstance(x, str) else x for x in kv[0]))


def _curve_csv(reports, metrics: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = list(GROUP_COLS) + ["n"]
    for m in metrics:
        header += [m, f"{m}_ci95_low", f"{m}_ci95_high"]
    w.writerow(header)
    for key, rs in _group(reports):
        row = [key[0], *(_num(k) for k in key[1:]), len(rs)]
        for m in metrics:
            mean, lo, hi = _mean_bounds([getattr(r, m) for r in rs])
            row += [_num(mean), _num(lo), _num(hi)]
        w.writerow(row)
    return buf.getvalue()


def _pareto_csv(reports) -> str:
    points, keys = [], []
    for key, rs in _group(reports):
        if key[0] == Policy.NONE.value:
            continue
        cold = _mean_bounds([r.cold_start_pct for r in rs])[0]
        err = 100.0 - _mean_bounds([r.mean_accuracy_pct for r in rs])[0]
        points.append((cold, err))
        keys.append((key, len(rs)))
    mask = pareto_mask(points) if points else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(GROUP_COLS) + ["n", "cold_start_pct", "model_error", "on_front"])
    for (key, n), (cold, err), on in zip(keys, points, mask):
        w.writerow([key[0], *(_num(k) for k in key[1:]), n, _num(cold), _num(err), int(on)])
    return buf.getvalue()


def _per_app_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(GROUP_COLS) + ["app_id", "n", "cold_start_pct", "mean_accuracy_pct", "cold_start_cv", "accuracy_cv"])
    for key, rs in _group(reports):
        apps = sorted({a for r in rs for a in r.per_app})
        cold = {a: _mean_bounds([r.per_app[a].cold_start_pct for r in rs if a in r.per_app])[0] for a in apps}
        acc = {a: _mean_bounds([r.per_app[a].mean_accuracy_pct for r in rs if a in r.per_app])[0] for a in apps}
        cold_cv = coefficient_of_variation(list(cold.values())) if len(apps) >= 2 else math.nan
        finite = [v for v in acc.values() if not math.isnan(v)]
        acc_cv = coefficient_of_variation(finite) if len(finite) >= 2 else math.nan
        for a in apps:
            w.writerow([key[0], *(_num(k) for k in key[1:]), a, len(rs), _num(cold[a]), _num(acc[a]),
                        _num(cold_cv), _num(acc_cv)])
    return buf.getvalue()


REPORT_FILES = {
    "fig2_satisfaction.csv": lambda rs: _curve_csv(rs, ["satisfaction_rate_pct"]),
    "fig3_cold_start.csv": lambda rs: _curve_csv(rs, ["cold_start_pct", "failure_pct"]),
    "fig4_accuracy.csv": lambda rs: _curve_csv(rs, ["normalized_accuracy", "mean_accuracy_pct"]),
    "fig5_pareto.csv": _pareto_csv,
    "fig6_robustness.csv": lambda rs: _curve_csv(rs, ["robustness"]),
    "fig7_8_per_app.csv": _per_app_csv,
}


def cmd_report(args: argparse.Namespace) -> int:
    results = Path(args.results)
    reports = load_reports(results)
    out = Path(args.out) if args.out else results / "tables"
    for name, build in REPORT_FILES.items():
        _write(out / name, build(reports))
    print(f"{len(reports)} reports -> {len(REPORT_FILES)} tables in {out}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------

def _scenario_flags(p: argparse.ArgumentParser, with_policy: bool) -> None:
    p.add_argument("--config", help="scenario JSON (fields merged over the bundled defaults)")
    if with_policy:
        p.add_argument("--policy", choices=[x.value for x in Policy])
    p.add_argument("--seed", type=int)
    p.add_argument("--deviation", type=float)
    p.add_argument("--mean-concurrency", dest="mean_concurrency", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--budget-mb", dest="budget_mb", type=float)
    p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./results)")
    p.add_argument("--format", choices=("csv", "json"), default="json")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modelswap", description="Multi-tenant edge model-swapping simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one seeded scenario")
    _scenario_flags(p, with_policy=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a parameter sweep described by a JSON spec")
    p.add_argument("sweep", help="sweep spec JSON: axis, values, policies, repetitions, base")
    _scenario_flags(p, with_policy=False)
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    p.set_defaults(func=cmd_sweep, format="csv")

    p = sub.add_parser("report", help="turn a results directory into figure tables")
    p.add_argument("results")
    p.add_argument("--out", help="table directory (default RESULTS/tables)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
