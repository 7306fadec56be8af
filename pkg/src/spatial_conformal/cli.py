"""Command-line interface.

Subcommands: simulate, predict, contour, benchmark, sensitivity, tune.
Exit codes: 0 success, 1 runtime failure, 2 usage error. Log verbosity is
read from ``SPATIAL_CONFORMAL_LOG`` (a logging level name, default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import secrets
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .conformal import (
    BreakpointError,
    conformal_threshold,
    gscp_contour,
    lscp_contour,
    slscp_contour,
)
from .covariance import DegenerateCovarianceError, MaternParams
from .evaluate import (
    METHODS,
    MethodConfig,
    SENSITIVITY_ROWS,
    bandwidth_scores,
    json_safe,
    run_replicates,
    select_bandwidth,
    sensitivity_sweep,
    write_reports_csv,
    write_reports_json,
)
from .ingest import IngestError, center, load_csv, write_csv
from .kriging import SpatialDataset, kriging_interval, predict_at
from .simulate import SCENARIO_IDS, ScenarioSpec, generate_scenario
from .variogram import DEFAULT_KAPPA_GRID, estimate_params

log = logging.getLogger("spatial_conformal")

LOG_ENV = "SPATIAL_CONFORMAL_LOG"
COMMANDS = ("simulate", "predict", "contour", "benchmark", "sensitivity", "tune")
PREDICT_COLUMNS = ("s_x", "s_y", "lower_hull", "upper_hull", "n_components", "plausibility_at_median", "method", "alpha", "status")


class UsageError(Exception):
    """Invalid configuration; maps to exit code 2."""


@dataclass
class RunConfig:
    command: str
    data: Optional[str] = None
    output: Optional[str] = None
    targets: Optional[str] = None
    targets_file: Optional[str] = None
    scenario: list = field(default_factory=lambda: [1])
    n: int = 20
    seed: Optional[int] = None
    replicates: int = 1
    method: list = field(default_factory=lambda: ["gscp"])
    alpha: float = 0.1
    eta: Optional[float] = None
    etas: list = field(default_factory=list)
    m: Optional[int] = None
    M: Optional[int] = None
    kappa_grid: list = field(default_factory=lambda: list(DEFAULT_KAPPA_GRID))
    nugget: Optional[float] = None
    partial_sill: Optional[float] = None
    range: Optional[float] = None
    smoothness: Optional[float] = None
    n_validation: Optional[int] = None
    center: bool = True
    rescale: bool = False
    json_output: Optional[str] = None
    columns_output: Optional[str] = None
    jobs: Optional[int] = None

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        unknown = sorted(set(mapping) - set(cls.field_names()))
        if unknown:
            raise UsageError(f"unknown configuration keys: {', '.join(unknown)}")
        try:
            cfg = cls(**mapping)
        except TypeError as exc:
            raise UsageError(str(exc)) from None
        cfg.validate()
        return cfg

    @property
    def params(self) -> Optional[MaternParams]:
        vals = (self.nugget, self.partial_sill, self.range, self.smoothness)
        if all(v is None for v in vals):
            return None
        return MaternParams(*vals)

    def method_configs(self) -> list[MethodConfig]:
        return [MethodConfig(m, eta=self.eta, m=self.m, M=self.M) for m in self.method]

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise UsageError(msg)

        need(self.command in COMMANDS, f"unknown command {self.command!r}")
        need(0 < self.alpha < 1, "alpha must lie in (0, 1)")
        need(all(s in SCENARIO_IDS for s in self.scenario), f"scenario ids must be in {SCENARIO_IDS}")
        need(isinstance(self.n, int) and self.n >= 2, "n (grid side) must be an integer >= 2")
        need(self.replicates >= 1, "replicates must be >= 1")
        need(self.jobs is None or self.jobs >= 1, "jobs must be >= 1")
        need(self.seed is None or self.seed >= 0, "seed must be non-negative")
        need(all(m in METHODS for m in self.method), f"methods must be among {METHODS}")
        need(self.eta is None or self.eta > 0, "eta must be positive")
        need(all(e > 0 for e in self.etas), "etas must be positive")
        need(self.m is None or self.m >= 1, "m must be >= 1")
        need(self.M is None or self.M >= 1, "M must be >= 1")
        need(len(self.kappa_grid) > 0 and all(k > 0 for k in self.kappa_grid), "kappa grid must be nonempty and positive")
        vals = (self.nugget, self.partial_sill, self.range, self.smoothness)
        need(all(v is None for v in vals) or all(v is not None for v in vals),
             "give all four of --nugget, --partial-sill, --range, --smoothness or none")
        try:
            self.params
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        need(self.n_validation is None or self.n_validation >= 1, "n_validation must be >= 1")
        if "slscp" in self.method and self.command in ("predict", "contour", "benchmark"):
            need(self.eta is not None, "method slscp needs --eta")
        if "lscp" in self.method and self.command in ("predict", "contour", "benchmark"):
            need(self.m is not None, "method lscp needs --m")
        if self.command in ("predict", "contour", "tune"):
            need(self.data is not None, f"{self.command} needs --data")
        if self.command in ("contour",):
            need(len(self.method) == 1 and self.method[0] != "kriging", "contour needs one conformal method")
        if self.command == "predict":
            need((self.targets is None) != (self.targets_file is None), "predict needs exactly one of --targets, --targets-file")
            need(len(self.method) == 1, "predict takes one method")
        if self.command == "contour":
            need(self.targets is not None, "contour needs --targets with a single point")
        if self.command in ("benchmark", "sensitivity", "tune"):
            need(self.seed is not None, f"{self.command} needs an explicit --seed")
        if self.command == "tune":
            need(len(self.etas) > 0, "tune needs --etas")
        if self.command in ("simulate", "benchmark", "sensitivity", "tune", "predict", "contour"):
            need(self.output is not None, f"{self.command} needs --output")


# --------------------------------------------------------------------------
# Argument parsing

def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _words(text: str) -> list[str]:
    return [t.strip().lower() for t in text.split(",") if t.strip()]


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


# (field, type, help); commands that accept it
_OPTIONS = {
    "data": (str, "input CSV with columns s_x, s_y, y"),
    "output": (str, "output path"),
    "targets": (str, "inline targets 'x,y;x,y'"),
    "targets_file": (str, "CSV of targets with columns s_x, s_y"),
    "scenario": (_ints, "scenario id(s), comma-separated, 1..8"),
    "n": (int, "grid side N (N x N locations)"),
    "seed": (int, "random seed (first seed for replicate runs)"),
    "replicates": (int, "number of replicate datasets"),
    "method": (_words, "method(s): gscp, lscp, slscp, kriging"),
    "alpha": (float, "miscoverage level"),
    "eta": (float, "sLSCP kernel bandwidth"),
    "etas": (_floats, "candidate bandwidths, comma-separated"),
    "m": (int, "LSCP neighbor count"),
    "M": (int, "sLSCP neighbor cap (default: bandwidth rule)"),
    "kappa_grid": (_floats, "smoothness grid for the variogram fit"),
    "nugget": (float, "fixed nugget (skip estimation)"),
    "partial_sill": (float, "fixed partial sill"),
    "range": (float, "fixed range"),
    "smoothness": (float, "fixed smoothness"),
    "n_validation": (int, "validation locations for bandwidth tuning"),
    "center": ("bool", "subtract the response mean before fitting (default on)"),
    "rescale": (None, "map coordinates affinely into the unit square"),
    "json_output": (str, "also write the full report as JSON"),
    "columns_output": (str, "per-s_x column breakdown CSV (plot data)"),
    "jobs": (int, "worker processes (default: all cores)"),
}

_PARAM_FIELDS = ("nugget", "partial_sill", "range", "smoothness", "kappa_grid")
_COMMAND_FIELDS = {
    "simulate": ("scenario", "n", "seed", "output"),
    "predict": ("data", "targets", "targets_file", "method", "alpha", "eta", "m", "M", *_PARAM_FIELDS, "center", "rescale", "output"),
    "contour": ("data", "targets", "method", "alpha", "eta", "m", "M", *_PARAM_FIELDS, "center", "rescale", "output"),
    "benchmark": ("scenario", "n", "seed", "replicates", "method", "alpha", "eta", "m", "M", *_PARAM_FIELDS, "jobs", "output", "json_output", "columns_output"),
    "sensitivity": ("n", "seed", "replicates", "alpha", "jobs", "output", "json_output"),
    "tune": ("data", "etas", "alpha", "n_validation", "seed", *_PARAM_FIELDS, "center", "rescale", "output"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatial-conformal", description=__doc__.splitlines()[0], allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, names in _COMMAND_FIELDS.items():
        p = sub.add_parser(cmd, allow_abbrev=False, help=f"{cmd} subcommand")
        p.add_argument("--config", help="JSON file of RunConfig fields; flags override it")
        for name in names:
            typ, text = _OPTIONS[name]
            if typ is None:
                p.add_argument(_flag(name), dest=name, action="store_const", const=True, default=None, help=text)
            elif typ == "bool":
                p.add_argument(_flag(name), dest=name, action=argparse.BooleanOptionalAction, default=None, help=text)
            else:
                p.add_argument(_flag(name), dest=name, type=typ, default=None, help=text)
    return parser


def config_from_args(argv) -> RunConfig:
    parser = build_parser()
    ns = vars(parser.parse_args(argv))
    mapping = {}
    if ns.get("config"):
        try:
            mapping = json.loads(Path(ns["config"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {ns['config']}: {exc}") from None
        if not isinstance(mapping, dict):
            raise UsageError("config file must hold a JSON object")
    for key, value in ns.items():
        if key in ("config", "command") or value is None:
            continue
        mapping[key] = value
    mapping["command"] = ns["command"]
    for key in ("scenario", "method"):
        if key in mapping and not isinstance(mapping[key], list):
            mapping[key] = [mapping[key]]
    return RunConfig.from_mapping(mapping)


# --------------------------------------------------------------------------
# Commands

def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(json_safe(payload), indent=2, sort_keys=True, allow_nan=False) + "\n")


def cmd_simulate(cfg: RunConfig) -> int:
    seed = cfg.seed
    if seed is None:
        seed = secrets.randbits(32)
        log.warning("no --seed given; using entropy seed %d", seed)
    if len(cfg.scenario) != 1:
        raise UsageError("simulate takes a single scenario")
    spec = ScenarioSpec(cfg.scenario[0], cfg.n, seed)
    data = generate_scenario(spec)
    out = Path(cfg.output)
    write_csv(data, out)
    _write_json(out.with_suffix(".json"), {"scenario": spec.to_dict(), "n_rows": len(data)})
    log.info("wrote %d rows to %s", len(data), out)
    return 0


def _load(cfg: RunConfig):
    if not Path(cfg.data).is_file():
        raise UsageError(f"data file not found: {cfg.data}")
    data, report = load_csv(cfg.data, rescale=cfg.rescale)
    if report.rows_rejected:
        log.warning("%d input rows rejected", report.rows_rejected)
    offset = 0.0
    if cfg.center:
        data, offset = center(data)
    return data, report, offset


def _parse_targets(cfg: RunConfig, report) -> np.ndarray:
    if cfg.targets is not None:
        try:
            pts = [[float(v) for v in chunk.split(",")] for chunk in cfg.targets.split(";") if chunk.strip()]
        except ValueError:
            raise UsageError(f"bad --targets {cfg.targets!r}") from None
    else:
        if not Path(cfg.targets_file).is_file():
            raise UsageError(f"targets file not found: {cfg.targets_file}")
        with open(cfg.targets_file, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"s_x", "s_y"} <= set(reader.fieldnames):
                raise UsageError("targets file needs columns s_x, s_y")
            try:
                pts = [[float(r["s_x"]), float(r["s_y"])] for r in reader]
            except ValueError:
                raise UsageError("targets file has non-numeric coordinates") from None
    if not pts or any(len(p) != 2 for p in pts):
        raise UsageError("targets must be pairs x,y")
    arr = np.asarray(pts, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise UsageError("targets must be finite")
    return arr


def _fit(cfg: RunConfig, data: SpatialDataset) -> MaternParams:
    if cfg.params is not None:
        return cfg.params
    fit = estimate_params(data, kappa_grid=cfg.kappa_grid)
    log.info("estimated parameters %s", fit.params.as_dict())
    return fit.params


def _contour(config: MethodConfig, data, target, params):
    """Contour and the number of observations it conditions on."""
    if config.method == "gscp":
        return gscp_contour(data, target, params), len(data)
    if config.method == "lscp":
        return lscp_contour(data, target, params, config.m), config.m
    return slscp_contour(data, target, params, config.eta, config.M)


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return repr(x) if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    return str(x)


def cmd_predict(cfg: RunConfig) -> int:
    data, report, offset = _load(cfg)
    raw_targets = _parse_targets(cfg, report)
    targets = report.rescale.to_unit(raw_targets) if report.rescale is not None else raw_targets
    params = _fit(cfg, data)
    config = cfg.method_configs()[0]
    failures = 0
    rows = []
    for raw, t in zip(raw_targets, targets):
        row = {"s_x": float(raw[0]), "s_y": float(raw[1]), "method": config.name, "alpha": cfg.alpha, "status": "ok"}
        try:
            if config.method == "kriging":
                lo, hi = kriging_interval(predict_at(data, t, params), cfg.alpha)
                row.update(lower_hull=lo, upper_hull=hi, n_components=1, plausibility_at_median=math.nan)
            else:
                contour, n_used = _contour(config, data, t, params)
                ps = contour.prediction_set(cfg.alpha, conformal_threshold(n_used, cfg.alpha))
                lo, hi = ps.hull
                mid = 0.5 * (lo + hi) if not ps.unbounded else math.nan
                row.update(
                    lower_hull=lo,
                    upper_hull=hi,
                    n_components=len(ps.components),
                    plausibility_at_median=contour(mid) if math.isfinite(mid) else math.nan,
                )
        except (BreakpointError, DegenerateCovarianceError, ValueError) as exc:
            failures += 1
            log.warning("target (%g, %g) failed: %s", raw[0], raw[1], exc)
            row.update(lower_hull=math.nan, upper_hull=math.nan, n_components=0, plausibility_at_median=math.nan, status="error")
        else:
            row["lower_hull"] += offset
            row["upper_hull"] += offset
        rows.append(row)
    with open(cfg.output, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in PREDICT_COLUMNS])
    if failures:
        log.warning("%d of %d targets failed", failures, len(rows))
    return 0


def cmd_contour(cfg: RunConfig) -> int:
    data, report, offset = _load(cfg)
    targets = _parse_targets(cfg, report)
    if targets.shape[0] != 1:
        raise UsageError("contour takes exactly one target")
    t = report.rescale.to_unit(targets)[0] if report.rescale is not None else targets[0]
    params = _fit(cfg, data)
    contour, n_used = _contour(cfg.method_configs()[0], data, t, params)
    bps = contour.breakpoints + offset
    with open(cfg.output, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lower", "upper", "level", "kind"])
        edges = np.concatenate(([-math.inf], bps, [math.inf]))
        for j, level in enumerate(contour.segment_levels):
            writer.writerow([_fmt(float(edges[j])), _fmt(float(edges[j + 1])), _fmt(float(level)), "segment"])
            if j < bps.size:
                writer.writerow([_fmt(float(bps[j])), _fmt(float(bps[j])), _fmt(float(contour.point_levels[j])), "point"])
    log.info("threshold t_%d(%g) = %g", n_used, cfg.alpha, conformal_threshold(n_used, cfg.alpha))
    return 0


def _seeds(cfg: RunConfig) -> list[int]:
    return list(range(cfg.seed, cfg.seed + cfg.replicates))


def cmd_benchmark(cfg: RunConfig) -> int:
    reports = []
    for scenario in cfg.scenario:
        res = run_replicates(
            scenario, cfg.n, cfg.method_configs(), _seeds(cfg), cfg.alpha,
            params=cfg.params, kappa_grid=cfg.kappa_grid, jobs=cfg.jobs,
        )
        reports.extend(res.values())
    write_reports_csv(reports, cfg.output)
    if cfg.json_output:
        write_reports_json(reports, cfg.json_output)
    if cfg.columns_output:
        with open(cfg.columns_output, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scenario", "N", "method", "s_x", "coverage", "width", "score", "n", "n_bounded"])
            for r in reports:
                for sx, c in r.by_column.items():
                    writer.writerow([r.scenario, r.grid_side, r.method, _fmt(sx), _fmt(c["coverage"]),
                                     _fmt(c["width"]), _fmt(c["score"]), c["n"], c["n_bounded"]])
    return 0


def cmd_sensitivity(cfg: RunConfig) -> int:
    table = sensitivity_sweep(_seeds(cfg), cfg.n, cfg.alpha, SENSITIVITY_ROWS, jobs=cfg.jobs)
    rows = [r.to_row() for r in table]
    with open(cfg.output, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    if cfg.json_output:
        _write_json(cfg.json_output, [{"params": r.params.as_dict(), "gscp": r.gscp.to_dict(), "kriging": r.kriging.to_dict()} for r in table])
    return 0


def cmd_tune(cfg: RunConfig) -> int:
    data, _, _ = _load(cfg)
    params = _fit(cfg, data)
    scores = bandwidth_scores(data, sorted(set(cfg.etas)), cfg.alpha, cfg.n_validation, cfg.seed, params)
    best = select_bandwidth(data, cfg.etas, cfg.alpha, cfg.n_validation, cfg.seed, params) if len(scores) > 1 else cfg.etas[0]
    _write_json(cfg.output, {"eta": best, "scores": {repr(k): v for k, v in scores.items()}, "alpha": cfg.alpha})
    return 0


_DISPATCH = {
    "simulate": cmd_simulate,
    "predict": cmd_predict,
    "contour": cmd_contour,
    "benchmark": cmd_benchmark,
    "sensitivity": cmd_sensitivity,
    "tune": cmd_tune,
}


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    try:
        cfg = config_from_args(argv)
        return _DISPATCH[cfg.command](cfg)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except IngestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level failure boundary
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
