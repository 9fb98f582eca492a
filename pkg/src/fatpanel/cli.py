"""Command-line front end for estimation, placebo analysis, and simulation.

Subcommands
-----------
estimate  : forecasted-effect estimates per (q, horizon) from a panel CSV
placebo   : pre-treatment placebo estimates over a lag grid
dfat      : treated-minus-control differenced estimates
simulate  : Monte Carlo study from a named preset or an inline process spec
validate  : per-unit data diagnostics without estimating anything

Configuration is taken from flags, or from a JSON file named with
``--config``; values in the file win over flags so that a single artifact
reproduces a run.  All JSON outputs carry ``"schema": 1`` and are
byte-identical across reruns with the same configuration and inputs.

Exit codes: 0 success, 1 usage or configuration problem, 2 input data or
I/O problem, 3 estimation failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

from .basis import ForecastConfig
from .errors import (ConfigError, EstimationError, FatpanelError,
                     PanelFormatError, RankDeficiencyError)
from .estimators import (FatEstimate, MbConfig, covariate_fat_heterogeneous,
                         dfat, fat, model_based_fat, placebo_fat)
from .panel import PanelData, load_panel, validate
from .simulate import DgpSpec, GridCell, preset, run_monte_carlo

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_ESTIMATION = 3

_ESTIMATORS = ("pr", "mb", "covariate_het")


# --------------------------------------------------------------------------
# Run configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Everything one batch invocation needs, flags and file merged.

    ``r`` is the estimation window length (integer or ``"all"``), ``q`` the
    polynomial orders to run, ``horizons`` the forecast horizons, ``lags``
    the placebo lag grid, and ``delta`` the anticipation offset.  ``schema``
    optionally remaps input CSV column names and can only be given through
    a config file.  ``dgp`` and ``cells`` define an inline simulation study
    when no preset is named.
    """

    command: str
    input: Union[str, None] = None
    schema: Union[Mapping[str, object], None] = None
    q: tuple = (1,)
    r: Union[int, str] = "all"
    horizons: tuple = (1,)
    lags: tuple = (0, 1, 2, 3)
    delta: int = 0
    level: float = 0.95
    estimator: str = "pr"
    instrument_lag: int = 3
    detrend: Union[bool, None] = None
    mb_covariates: tuple = ()
    preset: Union[str, None] = None
    dgp: Union[Mapping[str, object], None] = None
    cells: Union[tuple, None] = None
    reps: int = 200
    seed: int = 0
    out_json: Union[str, None] = None
    out_csv: Union[str, None] = None

    def __post_init__(self):
        if not self.q:
            raise ConfigError("q list must be nonempty")
        if not self.horizons:
            raise ConfigError("horizons list must be nonempty")
        if any(h < 1 for h in self.horizons):
            raise ConfigError("horizons must be >= 1")
        if self.estimator not in _ESTIMATORS:
            raise ConfigError(
                f"estimator must be one of {_ESTIMATORS}, got {self.estimator!r}")
        if isinstance(self.r, str) and self.r != "all":
            raise ConfigError(f"r must be an integer or 'all', got {self.r!r}")

    def forecast_config(self, q: int) -> ForecastConfig:
        return ForecastConfig(q=q, R=self.r, delta=self.delta)

    def mb_config(self, q: int) -> MbConfig:
        return MbConfig(q=q, R=self.r, delta=self.delta,
                        covariates=tuple(self.mb_covariates),
                        instrument_lag=self.instrument_lag,
                        detrend=self.detrend)


def _as_tuple(value, *, what: str, cast=int) -> tuple:
    if isinstance(value, (list, tuple)):
        items = value
    else:
        items = [value]
    try:
        return tuple(cast(v) for v in items)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what} must be a list of {cast.__name__}s") from exc


def _parse_r(value) -> Union[int, str]:
    if isinstance(value, str):
        if value == "all":
            return "all"
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigError(
                f"r must be an integer or 'all', got {value!r}") from exc
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"r must be an integer or 'all', got {value!r}")
    return value


_CONFIG_KEYS = {
    "command", "input", "schema", "q", "r", "horizons", "lags", "delta",
    "level", "estimator", "instrument_lag", "detrend", "mb_covariates",
    "preset", "dgp", "cells", "reps", "seed", "out_json", "out_csv",
}

# Aliases so the file can use the same spelling as the flag.
_CONFIG_ALIASES = {"R": "r", "h": "horizons", "n_reps": "reps"}


def _load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a JSON object")
    merged = {}
    for key, value in raw.items():
        key = _CONFIG_ALIASES.get(key, key)
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = value
    return merged


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge parsed flags with an optional JSON config file (file wins)."""
    values = {
        "command": args.command,
        "input": args.input,
        "q": tuple(args.q) if args.q is not None else (1,),
        "r": _parse_r(args.r),
        "horizons": tuple(args.h) if args.h is not None else (1,),
        "lags": tuple(args.lags) if args.lags is not None else (0, 1, 2, 3),
        "delta": args.delta,
        "level": args.level,
        "estimator": args.estimator,
        "instrument_lag": args.instrument_lag,
        "preset": args.preset,
        "reps": args.reps,
        "seed": args.seed,
        "out_json": args.out_json,
        "out_csv": args.out_csv,
    }
    if args.config is not None:
        overrides = _load_config_file(args.config)
        file_command = overrides.pop("command", None)
        if file_command is not None and file_command != args.command:
            raise ConfigError(
                f"config file says command={file_command!r} but "
                f"{args.command!r} was invoked")
        values.update(overrides)
    values["q"] = _as_tuple(values["q"], what="q")
    values["horizons"] = _as_tuple(values["horizons"], what="horizons")
    values["lags"] = _as_tuple(values["lags"], what="lags")
    values["mb_covariates"] = _as_tuple(
        values.get("mb_covariates", ()), what="mb_covariates", cast=str)
    values["r"] = _parse_r(values["r"])
    if values.get("cells") is not None:
        values["cells"] = tuple(values["cells"])
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# --------------------------------------------------------------------------
# Shared helpers
# --------------------------------------------------------------------------

def _read_panel(cfg: RunConfig) -> PanelData:
    if cfg.input is None:
        raise ConfigError(f"command {cfg.command!r} requires --input")
    return load_panel(cfg.input, schema=cfg.schema)


def _json_text(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _csv_line(fields: Sequence[object]) -> str:
    out = []
    for f in fields:
        if isinstance(f, float):
            out.append(repr(f))
        else:
            out.append(str(f))
    return ",".join(out)


def _residual_csv(rows: Sequence[tuple], header: Sequence[str]) -> str:
    lines = [",".join(header)]
    lines.extend(_csv_line(row) for row in rows)
    return "\n".join(lines) + "\n"


def _emit(cfg: RunConfig, payload: dict, csv_text: Union[str, None]) -> None:
    text = _json_text(payload)
    if cfg.out_json is not None:
        with open(cfg.out_json, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if cfg.out_csv is not None and csv_text is not None:
        with open(cfg.out_csv, "w", encoding="utf-8", newline="") as fh:
            fh.write(csv_text)


def _estimate_one(panel: PanelData, cfg: RunConfig, q: int, h: int) -> FatEstimate:
    if cfg.estimator == "pr":
        return fat(panel, cfg.forecast_config(q), h, level=cfg.level)
    if cfg.estimator == "mb":
        return model_based_fat(panel, cfg.mb_config(q), h, level=cfg.level)
    return covariate_fat_heterogeneous(
        panel, cfg.forecast_config(q), h, level=cfg.level)


def _base_payload(cfg: RunConfig, kind: str) -> dict:
    return {
        "schema": 1,
        "kind": kind,
        "command": cfg.command,
        "input": cfg.input,
        "estimator": cfg.estimator,
        "R": cfg.r,
        "delta": cfg.delta,
        "level": cfg.level,
    }


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_estimate(cfg: RunConfig) -> int:
    panel = _read_panel(cfg)
    results = []
    residual_rows = []
    for q in cfg.q:
        for h in cfg.horizons:
            est = _estimate_one(panel, cfg, q, h)
            entry = {"q": q, "R": cfg.r}
            entry.update(est.to_dict())
            results.append(entry)
            for unit_id, resid in zip(est.unit_ids, est.residuals):
                residual_rows.append((q, cfg.r, h, unit_id, float(resid)))
    payload = _base_payload(cfg, "estimates")
    payload["results"] = results
    csv_text = _residual_csv(residual_rows,
                             ("q", "R", "horizon", "unit", "residual"))
    _emit(cfg, payload, csv_text)
    return EXIT_OK


def cmd_placebo(cfg: RunConfig) -> int:
    panel = _read_panel(cfg)
    h = cfg.horizons[0]
    results = []
    residual_rows = []
    n_ok = 0
    for q in cfg.q:
        config = cfg.forecast_config(q)
        for lag in cfg.lags:
            try:
                est = placebo_fat(panel, config, lag, h, level=cfg.level)
            except FatpanelError as exc:
                results.append({"q": q, "R": cfg.r, "lag": lag,
                                "error": str(exc)})
                continue
            n_ok += 1
            entry = {"q": q, "R": cfg.r, "lag": lag}
            entry.update(est.to_dict())
            results.append(entry)
            for unit_id, resid in zip(est.unit_ids, est.residuals):
                residual_rows.append((q, cfg.r, lag, h, unit_id, float(resid)))
    payload = _base_payload(cfg, "placebo")
    payload["estimator"] = "pr"
    payload["results"] = results
    csv_text = _residual_csv(residual_rows,
                             ("q", "R", "lag", "horizon", "unit", "residual"))
    _emit(cfg, payload, csv_text)
    if n_ok == 0:
        raise EstimationError("every placebo lag failed")
    return EXIT_OK


def cmd_dfat(cfg: RunConfig) -> int:
    panel = _read_panel(cfg)
    results = []
    residual_rows = []
    for q in cfg.q:
        config = cfg.forecast_config(q)
        for h in cfg.horizons:
            est = dfat(panel, config, h, level=cfg.level)
            entry = {"q": q, "R": cfg.r}
            entry.update(est.to_dict())
            results.append(entry)
            for group, part in (("treated", est.treated),
                                ("control", est.control)):
                for unit_id, resid in zip(part.unit_ids, part.residuals):
                    residual_rows.append(
                        (q, cfg.r, h, group, unit_id, float(resid)))
    payload = _base_payload(cfg, "dfat")
    payload["estimator"] = "pr"
    payload["results"] = results
    csv_text = _residual_csv(
        residual_rows, ("q", "R", "horizon", "group", "unit", "residual"))
    _emit(cfg, payload, csv_text)
    return EXIT_OK


def _cells_from_config(cfg: RunConfig) -> tuple:
    cells = []
    for entry in cfg.cells:
        if not isinstance(entry, Mapping):
            raise ConfigError("each cell must be a JSON object")
        try:
            cells.append(GridCell(**entry))
        except TypeError as exc:
            raise ConfigError(f"bad cell {entry!r}: {exc}") from exc
    return tuple(cells)


def cmd_simulate(cfg: RunConfig) -> int:
    if cfg.preset is not None:
        spec, cells = preset(cfg.preset)
        if cfg.dgp is not None:
            try:
                spec = dataclasses.replace(spec, **dict(cfg.dgp))
            except TypeError as exc:
                raise ConfigError(f"bad dgp override: {exc}") from exc
        if cfg.cells is not None:
            cells = _cells_from_config(cfg)
        preset_name = cfg.preset
    else:
        if cfg.dgp is None or cfg.cells is None:
            raise ConfigError(
                "simulate needs --preset, or 'dgp' and 'cells' in the config file")
        try:
            spec = DgpSpec(**dict(cfg.dgp))
        except TypeError as exc:
            raise ConfigError(f"bad dgp spec: {exc}") from exc
        cells = _cells_from_config(cfg)
        preset_name = None
    report = run_monte_carlo(spec, cells, cfg.reps, cfg.seed,
                             preset=preset_name)
    _emit(cfg, report.to_dict(), report.to_csv_text())
    return EXIT_OK


def cmd_validate(cfg: RunConfig) -> int:
    panel = _read_panel(cfg)
    report = validate(panel, cfg.forecast_config(cfg.q[0]))
    payload = {
        "schema": 1,
        "kind": "validation",
        "command": cfg.command,
        "input": cfg.input,
        "R": cfg.r,
        "q": cfg.q[0],
        "delta": cfg.delta,
    }
    payload.update(report.to_dict())
    rows = [(d.unit_id, d.fatal, d.pre_treatment_run,
             ";".join(d.messages)) for d in report.units]
    csv_text = _residual_csv(rows, ("unit", "fatal", "pre_treatment_run",
                                    "messages"))
    _emit(cfg, payload, csv_text)
    return EXIT_OK


_COMMANDS = {
    "estimate": cmd_estimate,
    "placebo": cmd_placebo,
    "dfat": cmd_dfat,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
}


# --------------------------------------------------------------------------
# Argument parsing and entry point
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with code 1, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE",
                   help="JSON config file; its values win over flags")
    p.add_argument("--input", metavar="FILE", help="panel CSV file")
    p.add_argument("--q", nargs="+", type=int, metavar="Q",
                   help="polynomial order(s), default 1")
    p.add_argument("--r", default="all", metavar="R",
                   help="window length (integer or 'all', default all)")
    p.add_argument("--h", nargs="+", type=int, metavar="H",
                   help="forecast horizon(s), default 1")
    p.add_argument("--lags", nargs="+", type=int, metavar="LAG",
                   help="placebo lag grid, default 0 1 2 3")
    p.add_argument("--delta", type=int, default=0, metavar="D",
                   help="anticipation offset in periods, default 0")
    p.add_argument("--level", type=float, default=0.95, metavar="P",
                   help="confidence level, default 0.95")
    p.add_argument("--estimator", choices=_ESTIMATORS, default="pr",
                   help="point estimator, default pr")
    p.add_argument("--instrument-lag", type=int, choices=(2, 3), default=3,
                   dest="instrument_lag",
                   help="instrument depth for the model-based first stage")
    p.add_argument("--preset", metavar="NAME",
                   help="named simulation study (simulate only)")
    p.add_argument("--reps", type=int, default=200, metavar="N",
                   help="Monte Carlo replications, default 200")
    p.add_argument("--seed", type=int, default=0, metavar="S",
                   help="master seed for simulate, default 0")
    p.add_argument("--out-json", metavar="FILE", dest="out_json",
                   help="write the JSON report here instead of stdout")
    p.add_argument("--out-csv", metavar="FILE", dest="out_csv",
                   help="also write a plot-ready CSV here")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fatpanel",
                     description="Forecasted average treatment effects "
                                 "from panel data.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, blurb in (
            ("estimate", "estimate effects per (q, horizon)"),
            ("placebo", "pre-treatment placebo estimates over a lag grid"),
            ("dfat", "treated-minus-control differenced estimates"),
            ("simulate", "run a Monte Carlo study"),
            ("validate", "report per-unit data diagnostics")):
        p = sub.add_parser(name, help=blurb, description=blurb)
        _add_common_flags(p)
    return parser


def main(argv: Union[Sequence[str], None] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        cfg = build_run_config(args)
        return _COMMANDS[cfg.command](cfg)
    except ConfigError as exc:
        print(f"fatpanel: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PanelFormatError, OSError) as exc:
        print(f"fatpanel: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimationError, RankDeficiencyError) as exc:
        print(f"fatpanel: error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
