"""Panel containers, delimited-text ingestion, validation, and alignment.

A panel is an ordered collection of per-unit time series.  Each unit records
integer periods, one outcome per period, the last period before its
treatment starts (``tau``), an optional control flag, and optional covariate
columns.  Times are calendar periods until ``reindex_time_to_adoption``
re-expresses them relative to each unit's adoption date.

The interchange format is a delimited text file with a header row::

    unit,time,outcome,treated_at[,control_flag][,x1,x2,...]

Times and treatment dates are integers, outcomes and covariates decimal
numbers with "." as the decimal mark, encoding UTF-8.  ``write_panel``
emits exactly this layout so that a write/load round trip reproduces the
panel bit for bit.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, TextIO

import numpy as np

from .basis import ForecastConfig
from .errors import ConfigError, PanelFormatError

_SCHEMA_KEYS = ("unit", "time", "outcome", "treated_at", "control_flag")
_TRUE_FLAGS = {"1", "true", "t", "yes"}
_FALSE_FLAGS = {"0", "false", "f", "no", ""}


@dataclass(frozen=True, eq=False)
class UnitSeries:
    """One unit's observed history.

    Attributes
    ----------
    unit_id : str
        Identifier, unique within a panel.
    times : ndarray of int
        Observed periods, strictly increasing (gaps allowed).
    outcomes : ndarray of float
        One outcome per observed period.
    tau : int or None
        Last untreated period: treatment is active strictly after ``tau``.
        ``None`` only for control units without an assigned cohort date.
    is_control : bool
        Control units never receive treatment; ``tau`` then records the
        cohort date used to align them with treated units.
    covariates : ndarray or None
        Optional (n_obs, n_covariates) matrix aligned with ``times``.
    times_original : ndarray or None
        Calendar periods before event-time reindexing, kept for reference.
    """

    unit_id: str
    times: np.ndarray
    outcomes: np.ndarray
    tau: int | None = None
    is_control: bool = False
    covariates: np.ndarray | None = None
    times_original: np.ndarray | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=int)
        outcomes = np.asarray(self.outcomes, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "outcomes", outcomes)
        if times.ndim != 1 or times.shape != outcomes.shape:
            raise PanelFormatError(
                f"unit {self.unit_id!r}: times and outcomes must be 1-D and aligned"
            )
        if times.size == 0:
            raise PanelFormatError(f"unit {self.unit_id!r}: empty series")
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise PanelFormatError(
                f"unit {self.unit_id!r}: times must be strictly increasing"
            )
        if self.covariates is not None:
            cov = np.asarray(self.covariates, dtype=float)
            if cov.ndim != 2 or cov.shape[0] != times.size:
                raise PanelFormatError(
                    f"unit {self.unit_id!r}: covariates must be (n_obs, k)"
                )
            object.__setattr__(self, "covariates", cov)
        if self.tau is None and not self.is_control:
            raise PanelFormatError(
                f"unit {self.unit_id!r}: treated units need a treatment date"
            )
        if self.tau is not None:
            object.__setattr__(self, "tau", int(self.tau))

    @property
    def n_obs(self) -> int:
        return self.times.size

    def index_of(self, time: int) -> int | None:
        """Position of ``time`` in this series, or None when unobserved."""
        i = int(np.searchsorted(self.times, time))
        if i < self.times.size and self.times[i] == time:
            return i
        return None

    def value_at(self, time: int) -> float | None:
        i = self.index_of(time)
        return None if i is None else float(self.outcomes[i])

    def contiguous_run_ending(self, time: int) -> int:
        """Length of the unbroken run of consecutive periods ending at ``time``."""
        i = self.index_of(time)
        if i is None:
            return 0
        run = 1
        while i - run >= 0 and self.times[i - run] == time - run:
            run += 1
        return run


class PanelData:
    """An immutable ordered collection of ``UnitSeries``.

    Parameters
    ----------
    units : iterable of UnitSeries
        Unit identifiers must be unique; insertion order is preserved and
        determines every deterministic aggregation order downstream.
    time_unit : str
        Label for the period unit (informational).
    covariate_names : sequence of str
        Names for the covariate columns carried by the units.
    """

    def __init__(self, units: Iterable[UnitSeries], time_unit: str = "period",
                 covariate_names: Iterable[str] = ()):
        units = tuple(units)
        names = tuple(covariate_names)
        seen = set()
        for u in units:
            if u.unit_id in seen:
                raise PanelFormatError(f"duplicate unit id {u.unit_id!r}")
            seen.add(u.unit_id)
            if u.covariates is not None and u.covariates.shape[1] != len(names):
                raise PanelFormatError(
                    f"unit {u.unit_id!r} carries {u.covariates.shape[1]} covariate "
                    f"columns but the panel declares {len(names)}"
                )
        if not units:
            raise PanelFormatError("panel has no units")
        self.units = units
        self.time_unit = str(time_unit)
        self.covariate_names = names
        self._by_id = {u.unit_id: u for u in units}
        self._dense = None

    def __iter__(self):
        return iter(self.units)

    def __len__(self):
        return len(self.units)

    @property
    def n_units(self) -> int:
        return len(self.units)

    def unit(self, unit_id: str) -> UnitSeries:
        try:
            return self._by_id[unit_id]
        except KeyError:
            raise KeyError(f"no unit {unit_id!r} in panel") from None

    @property
    def treated_units(self) -> tuple[UnitSeries, ...]:
        return tuple(u for u in self.units if not u.is_control)

    @property
    def control_units(self) -> tuple[UnitSeries, ...]:
        return tuple(u for u in self.units if u.is_control)

    def is_balanced(self) -> bool:
        """True when every unit observes exactly the same periods."""
        first = self.units[0].times
        return all(
            u.times.size == first.size and np.array_equal(u.times, first)
            for u in self.units[1:]
        )

    def common_tau(self) -> int | None:
        """The shared treatment date, or None when dates differ or are missing."""
        taus = {u.tau for u in self.units}
        if len(taus) == 1 and None not in taus:
            return self.units[0].tau
        return None

    def as_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """(times, outcomes) with one outcome row per unit; balanced panels only."""
        if self._dense is None:
            if not self.is_balanced():
                raise PanelFormatError("as_matrix requires a balanced panel")
            Y = np.stack([u.outcomes for u in self.units])
            self._dense = (self.units[0].times.copy(), Y)
        return self._dense


def _resolve_schema(schema: Mapping[str, object] | None, header: list[str]):
    mapping = {k: k for k in _SCHEMA_KEYS}
    covariates = None
    if schema:
        unknown = set(schema) - set(_SCHEMA_KEYS) - {"covariates"}
        if unknown:
            raise ConfigError(f"unknown schema keys: {sorted(unknown)}")
        for k in _SCHEMA_KEYS:
            if k in schema:
                mapping[k] = str(schema[k])
        if "covariates" in schema:
            covariates = [str(c) for c in schema["covariates"]]
    for k in ("unit", "time", "outcome"):
        if mapping[k] not in header:
            raise PanelFormatError(f"missing required column {mapping[k]!r}")
    if mapping["treated_at"] not in header and mapping["control_flag"] not in header:
        raise PanelFormatError(
            f"need a {mapping['treated_at']!r} or {mapping['control_flag']!r} column"
        )
    if covariates is None:
        known = {mapping[k] for k in _SCHEMA_KEYS}
        covariates = [c for c in header if c not in known]
    else:
        for c in covariates:
            if c not in header:
                raise PanelFormatError(f"missing covariate column {c!r}")
    return mapping, covariates


def _parse_int(value: str, what: str, row: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise PanelFormatError(f"row {row}: {what} {value!r} is not an integer") from None


def _parse_float(value: str, what: str, row: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise PanelFormatError(f"row {row}: {what} {value!r} is not a number") from None


def load_panel(source, schema: Mapping[str, object] | None = None,
               time_unit: str = "period") -> PanelData:
    """Read a panel from a delimited text file or stream.

    Parameters
    ----------
    source : path or text file object
        Comma-delimited text with a header row.
    schema : mapping, optional
        Renames columns: keys among ``unit``, ``time``, ``outcome``,
        ``treated_at``, ``control_flag``, plus ``covariates`` (a list of
        column names).  Unnamed extra columns become covariates.
    time_unit : str
        Informational label stored on the panel.

    Raises
    ------
    PanelFormatError
        On missing columns, non-numeric fields, duplicate (unit, time)
        observations, inconsistent treatment dates within a unit, or a unit
        that has neither a treatment date nor a control flag.
    """
    if hasattr(source, "read"):
        return _load_stream(source, schema, time_unit)
    with open(os.fspath(source), newline="", encoding="utf-8") as fh:
        return _load_stream(fh, schema, time_unit)


def _load_stream(fh: TextIO, schema, time_unit) -> PanelData:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise PanelFormatError("empty input: no header row") from None
    mapping, covariate_cols = _resolve_schema(schema, header)
    col = {name: i for i, name in enumerate(header)}
    iu, it, iy = col[mapping["unit"]], col[mapping["time"]], col[mapping["outcome"]]
    ita = col.get(mapping["treated_at"])
    icf = col.get(mapping["control_flag"])
    icov = [col[c] for c in covariate_cols]

    rows_by_unit: dict[str, list] = {}
    taus: dict[str, int | None] = {}
    flags: dict[str, bool] = {}
    seen_times: dict[str, set[int]] = {}
    for rownum, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise PanelFormatError(
                f"row {rownum}: expected {len(header)} fields, got {len(row)}"
            )
        uid = row[iu]
        t = _parse_int(row[it], "time", rownum)
        y = _parse_float(row[iy], "outcome", rownum)

        tau = None
        if ita is not None and row[ita].strip() != "":
            tau = _parse_int(row[ita], "treatment date", rownum)
        ctrl = False
        if icf is not None:
            raw = row[icf].strip().lower()
            if raw in _TRUE_FLAGS:
                ctrl = True
            elif raw not in _FALSE_FLAGS:
                raise PanelFormatError(f"row {rownum}: bad control flag {row[icf]!r}")

        if uid not in rows_by_unit:
            rows_by_unit[uid] = []
            taus[uid] = tau
            flags[uid] = ctrl
            seen_times[uid] = set()
        else:
            if taus[uid] != tau:
                raise PanelFormatError(
                    f"row {rownum}: unit {uid!r} has inconsistent treatment dates"
                )
            if flags[uid] != ctrl:
                raise PanelFormatError(
                    f"row {rownum}: unit {uid!r} has inconsistent control flags"
                )
        if t in seen_times[uid]:
            raise PanelFormatError(f"row {rownum}: duplicate observation ({uid!r}, {t})")
        seen_times[uid].add(t)
        cov = None
        if icov:
            cov = [
                _parse_float(row[i], f"covariate {header[i]!r}", rownum)
                if row[i].strip() != "" else float("nan")
                for i in icov
            ]
        rows_by_unit[uid].append((t, y, cov))

    if not rows_by_unit:
        raise PanelFormatError("input has a header but no data rows")

    units = []
    for uid, rows in rows_by_unit.items():
        if taus[uid] is None and not flags[uid]:
            raise PanelFormatError(
                f"unit {uid!r} has no treatment date and is not flagged as control"
            )
        rows.sort(key=lambda r: r[0])
        times = np.array([r[0] for r in rows], dtype=int)
        outcomes = np.array([r[1] for r in rows], dtype=float)
        cov = None
        if icov:
            cov = np.array([r[2] for r in rows], dtype=float)
        units.append(
            UnitSeries(
                unit_id=uid, times=times, outcomes=outcomes, tau=taus[uid],
                is_control=flags[uid], covariates=cov,
            )
        )
    return PanelData(units, time_unit=time_unit, covariate_names=covariate_cols)


def write_panel(panel: PanelData, dest) -> None:
    """Write a panel in the canonical delimited layout.

    Emits ``unit,time,outcome,treated_at`` plus a ``control_flag`` column
    when any unit is a control, plus one column per covariate.  Numbers are
    written with ``repr`` so a reload reproduces the exact float values.
    """
    if hasattr(dest, "write"):
        _write_stream(panel, dest)
    else:
        with open(os.fspath(dest), "w", newline="", encoding="utf-8") as fh:
            _write_stream(panel, fh)


def _write_stream(panel: PanelData, fh: TextIO) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    has_controls = any(u.is_control for u in panel.units)
    header = ["unit", "time", "outcome", "treated_at"]
    if has_controls:
        header.append("control_flag")
    header.extend(panel.covariate_names)
    writer.writerow(header)
    for u in panel.units:
        for i, t in enumerate(u.times):
            row = [u.unit_id, int(t), repr(float(u.outcomes[i])),
                   "" if u.tau is None else int(u.tau)]
            if has_controls:
                row.append(int(u.is_control))
            if panel.covariate_names:
                row.extend(repr(float(v)) for v in u.covariates[i])
            writer.writerow(row)


def panel_to_csv_text(panel: PanelData) -> str:
    buf = io.StringIO()
    _write_stream(panel, buf)
    return buf.getvalue()


@dataclass(frozen=True)
class UnitDiagnostics:
    """Validation findings for one unit."""

    unit_id: str
    tau: int | None
    effective_tau: int | None
    pre_treatment_run: int
    required_window: int | None
    short_window: bool
    window_gap: bool
    series_gaps: bool
    covariates_complete: bool
    fatal: bool
    messages: tuple[str, ...]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["messages"] = list(self.messages)
        return d


@dataclass(frozen=True)
class ValidationReport:
    """Per-unit diagnostics plus panel-level structure flags."""

    units: tuple[UnitDiagnostics, ...]
    balanced: bool
    common_tau: int | None

    @property
    def ok(self) -> bool:
        return not any(d.fatal for d in self.units)

    @property
    def fatal_units(self) -> tuple[str, ...]:
        return tuple(d.unit_id for d in self.units if d.fatal)

    def unit(self, unit_id: str) -> UnitDiagnostics:
        for d in self.units:
            if d.unit_id == unit_id:
                return d
        raise KeyError(unit_id)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "balanced": self.balanced,
            "common_tau": self.common_tau,
            "units": [d.to_dict() for d in self.units],
        }


def _delta_for(unit_id: str, delta) -> int:
    if isinstance(delta, Mapping):
        return int(delta.get(unit_id, 0))
    return int(delta)


def validate(panel: PanelData, config: ForecastConfig) -> ValidationReport:
    """Check every unit against the window requirements of ``config``.

    A unit is flagged when its contiguous pre-treatment run ending at the
    effective treatment date is shorter than the requested window, and
    fatally when fewer than order + 1 periods are available at all, which
    makes the window regression underdetermined.  Reports gaps and
    incomplete covariates; never raises on content.
    """
    q = config.basis.order
    diags = []
    for u in panel.units:
        messages = []
        fatal = False
        eff_tau = None
        run = 0
        required = config.R if isinstance(config.R, int) else None
        if u.tau is None:
            messages.append("no treatment date")
            if not u.is_control:
                fatal = True
        else:
            eff_tau = u.tau - _delta_for(u.unit_id, config.delta)
            run = u.contiguous_run_ending(eff_tau)
            if run == 0:
                messages.append(f"no observation at effective treatment date {eff_tau}")
        short = u.tau is not None and required is not None and run < required
        needed = required if required is not None else q + 1
        window_gap = False
        if u.tau is not None and run < needed and run > 0:
            # A gap only exists when older observations lie beyond the run.
            window_gap = bool(u.times.min() < eff_tau - run + 1)
        if short:
            messages.append(
                f"contiguous pre-treatment run of {run} is shorter than R={required}"
            )
        if u.tau is not None and run < q + 1:
            fatal = True
            messages.append(f"fewer than q+1={q + 1} usable pre-treatment periods")
        series_gaps = bool(
            u.times.size > 1 and np.any(np.diff(u.times) > 1)
        )
        if u.covariates is None:
            cov_complete = panel.covariate_names == ()
        else:
            cov_complete = not np.isnan(u.covariates).any()
        if not cov_complete:
            messages.append("incomplete covariates")
        diags.append(
            UnitDiagnostics(
                unit_id=u.unit_id,
                tau=u.tau,
                effective_tau=eff_tau,
                pre_treatment_run=run,
                required_window=required,
                short_window=short,
                window_gap=window_gap,
                series_gaps=series_gaps,
                covariates_complete=cov_complete,
                fatal=fatal,
                messages=tuple(messages),
            )
        )
    return ValidationReport(
        units=tuple(diags),
        balanced=panel.is_balanced(),
        common_tau=panel.common_tau(),
    )


def reindex_time_to_adoption(panel: PanelData) -> PanelData:
    """Re-express every unit's clock relative to its own adoption date.

    Time t becomes t - tau, so the last untreated period of every unit sits
    at 0.  Original calendar periods are kept on ``times_original``.
    Applying the function twice is the same as applying it once.
    """
    missing = [u.unit_id for u in panel.units if u.tau is None]
    if missing:
        raise PanelFormatError(
            f"cannot reindex: units without a treatment date: {missing}"
        )
    units = []
    for u in panel.units:
        units.append(
            dataclasses.replace(
                u,
                times=u.times - u.tau,
                tau=0,
                times_original=u.times_original if u.times_original is not None else u.times,
            )
        )
    return PanelData(units, time_unit=f"{panel.time_unit} (event time)"
                     if "(event time)" not in panel.time_unit else panel.time_unit,
                     covariate_names=panel.covariate_names)


def apply_anticipation(panel: PanelData, delta) -> PanelData:
    """Shift treatment dates back to absorb anticipation effects.

    ``delta`` is a non-negative integer, or a mapping from unit id to one.
    Each unit's date becomes tau - delta, so estimation windows end before
    any anticipatory response, and horizons count from the shifted date.
    """
    units = []
    for u in panel.units:
        d = _delta_for(u.unit_id, delta)
        if d < 0:
            raise ConfigError(f"unit {u.unit_id!r}: anticipation must be >= 0")
        if d == 0:
            units.append(u)
            continue
        if u.tau is None:
            raise PanelFormatError(
                f"unit {u.unit_id!r}: anticipation needs a treatment date"
            )
        new_tau = u.tau - d
        if not np.any(u.times <= new_tau):
            raise PanelFormatError(
                f"unit {u.unit_id!r}: anticipation {d} leaves no pre-treatment data"
            )
        units.append(dataclasses.replace(u, tau=new_tau))
    return PanelData(units, time_unit=panel.time_unit,
                     covariate_names=panel.covariate_names)
