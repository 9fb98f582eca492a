"""Synthetic panel generators and a Monte Carlo driver.

The generators build counterfactual outcome processes from three optional
components — a mean-stationary AR(1), a random walk, and a deterministic
per-unit time trend — plus a recursive variant where the trend enters the
autoregression itself.  A treatment effect and a common post-adoption
shock can be injected on top, so the true effect is known by construction
and estimator bias, dispersion, and confidence-interval coverage can be
measured exactly.

``run_monte_carlo`` repeats simulate-and-estimate over a grid of estimator
settings with replication-local seeds split from one master seed, so
reports are bitwise reproducible and adding replications never reshuffles
earlier draws.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .basis import ForecastConfig
from .errors import ConfigError, EstimationError, RankDeficiencyError
from .estimators import MbConfig, dfat, fat, model_based_fat, placebo_fat
from .panel import PanelData, UnitSeries

# A parameter that is either common to all units or drawn per unit from a
# uniform interval (lo, hi).
ParamLaw = Union[float, tuple]


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of the synthetic counterfactual process.

    Outcomes are observed at periods 1..T with adoption after period
    ``tau``.  In ``additive`` mode the counterfactual is the sum of the
    components switched on by ``include_ar`` (mean-stationary AR(1)),
    ``include_walk`` (random walk from zero), and ``include_trend``
    (per-unit deterministic trend ``delta * t**trend_power``).  In
    ``recursive`` mode the trend feeds back through the autoregression,
    y_t = mu + rho * y_{t-1} + delta * t**trend_power + noise, and the
    include flags are ignored.

    ``rho``, ``mu``, and ``delta`` are scalars or (lo, hi) uniform laws
    drawn once per unit.  The AR initial value is drawn from the process's
    stationary law or from a fixed normal with mean 1 and variance 2,
    independent of stationarity.

    ``true_att`` is added to treated units at every period after ``tau``;
    ``common_shock`` is added to every unit after ``tau``.
    """

    n: int = 100
    n_control: int = 0
    T: int = 6
    tau: int = 5
    include_ar: bool = True
    include_walk: bool = False
    include_trend: bool = False
    trend_mode: str = "additive"
    init_mode: str = "stationary"
    rho: ParamLaw = 0.2
    mu: ParamLaw = (-1.0, 1.0)
    delta: ParamLaw = 1.0
    trend_power: int = 1
    true_att: float = 0.0
    common_shock: float = 0.0

    def __post_init__(self):
        if self.n < 1 or self.n_control < 0:
            raise ConfigError("need n >= 1 treated units and n_control >= 0")
        if not 1 <= self.tau < self.T:
            raise ConfigError("periods must satisfy T > tau >= 1")
        if self.trend_mode not in ("additive", "recursive"):
            raise ConfigError(f"unknown trend_mode {self.trend_mode!r}")
        if self.init_mode not in ("stationary", "fixed"):
            raise ConfigError(f"unknown init_mode {self.init_mode!r}")
        if self.trend_power < 1:
            raise ConfigError("trend_power must be >= 1")
        for name in ("rho", "mu", "delta"):
            law = getattr(self, name)
            if isinstance(law, tuple):
                if len(law) != 2 or not law[0] <= law[1]:
                    raise ConfigError(f"{name} law must be (lo, hi) with lo <= hi")
                object.__setattr__(self, name, (float(law[0]), float(law[1])))
            else:
                object.__setattr__(self, name, float(law))
        if self.init_mode == "stationary":
            hi = self.rho[1] if isinstance(self.rho, tuple) else abs(self.rho)
            if hi >= 1.0:
                raise ConfigError("stationary initialization requires |rho| < 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for name in ("rho", "mu", "delta"):
            if isinstance(d[name], tuple):
                d[name] = list(d[name])
        return d


def _draw(law: ParamLaw, rng: np.random.Generator, size: int) -> np.ndarray:
    """Per-unit values for a scalar-or-uniform law.

    Scalar laws consume no random draws, so switching a parameter between
    scalar and interval changes the stream layout by design.
    """
    if isinstance(law, tuple):
        return rng.uniform(law[0], law[1], size=size)
    return np.full(size, float(law))


def simulate_dgp(spec: DgpSpec, seed=None) -> PanelData:
    """Draw one panel from the specified process.

    ``seed`` is anything ``numpy.random.default_rng`` accepts.  Treated
    units are named ``t0001``..; control units ``c0001``.. and carry the
    shared adoption date as their forecasting cohort date.

    Draw order is fixed (mu, rho, delta, initial values, AR noise, walk
    noise), so identical seeds give bitwise-identical panels.
    """
    rng = np.random.default_rng(seed)
    N = spec.n + spec.n_control
    T, tau = spec.T, spec.tau

    mu = _draw(spec.mu, rng, N)
    rho = _draw(spec.rho, rng, N)
    delta = _draw(spec.delta, rng, N)

    if spec.init_mode == "stationary":
        init_mean = mu / (1.0 - rho)
        init_sd = 1.0 / np.sqrt(1.0 - rho ** 2)
    else:
        init_mean = np.full(N, 1.0)
        init_sd = np.full(N, math.sqrt(2.0))
    y_init = init_mean + init_sd * rng.standard_normal(N)

    tgrid = np.arange(1, T + 1)
    trend_vals = tgrid.astype(float) ** spec.trend_power

    if spec.trend_mode == "recursive":
        u = rng.standard_normal((N, T))
        Y = np.empty((N, T))
        prev = y_init
        for t in range(1, T + 1):
            prev = mu + rho * prev + delta * trend_vals[t - 1] + u[:, t - 1]
            Y[:, t - 1] = prev
    else:
        Y = np.zeros((N, T))
        if spec.include_ar:
            u = rng.standard_normal((N, T))
            prev = y_init
            for t in range(1, T + 1):
                prev = mu + rho * prev + u[:, t - 1]
                Y[:, t - 1] += prev
        if spec.include_walk:
            eps = rng.standard_normal((N, T))
            Y += np.cumsum(eps, axis=1)
        if spec.include_trend:
            Y += delta[:, None] * trend_vals[None, :]

    post = (tgrid > tau).astype(float)
    if spec.common_shock:
        Y += spec.common_shock * post[None, :]
    if spec.true_att:
        Y[:spec.n] += spec.true_att * post[None, :]

    width = max(4, len(str(N)))
    units = []
    for i in range(spec.n):
        units.append(UnitSeries(f"t{i + 1:0{width}d}", tgrid, Y[i], tau=tau))
    for j in range(spec.n_control):
        units.append(UnitSeries(f"c{j + 1:0{width}d}", tgrid,
                                Y[spec.n + j], tau=tau, is_control=True))
    return PanelData(units)


def analytic_mean_recursion(rho: float, delta: float, y0_mean: float, T: int,
                            mu: float = 0.0, trend_power: int = 1) -> np.ndarray:
    """Expected outcome path e_0..e_T of the recursive-trend process.

    e_t = mu + rho * e_{t-1} + delta * t**trend_power with e_0 = y0_mean.
    Noise terms are mean zero, so this is the exact mean path; combining
    it with forecast weights gives closed-form bias values.
    """
    e = np.empty(T + 1)
    e[0] = float(y0_mean)
    for t in range(1, T + 1):
        e[t] = mu + rho * e[t - 1] + delta * float(t) ** trend_power
    return e


# ---------------------------------------------------------------------------
# Monte Carlo driver


@dataclass(frozen=True)
class GridCell:
    """One estimator configuration evaluated in every replication.

    ``group`` is the row label used in reports (defaults to the estimator
    name); it separates variants such as differently instrumented
    model-based fits that share an estimator kind.
    """

    estimator: str = "pr"
    q: int = 0
    R: Union[int, str] = 1
    h: int = 1
    lag: int = 0
    instrument_lag: int = 3
    detrend: Union[bool, None] = None
    group: Union[str, None] = None

    def __post_init__(self):
        if self.estimator not in ("pr", "mb", "placebo", "dfat"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")

    @property
    def label(self) -> str:
        base = self.group or self.estimator
        if self.estimator == "placebo" and self.group is None:
            base = f"placebo_lag{self.lag}"
        return base

    @property
    def name(self) -> str:
        tag = f"{self.label}_q{self.q}_R{self.R}"
        if self.h != 1:
            tag += f"_h{self.h}"
        return tag


@dataclass(frozen=True)
class McCellResult:
    """Aggregates for one grid cell across replications."""

    name: str
    estimator: str
    label: str
    q: int
    R: Union[int, str]
    h: int
    truth: float
    n_reps: int
    n_ok: int
    n_failed: int
    degenerate: bool
    bias: float
    mc_se: float
    coverage: float
    se_est_mean: float

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("bias", "mc_se", "coverage", "se_est_mean"):
            if isinstance(d[key], float) and math.isnan(d[key]):
                d[key] = None
        return d


@dataclass(frozen=True)
class McReport:
    """Full Monte Carlo result: the spec, the seed, and per-cell rows."""

    spec: DgpSpec
    master_seed: int
    n_reps: int
    cells: tuple
    preset: Union[str, None] = None

    def cell(self, name: str) -> McCellResult:
        for c in self.cells:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "kind": "mc_report",
            "preset": self.preset,
            "master_seed": self.master_seed,
            "n_reps": self.n_reps,
            "spec": self.spec.to_dict(),
            "cells": [c.to_dict() for c in self.cells],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv_text(self) -> str:
        """Table-style text: one block row per (label, q), columns by R."""
        r_values = []
        for c in self.cells:
            if c.R not in r_values:
                r_values.append(c.R)
        rows = []
        seen = []
        for c in self.cells:
            key = (c.label, c.q, c.h)
            if key not in seen:
                seen.append(key)
        lines = ["label,q,metric," + ",".join(f"R={r}" for r in r_values)]
        by_key = {}
        for c in self.cells:
            by_key[(c.label, c.q, c.h, c.R)] = c
        for label, q, h in seen:
            for metric in ("bias", "mc_se", "coverage"):
                vals = []
                for r in r_values:
                    c = by_key.get((label, q, h, r))
                    if c is None:
                        vals.append("")
                    else:
                        v = getattr(c, metric)
                        vals.append("" if math.isnan(v) else repr(v))
                lines.append(f"{label},{q},{metric}," + ",".join(vals))
        return "\n".join(lines) + "\n"


def _evaluate_cell(panel: PanelData, cell: GridCell):
    if cell.estimator == "pr":
        est = fat(panel, ForecastConfig(q=cell.q, R=cell.R), h=cell.h)
    elif cell.estimator == "placebo":
        est = placebo_fat(panel, ForecastConfig(q=cell.q, R=cell.R),
                          lag=cell.lag, h=cell.h)
    elif cell.estimator == "dfat":
        est = dfat(panel, ForecastConfig(q=cell.q, R=cell.R), h=cell.h)
    else:
        mb = MbConfig(q=cell.q, R=cell.R, instrument_lag=cell.instrument_lag,
                      detrend=cell.detrend)
        est = model_based_fat(panel, mb, h=cell.h)
    return est.point, est.se, est.ci


def run_monte_carlo(spec: DgpSpec, cells: Sequence[GridCell], n_reps: int,
                    master_seed: int, preset: Union[str, None] = None) -> McReport:
    """Simulate ``n_reps`` panels and evaluate every cell on each.

    Replication r uses the child seed split from ``master_seed`` with key
    (r,), so results do not depend on execution order and extending the
    run leaves earlier replications unchanged.  A cell whose estimator
    raises in more than half of the replications is marked degenerate.

    Summaries per cell: ``bias`` (mean point estimate minus the truth),
    ``mc_se`` (standard deviation of point estimates across replications,
    ddof=1), ``coverage`` (share of confidence intervals containing the
    truth), and ``se_est_mean`` (average estimated standard error).
    """
    cells = tuple(cells)
    if n_reps < 2:
        raise ConfigError("n_reps must be >= 2")
    if not cells:
        raise ConfigError("no grid cells given")
    names = [c.name for c in cells]
    if len(set(names)) != len(names):
        raise ConfigError("grid cell names collide; set distinct group labels")

    points: list[list[float]] = [[] for _ in cells]
    ses: list[list[float]] = [[] for _ in cells]
    hits: list[int] = [0 for _ in cells]
    fails: list[int] = [0 for _ in cells]
    truths = [0.0 if c.estimator == "placebo" else spec.true_att for c in cells]

    for r in range(n_reps):
        child = np.random.SeedSequence(entropy=master_seed, spawn_key=(r,))
        panel = simulate_dgp(spec, child)
        for j, cell in enumerate(cells):
            try:
                point, se, ci = _evaluate_cell(panel, cell)
            except (EstimationError, RankDeficiencyError):
                fails[j] += 1
                continue
            points[j].append(point)
            ses[j].append(se)
            if ci[0] <= truths[j] <= ci[1]:
                hits[j] += 1

    results = []
    for j, cell in enumerate(cells):
        n_ok = len(points[j])
        if n_ok:
            mean = math.fsum(points[j]) / n_ok
            bias = mean - truths[j]
            cov = hits[j] / n_ok
            se_mean = math.fsum(ses[j]) / n_ok
        else:
            mean = bias = cov = se_mean = math.nan
        if n_ok >= 2:
            var = math.fsum((p - mean) ** 2 for p in points[j]) / (n_ok - 1)
            mc_se = math.sqrt(var)
        else:
            mc_se = math.nan
        results.append(McCellResult(
            name=cell.name, estimator=cell.estimator, label=cell.label,
            q=cell.q, R=cell.R, h=cell.h, truth=truths[j], n_reps=n_reps,
            n_ok=n_ok, n_failed=fails[j],
            degenerate=fails[j] > n_reps // 2,
            bias=bias, mc_se=mc_se, coverage=cov, se_est_mean=se_mean,
        ))
    return McReport(spec=spec, master_seed=int(master_seed), n_reps=n_reps,
                    cells=tuple(results), preset=preset)


# ---------------------------------------------------------------------------
# study presets


def _pr_grid(q_values=(0, 1, 2), tau=5, r_extra=5) -> tuple:
    cells = []
    for q in q_values:
        for R in range(q + 1, min(q + r_extra, tau) + 1):
            cells.append(GridCell(estimator="pr", q=q, R=R))
    return tuple(cells)


def _nonstationary_grid() -> tuple:
    cells = []
    for q in range(4):
        cells.append(GridCell(estimator="pr", q=q, R=q + 1))
    for q in range(4):
        cells.append(GridCell(estimator="mb", q=q, R=q + 1,
                              instrument_lag=3, detrend=True, group="mb"))
    for q in range(4):
        cells.append(GridCell(estimator="mb", q=q, R=q + 1,
                              instrument_lag=2, detrend=False,
                              group="mb_missp"))
    return tuple(cells)


def preset(name: str):
    """Named study setups: the process spec plus its estimator grid.

    Returns (DgpSpec, tuple of GridCell).  Available names:

    * ``nonstationary_init`` / ``nonstationary_init_rho09``: recursive
      trend, fixed initial condition, forecast and model-based estimators
      at R = q+1.
    * ``stationary``, ``unit_root``, ``trend``, ``components_all``:
      additive component processes under a tuning-parameter grid.
    * ``heterogeneous_trend``, ``heterogeneous_both``: per-unit trend
      slopes, optionally per-unit AR coefficients.
    * ``common_shock``: half treated, half control, a post-adoption shock
      common to all units; forecast-only and differenced estimators.
    """
    base = dict(n=1000, T=6, tau=5)
    if name == "nonstationary_init":
        spec = DgpSpec(**base, trend_mode="recursive", init_mode="fixed",
                       rho=0.2, mu=(-1.0, 1.0), delta=1.0)
        return spec, _nonstationary_grid()
    if name == "nonstationary_init_rho09":
        spec = DgpSpec(**base, trend_mode="recursive", init_mode="fixed",
                       rho=0.9, mu=(-1.0, 1.0), delta=1.0)
        return spec, _nonstationary_grid()
    if name == "stationary":
        spec = DgpSpec(**base, include_ar=True, rho=0.2)
        return spec, _pr_grid()
    if name == "unit_root":
        spec = DgpSpec(**base, include_ar=True, include_walk=True, rho=0.2)
        return spec, _pr_grid()
    if name == "trend":
        spec = DgpSpec(**base, include_ar=True, include_trend=True,
                       rho=0.2, delta=1.0)
        return spec, _pr_grid()
    if name == "components_all":
        spec = DgpSpec(**base, include_ar=True, include_walk=True,
                       include_trend=True, rho=0.2, delta=1.0)
        return spec, _pr_grid()
    if name == "heterogeneous_trend":
        spec = DgpSpec(**base, include_ar=True, include_walk=True,
                       include_trend=True, rho=0.2, delta=(0.0, 2.0))
        return spec, _pr_grid()
    if name == "heterogeneous_both":
        spec = DgpSpec(**base, include_ar=True, include_walk=True,
                       include_trend=True, rho=(0.0, 0.99), delta=(0.0, 2.0))
        return spec, _pr_grid()
    if name == "common_shock":
        spec = DgpSpec(n=500, n_control=500, T=6, tau=5, include_ar=True,
                       rho=0.2, common_shock=2.0)
        cells = (GridCell(estimator="pr", q=0, R=5),
                 GridCell(estimator="dfat", q=0, R=5))
        return spec, cells
    raise ConfigError(f"unknown preset {name!r}")


PRESET_NAMES = (
    "nonstationary_init", "nonstationary_init_rho09",
    "stationary", "unit_root", "trend", "components_all",
    "heterogeneous_trend", "heterogeneous_both", "common_shock",
)
