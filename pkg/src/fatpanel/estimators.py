"""Average treatment effect estimators built on per-unit forecasts.

The central estimator compares each treated unit's realized outcome after
adoption with a counterfactual forecast extrapolated from that unit's own
pre-treatment history, then averages the differences.  No control group is
needed; identification rests on the pre-treatment trend family continuing
through the forecast horizon.

Variants included here:

* ``fat``: the plain forecasted effect at horizon h.
* ``placebo_fat``: the same construction pretending adoption happened
  earlier, so the estimand is zero by design.
* ``fat_balanced_avg`` and ``fat_pooled``: algebraically equivalent forms
  on balanced panels (forecast the cross-sectional average; pooled dummy
  regression with unit-specific trends), useful as cross-checks.
* ``model_based_fat``: imposes a dynamic model with common coefficients,
  estimated by instrumented first differences, and forecasts the remainder.
* ``covariate_fat_heterogeneous``: augments each unit's window regression
  with covariates carrying unit-specific coefficients.
* ``dfat``: difference of forecasted effects between treated units and
  never-treated controls, which removes common post-adoption shocks.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import norm

from .basis import BasisSpec, ForecastConfig, _qr, _solver_design, forecast_weights
from .errors import ConfigError, EstimationError, RankDeficiencyError
from .panel import PanelData, UnitSeries


# ---------------------------------------------------------------------------
# result containers


@dataclass(frozen=True)
class FatEstimate:
    """A forecasted average treatment effect at one horizon.

    Attributes
    ----------
    horizon : int
        Periods past the (effective) adoption date.
    point : float
        Average of per-unit forecast residuals, accumulated in unit order
        with compensated summation.
    se : float
        Standard error of the point estimate.
    ci : (float, float)
        Two-sided normal confidence interval at ``level``.
    level : float
        Confidence level used for ``ci``.
    n_used : int
        Units entering the average.
    unit_ids : tuple of str
        Contributing units, in panel order.
    residuals : ndarray
        Per-unit residuals aligned with ``unit_ids``.
    dropped : tuple of (str, str)
        Units excluded from the average and the reason for each.
    """

    horizon: int
    point: float
    se: float
    ci: tuple[float, float]
    level: float
    n_used: int
    unit_ids: tuple[str, ...]
    residuals: np.ndarray
    dropped: tuple[tuple[str, str], ...] = ()

    def residuals_by_unit(self) -> dict[str, float]:
        return {u: float(r) for u, r in zip(self.unit_ids, self.residuals)}

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "point": self.point,
            "se": self.se,
            "ci": [self.ci[0], self.ci[1]],
            "level": self.level,
            "n_used": self.n_used,
            "dropped_units": [{"unit": u, "reason": r} for u, r in self.dropped],
        }


@dataclass(frozen=True)
class DfatEstimate:
    """Difference of forecasted effects: treated minus control group."""

    horizon: int
    point: float
    se: float
    ci: tuple[float, float]
    level: float
    treated: FatEstimate
    control: FatEstimate

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "point": self.point,
            "se": self.se,
            "ci": [self.ci[0], self.ci[1]],
            "level": self.level,
            "treated": self.treated.to_dict(),
            "control": self.control.to_dict(),
        }


@dataclass(frozen=True)
class AhEstimate:
    """First-differenced instrumental-variable fit of the dynamic model.

    ``beta`` stacks the lagged-outcome coefficient first, then covariate
    coefficients.  ``psi`` holds one influence vector per contributing
    unit: the estimation error of ``beta`` is the average of these, so they
    feed the variance correction of the model-based estimator.
    """

    beta: np.ndarray
    intercept: float | None
    psi: dict[str, np.ndarray]
    weak: bool
    n_units: int
    n_obs: int
    covariate_names: tuple[str, ...] = ()

    @property
    def rho(self) -> float:
        return float(self.beta[0])


@dataclass(frozen=True)
class MbConfig:
    """Settings for the model-based estimator.

    Parameters
    ----------
    q, R, h, delta : as in ``ForecastConfig``
        Polynomial order, window length, default horizon, anticipation.
    lagged_outcome : bool
        Include the one-period-lagged outcome in the dynamic model.
    covariates : tuple of str
        Panel covariate columns entering the model with common
        coefficients.
    first_stage : {"anderson_hsiao", "user"}
        How the common coefficients are obtained.  The built-in first
        stage requires ``lagged_outcome=True``; ``"user"`` takes ``beta``
        as known and skips the variance correction.
    instrument_lag : {2, 3}
        Outcome lag used to instrument the differenced lagged outcome.
    detrend : bool or None
        Include an intercept in the differenced first stage, which absorbs
        a linear time trend in levels.  Defaults to True exactly when
        ``instrument_lag`` is 3 (a trend-robust instrument choice).
    beta : tuple of float, optional
        Known model coefficients when ``first_stage="user"``.
    """

    q: int = 1
    R: int | str = "all"
    h: int = 1
    delta: int = 0
    lagged_outcome: bool = True
    covariates: tuple[str, ...] = ()
    first_stage: str = "anderson_hsiao"
    instrument_lag: int = 3
    detrend: bool | None = None
    beta: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.q < 0:
            raise ConfigError("q must be >= 0")
        if isinstance(self.R, str):
            if self.R != "all":
                raise ConfigError(f"R must be an integer or 'all', got {self.R!r}")
        elif self.R < self.q + 1:
            raise ConfigError(f"window length R={self.R} is below q+1={self.q + 1}")
        if self.h < 1:
            raise ConfigError("horizon h must be >= 1")
        if self.delta < 0:
            raise ConfigError("anticipation delta must be >= 0")
        if self.first_stage not in ("anderson_hsiao", "user"):
            raise ConfigError(f"unknown first stage {self.first_stage!r}")
        if self.instrument_lag not in (2, 3):
            raise ConfigError("instrument_lag must be 2 or 3")
        object.__setattr__(self, "covariates", tuple(self.covariates))
        k = int(self.lagged_outcome) + len(self.covariates)
        if self.first_stage == "user":
            if self.beta is None or len(self.beta) != k:
                raise ConfigError(f"user first stage needs beta of length {k}")
            object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        else:
            if not self.lagged_outcome:
                raise ConfigError(
                    "the built-in first stage estimates the lagged-outcome "
                    "model; pass first_stage='user' with beta otherwise"
                )
        if self.detrend is None:
            object.__setattr__(self, "detrend", self.instrument_lag == 3)


# ---------------------------------------------------------------------------
# variance helpers


def fat_variance(residuals) -> float:
    """Standard error of the residual mean: sqrt of (1/n) sample variance / n."""
    u = np.asarray(residuals, dtype=float)
    if u.ndim != 1 or u.size == 0:
        raise ConfigError("residuals must be a non-empty 1-D array")
    n = u.size
    mean = math.fsum(u.tolist()) / n
    var = math.fsum(((u - mean) ** 2).tolist()) / n
    return math.sqrt(var / n)


def mb_variance(residuals, gradients, psi) -> float:
    """Standard error accounting for first-stage estimation error.

    Each residual is recentred by (mean forecast gradient) @ (unit influence
    vector) before the plain variance formula is applied: units that moved
    the first-stage coefficients have that feedback removed.
    """
    u = np.asarray(residuals, dtype=float)
    G = np.atleast_2d(np.asarray(gradients, dtype=float))
    P = np.atleast_2d(np.asarray(psi, dtype=float))
    if G.shape[0] != u.size or P.shape != G.shape:
        raise ConfigError("residuals, gradients, and psi must align")
    gbar = G.mean(axis=0)
    ustar = u - P @ gbar
    return fat_variance(ustar)


def _zscore(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ConfigError("confidence level must be in (0, 1)")
    return float(norm.ppf(0.5 * (1.0 + level)))


def _interval(point: float, se: float, level: float) -> tuple[float, float]:
    z = _zscore(level)
    return (point - z * se, point + z * se)


# ---------------------------------------------------------------------------
# window resolution


class _DropUnit(Exception):
    """Internal: the unit cannot contribute and is reported, not fatal."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def _contiguous_run(times: np.ndarray, i_end: int) -> int:
    run = 1
    t_end = times[i_end]
    while i_end - run >= 0 and times[i_end - run] == t_end - run:
        run += 1
    return run


def _window_indices(unit_id: str, times: np.ndarray, eff_tau: int, q: int,
                    R, shrink: bool) -> tuple[int, int]:
    """Start and end index of the estimation window ending at ``eff_tau``."""
    i_tau = int(np.searchsorted(times, eff_tau))
    if i_tau >= times.size or times[i_tau] != eff_tau:
        raise _DropUnit(f"no observation at effective adoption date {eff_tau}")
    run = _contiguous_run(times, i_tau)
    R_i = run if R == "all" else int(R)
    if run < R_i:
        if times[0] < eff_tau - run + 1:
            # Older observations exist, so the window has interior holes.
            if not shrink:
                raise EstimationError(
                    f"unit {unit_id!r}: missing periods inside the estimation "
                    f"window ending at {eff_tau}; pass shrink_window=True to "
                    "shrink to the contiguous run"
                )
            R_i = run
        else:
            raise _DropUnit(
                f"pre-treatment history of {run} periods is shorter than R={R_i}"
            )
    if R_i < q + 1:
        raise _DropUnit(f"only {R_i} usable pre-treatment periods, need q+1={q + 1}")
    return i_tau - R_i + 1, i_tau


def _homogeneous(units: Sequence[UnitSeries]) -> bool:
    t0 = units[0].times
    tau0 = units[0].tau
    if tau0 is None:
        return False
    for u in units[1:]:
        if u.tau != tau0:
            return False
        if u.times is not t0 and not np.array_equal(u.times, t0):
            return False
    return True


def _stack_outcomes(units: Sequence[UnitSeries]) -> np.ndarray:
    return np.stack([u.outcomes for u in units])


# ---------------------------------------------------------------------------
# the core residual computation


def _fat_residuals(units: Sequence[UnitSeries], config: ForecastConfig, h: int,
                   tau_shift: int = 0):
    """Per-unit forecast residuals y(tau_eff + h) - forecast.

    Returns (unit_ids, residuals, dropped).  Units in a homogeneous group
    (shared times and adoption date) are solved with one set of weights and
    a single matrix product; otherwise each unit is resolved on its own.
    """
    if not units:
        raise EstimationError("no units to estimate on")
    q = config.basis.order
    shift = config.delta + tau_shift

    if _homogeneous(units):
        u0 = units[0]
        eff_tau = u0.tau - shift
        times = u0.times
        try:
            i0, i1 = _window_indices(u0.unit_id, times, eff_tau, q, config.R,
                                     config.shrink_window)
        except _DropUnit as d:
            return (), np.empty(0), tuple((u.unit_id, d.reason) for u in units)
        target = eff_tau + h
        j = int(np.searchsorted(times, target))
        if j >= times.size or times[j] != target:
            reason = f"outcome not observed at target period {target}"
            return (), np.empty(0), tuple((u.unit_id, reason) for u in units)
        w = forecast_weights(config.basis, times[i0:i1 + 1], target).weights
        Y = _stack_outcomes(units)
        residuals = Y[:, j] - Y[:, i0:i1 + 1] @ w
        return tuple(u.unit_id for u in units), residuals, ()

    ids, residuals, dropped = [], [], []
    cache: dict = {}
    for u in units:
        if u.tau is None:
            dropped.append((u.unit_id, "no adoption date"))
            continue
        eff_tau = u.tau - shift
        try:
            i0, i1 = _window_indices(u.unit_id, u.times, eff_tau, q, config.R,
                                     config.shrink_window)
        except _DropUnit as d:
            dropped.append((u.unit_id, d.reason))
            continue
        target = eff_tau + h
        jt = u.index_of(target)
        if jt is None:
            dropped.append((u.unit_id, f"outcome not observed at target period {target}"))
            continue
        R_i = i1 - i0 + 1
        if config.basis.family == "polynomial":
            key = (R_i, h)
        elif config.basis.family == "fourier":
            key = (R_i, h, int(u.times[i0]))
        else:
            key = None
        w = cache.get(key) if key is not None else None
        if w is None:
            try:
                w = forecast_weights(config.basis, u.times[i0:i1 + 1], target).weights
            except RankDeficiencyError:
                dropped.append((u.unit_id, "window design is rank deficient"))
                continue
            if key is not None:
                cache[key] = w
        ids.append(u.unit_id)
        residuals.append(float(u.outcomes[jt] - w @ u.outcomes[i0:i1 + 1]))
    return tuple(ids), np.asarray(residuals, dtype=float), tuple(dropped)


def _summarize(ids, residuals, dropped, h, level) -> FatEstimate:
    n = len(ids)
    if n == 0:
        detail = "; ".join(f"{u}: {r}" for u, r in dropped[:3])
        raise EstimationError(f"no usable units ({detail})")
    point = math.fsum(residuals.tolist()) / n
    se = fat_variance(residuals)
    return FatEstimate(
        horizon=h, point=point, se=se, ci=_interval(point, se, level),
        level=level, n_used=n, unit_ids=tuple(ids),
        residuals=np.asarray(residuals, dtype=float), dropped=tuple(dropped),
    )


# ---------------------------------------------------------------------------
# public estimators


def fat(panel: PanelData, config: ForecastConfig, h: int | None = None,
        level: float = 0.95) -> FatEstimate:
    """Forecasted average treatment effect at horizon ``h``.

    For each treated unit, fits the basis regression on the window of
    ``config.R`` pre-treatment periods ending at the effective adoption
    date, forecasts the counterfactual at horizon ``h``, and averages the
    forecast errors.  Units that cannot be forecast (missing target
    outcome, short history, rank-deficient window) are dropped and listed
    on the result; interior window gaps raise unless
    ``config.shrink_window`` is set.

    Parameters
    ----------
    panel : PanelData
        Panel with treated units; control units are ignored here.
    config : ForecastConfig
        Basis, window length, and anticipation settings.
    h : int, optional
        Forecast horizon, defaulting to ``config.h``.
    level : float
        Confidence level for the normal interval.

    Returns
    -------
    FatEstimate
    """
    h = config.h if h is None else int(h)
    if h < 1:
        raise ConfigError("horizon h must be >= 1")
    ids, residuals, dropped = _fat_residuals(panel.treated_units, config, h)
    return _summarize(ids, residuals, dropped, h, level)


def placebo_fat(panel: PanelData, config: ForecastConfig, lag: int,
                h: int = 1, level: float = 0.95) -> FatEstimate:
    """Forecasted effect computed as if adoption happened ``lag`` periods early.

    With ``lag >= h`` the target period is still untreated, so the estimand
    is zero and the estimate diagnoses forecast bias.  ``lag=0`` reproduces
    ``fat`` exactly.
    """
    if lag < 0:
        raise ConfigError("placebo lag must be >= 0")
    ids, residuals, dropped = _fat_residuals(panel.treated_units, config, h,
                                             tau_shift=lag)
    return _summarize(ids, residuals, dropped, h, level)


def dfat(panel: PanelData, config: ForecastConfig, h: int | None = None,
         config_control: ForecastConfig | None = None,
         level: float = 0.95) -> DfatEstimate:
    """Treated-minus-control difference of forecasted effects.

    Controls are forecast from their own pre-period histories using their
    recorded cohort date, so any shock common to both groups after adoption
    cancels from the difference.  The two groups may use different window
    settings via ``config_control``.
    """
    h = config.h if h is None else int(h)
    treated = panel.treated_units
    controls = [u for u in panel.control_units if u.tau is not None]
    skipped = tuple(
        (u.unit_id, "no adoption date") for u in panel.control_units if u.tau is None
    )
    if not treated or not controls:
        raise EstimationError(
            "dfat needs at least one treated unit and one control unit with "
            "an adoption date"
        )
    cc = config if config_control is None else config_control
    t_ids, t_res, t_drop = _fat_residuals(treated, config, h)
    c_ids, c_res, c_drop = _fat_residuals(tuple(controls), cc, h)
    est_t = _summarize(t_ids, t_res, t_drop, h, level)
    est_c = _summarize(c_ids, c_res, c_drop + skipped, h, level)
    point = est_t.point - est_c.point
    se = math.hypot(est_t.se, est_c.se)
    return DfatEstimate(
        horizon=h, point=point, se=se, ci=_interval(point, se, level),
        level=level, treated=est_t, control=est_c,
    )


def fat_balanced_avg(panel: PanelData, q: int, R: int, h: int) -> float:
    """Forecast the cross-sectional average series; balanced panels only.

    On a balanced panel with a shared adoption date this equals ``fat``
    exactly, because the forecast is linear in outcomes.
    """
    units = panel.treated_units
    if not units:
        raise EstimationError("no treated units")
    tau = units[0].tau
    if any(u.tau != tau for u in units) or not _homogeneous(units):
        raise EstimationError("fat_balanced_avg requires a balanced panel with a shared adoption date")
    times = units[0].times
    try:
        i0, i1 = _window_indices(units[0].unit_id, times, tau, q, int(R), False)
    except _DropUnit as d:
        raise EstimationError(str(d)) from None
    target = tau + h
    j = int(np.searchsorted(times, target))
    if j >= times.size or times[j] != target:
        raise EstimationError(f"outcome not observed at target period {target}")
    Y = _stack_outcomes(units)
    ybar = Y.mean(axis=0)
    w = forecast_weights(BasisSpec("polynomial", order=q), times[i0:i1 + 1], target).weights
    return float(ybar[j] - w @ ybar[i0:i1 + 1])


def fat_pooled(panel: PanelData, q: int, R: int, h: int) -> np.ndarray:
    """Pooled regression on post-period dummies and unit-specific trends.

    Stacks, for every treated unit, the window periods and the ``h``
    post-adoption periods; regresses outcomes on one dummy per post period
    plus a full polynomial trend per unit.  On a balanced panel the dummy
    coefficients equal ``fat`` at horizons 1..h exactly.
    """
    units = panel.treated_units
    if not units:
        raise EstimationError("no treated units")
    tau = units[0].tau
    if any(u.tau != tau for u in units) or not _homogeneous(units):
        raise EstimationError("fat_pooled requires a balanced panel with a shared adoption date")
    if R < q + 1:
        raise ConfigError(f"window length R={R} is below q+1={q + 1}")
    times = units[0].times
    wanted = np.arange(tau - R + 1, tau + h + 1)
    idx = np.searchsorted(times, wanted)
    if np.any(idx >= times.size) or np.any(times[np.minimum(idx, times.size - 1)] != wanted):
        raise EstimationError(
            f"pooled regression needs every period in [{wanted[0]}, {wanted[-1]}]"
        )
    n = len(units)
    rel = (wanted - tau).astype(float)
    rows_per = wanted.size
    dummies = np.zeros((rows_per, h))
    for k in range(1, h + 1):
        dummies[rel == k, k - 1] = 1.0
    trend = np.vander(rel, q + 1, increasing=True)
    X = np.zeros((n * rows_per, h + n * (q + 1)))
    y = np.empty(n * rows_per)
    Y = _stack_outcomes(units)
    for i in range(n):
        r0 = i * rows_per
        X[r0:r0 + rows_per, :h] = dummies
        X[r0:r0 + rows_per, h + i * (q + 1):h + (i + 1) * (q + 1)] = trend
        y[r0:r0 + rows_per] = Y[i, idx]
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        raise EstimationError("pooled design is rank deficient")
    return coef[:h]


# ---------------------------------------------------------------------------
# instrumented first stage and model-based estimator


def _ah_unit_rows(u: UnitSeries, eff_tau: int, lag: int, detrend: bool,
                  cov_idx: list[int]):
    """Per-unit moment blocks A_i = Z'W and b_i = Z'dy for one unit."""
    k = 1 + len(cov_idx) + (1 if detrend else 0)
    A = np.zeros((k, k))
    b = np.zeros(k)
    rows = 0
    times = u.times
    y = u.outcomes
    for i_t in range(times.size):
        t = int(times[i_t])
        if t > eff_tau:
            break
        i1 = u.index_of(t - 1)
        i2 = u.index_of(t - 2)
        il = u.index_of(t - lag)
        if i1 is None or i2 is None or il is None:
            continue
        wrow = [y[i1] - y[i2]]
        zrow = [y[il]]
        if cov_idx:
            x_t = u.covariates[i_t, cov_idx]
            x_1 = u.covariates[i1, cov_idx]
            if np.isnan(x_t).any() or np.isnan(x_1).any():
                continue
            wrow.extend(x_t - x_1)
            zrow.extend(x_1)
        if detrend:
            wrow.append(1.0)
            zrow.append(1.0)
        wv = np.asarray(wrow)
        zv = np.asarray(zrow)
        dy = y[i_t] - y[i1]
        A += np.outer(zv, wv)
        b += zv * dy
        rows += 1
    return A, b, rows


def _ah_blocks_vectorized(units, eff_tau: int, lag: int, detrend: bool):
    """Moment blocks for a homogeneous gap-free group, built matrix-wise.

    Returns (uids, A, b, rows_per_unit) with A of shape (n, k, k) and b of
    shape (n, k), or None when the shared time grid cannot support the
    construction (then the per-unit path applies).
    """
    u0 = units[0]
    times = u0.times
    if times.size > 1 and not np.all(np.diff(times) == 1):
        return None
    i_tau = int(np.searchsorted(times, eff_tau))
    if i_tau >= times.size or times[i_tau] != eff_tau:
        i_tau = min(i_tau, times.size) - 1  # last observed pre-period
    j_lo = max(2, lag)
    if i_tau < j_lo:
        return None
    js = np.arange(j_lo, i_tau + 1)
    J = js.size
    Y = _stack_outcomes(units)
    dy_t = Y[:, js] - Y[:, js - 1]
    dy_lag = Y[:, js - 1] - Y[:, js - 2]
    z = Y[:, js - lag]
    n = len(units)
    if detrend:
        A = np.empty((n, 2, 2))
        A[:, 0, 0] = (z * dy_lag).sum(axis=1)
        A[:, 0, 1] = z.sum(axis=1)
        A[:, 1, 0] = dy_lag.sum(axis=1)
        A[:, 1, 1] = J
        b = np.empty((n, 2))
        b[:, 0] = (z * dy_t).sum(axis=1)
        b[:, 1] = dy_t.sum(axis=1)
    else:
        A = (z * dy_lag).sum(axis=1).reshape(n, 1, 1)
        b = (z * dy_t).sum(axis=1).reshape(n, 1)
    uids = [u.unit_id for u in units]
    return uids, A, b, J


def anderson_hsiao(panel: PanelData, instrument_lag: int = 3,
                   detrend: bool | None = None,
                   covariates: Sequence[str] = (), delta: int = 0) -> AhEstimate:
    """Instrumented first-difference fit of the dynamic outcome model.

    Differences the model y_t = rho * y_{t-1} + x_t' theta + (unit trend)
    and instruments the differenced lagged outcome with the level outcome
    ``instrument_lag`` periods back, pooling all pre-treatment observations
    of treated units.  With ``detrend`` an intercept enters the differenced
    equation (absorbing a linear trend in levels) and joins the instrument
    set; covariates enter differenced, instrumented by their first lag.

    A nearly singular first stage is flagged as ``weak`` but still solved,
    since weak-instrument noise is informative in itself.

    Returns
    -------
    AhEstimate
        Coefficients, optional intercept, and per-unit influence vectors.
    """
    if instrument_lag not in (2, 3):
        raise ConfigError("instrument_lag must be 2 or 3")
    if detrend is None:
        detrend = instrument_lag == 3
    cov_idx = [panel.covariate_names.index(c) for c in covariates]
    units = panel.treated_units
    if not units:
        raise EstimationError("no treated units")
    k = 1 + len(cov_idx) + (1 if detrend else 0)

    packed = None
    if not cov_idx and _homogeneous(units):
        packed = _ah_blocks_vectorized(units, units[0].tau - delta,
                                       instrument_lag, detrend)
    if packed is not None:
        uids, A_all, b_all, rows_per = packed
        n_contrib = len(uids)
        n_rows = n_contrib * rows_per
    else:
        uids, A_list, b_list = [], [], []
        n_rows = 0
        for u in units:
            if u.tau is None:
                continue
            A, b, rows = _ah_unit_rows(u, u.tau - delta, instrument_lag,
                                       detrend, cov_idx)
            if rows:
                uids.append(u.unit_id)
                A_list.append(A)
                b_list.append(b)
                n_rows += rows
        if not uids:
            raise EstimationError(
                f"no unit has enough history for instrument lag {instrument_lag}"
            )
        A_all = np.stack(A_list)
        b_all = np.stack(b_list)
        n_contrib = len(uids)

    ZtW = A_all.sum(axis=0)
    Ztdy = b_all.sum(axis=0)
    s = np.linalg.svd(ZtW, compute_uv=False)
    weak = bool(s[-1] < 1e-8 * max(s[0], np.finfo(float).tiny))
    try:
        beta_full = np.linalg.solve(ZtW, Ztdy)
    except np.linalg.LinAlgError:
        raise EstimationError("first-stage moment matrix is exactly singular") from None
    Abar = ZtW / n_contrib
    keep = k - (1 if detrend else 0)
    m = b_all - A_all @ beta_full
    try:
        psi_rows = np.linalg.solve(Abar, m.T).T[:, :keep]
    except np.linalg.LinAlgError:
        raise EstimationError("first-stage moment matrix is exactly singular") from None
    psi = {uid: psi_rows[i] for i, uid in enumerate(uids)}
    return AhEstimate(
        beta=beta_full[:keep],
        intercept=float(beta_full[-1]) if detrend else None,
        psi=psi,
        weak=weak,
        n_units=n_contrib,
        n_obs=n_rows,
        covariate_names=tuple(covariates),
    )


def model_based_fat(panel: PanelData, mb: MbConfig, h: int | None = None,
                    level: float = 0.95) -> FatEstimate:
    """Forecasted effect under a dynamic model with common coefficients.

    Removes the modeled part x_t' beta from each unit's window outcomes,
    fits the unit's polynomial remainder, and forecasts
    x_{target}' beta + remainder(target).  The standard error corrects for
    the estimation error of beta through the first stage's per-unit
    influence vectors; with user-supplied beta the correction is zero and
    the plain variance applies.

    With no lagged outcome, no covariates, and beta empty this reproduces
    ``fat`` residual for residual.
    """
    h = mb.h if h is None else int(h)
    if h < 1:
        raise ConfigError("horizon h must be >= 1")
    if mb.first_stage == "user":
        first = None
        beta = np.asarray(mb.beta, dtype=float)
        psi_by_unit: Mapping[str, np.ndarray] = {}
    else:
        first = anderson_hsiao(panel, mb.instrument_lag, mb.detrend,
                               mb.covariates, mb.delta)
        beta = first.beta
        psi_by_unit = first.psi
    k = int(mb.lagged_outcome) + len(mb.covariates)
    cov_idx = [panel.covariate_names.index(c) for c in mb.covariates]
    units = panel.treated_units
    if not units:
        raise EstimationError("no treated units")
    basis = BasisSpec("polynomial", order=mb.q)

    ids: list[str] = []
    residuals: list[float] = []
    grads: list[np.ndarray] = []
    dropped: list[tuple[str, str]] = []

    fast = _homogeneous(units) and not mb.covariates
    if fast:
        u0 = units[0]
        eff_tau = u0.tau - mb.delta
        times = u0.times
        try:
            i0, i1 = _window_indices(u0.unit_id, times, eff_tau, mb.q, mb.R, False)
        except _DropUnit as d:
            raise EstimationError(f"no usable units ({d.reason})") from None
        target = eff_tau + h
        jt = int(np.searchsorted(times, target))
        if jt >= times.size or times[jt] != target:
            raise EstimationError(f"outcome not observed at target period {target}")
        if mb.lagged_outcome and (i0 == 0 or times[i0 - 1] != times[i0] - 1
                                  or times[jt - 1] != target - 1):
            raise EstimationError("lagged outcomes missing for the window or target")
        w = forecast_weights(basis, times[i0:i1 + 1], target).weights
        Y = _stack_outcomes(units)
        Ywin = Y[:, i0:i1 + 1]
        if mb.lagged_outcome:
            rho = float(beta[0])
            Xlag = Y[:, i0 - 1:i1]
            v = Ywin - rho * Xlag
            fc = rho * Y[:, jt - 1] + v @ w
            g = Y[:, jt - 1] - Xlag @ w
            grads_arr = g[:, None]
        else:
            fc = Ywin @ w
            grads_arr = np.zeros((len(units), 0))
        res_arr = Y[:, jt] - fc
        ids = [u.unit_id for u in units]
        residuals_arr = res_arr
    else:
        cache: dict = {}
        for u in units:
            if u.tau is None:
                dropped.append((u.unit_id, "no adoption date"))
                continue
            eff_tau = u.tau - mb.delta
            try:
                i0, i1 = _window_indices(u.unit_id, u.times, eff_tau, mb.q, mb.R, False)
            except _DropUnit as d:
                dropped.append((u.unit_id, d.reason))
                continue
            target = eff_tau + h
            jt = u.index_of(target)
            if jt is None:
                dropped.append((u.unit_id, f"outcome not observed at target period {target}"))
                continue
            win = slice(i0, i1 + 1)
            xcols = []
            xt = []
            if mb.lagged_outcome:
                if i0 == 0 or u.times[i0 - 1] != u.times[i0] - 1 \
                        or u.index_of(target - 1) is None:
                    dropped.append((u.unit_id, "lagged outcome missing for the window or target"))
                    continue
                xcols.append(u.outcomes[i0 - 1:i1])
                xt.append(u.outcomes[u.index_of(target - 1)])
            ok = True
            for ci in cov_idx:
                col = u.covariates[win, ci]
                tgt = u.covariates[jt, ci]
                if np.isnan(col).any() or np.isnan(tgt):
                    dropped.append((u.unit_id, "incomplete covariates on the window or target"))
                    ok = False
                    break
                xcols.append(col)
                xt.append(tgt)
            if not ok:
                continue
            R_i = i1 - i0 + 1
            key = (R_i, h)
            w = cache.get(key)
            if w is None:
                w = forecast_weights(basis, u.times[win], target).weights
                cache[key] = w
            Xwin = np.column_stack(xcols) if xcols else np.zeros((R_i, 0))
            xtv = np.asarray(xt, dtype=float)
            v = u.outcomes[win] - Xwin @ beta
            fc = float(xtv @ beta) + float(w @ v)
            ids.append(u.unit_id)
            residuals.append(float(u.outcomes[jt]) - fc)
            grads.append(xtv - Xwin.T @ w)
        residuals_arr = np.asarray(residuals, dtype=float)
        grads_arr = (np.vstack(grads) if grads
                     else np.zeros((len(ids), k)))

    if not ids:
        detail = "; ".join(f"{u}: {r}" for u, r in dropped[:3])
        raise EstimationError(f"no usable units ({detail})")
    n = len(ids)
    point = math.fsum(residuals_arr.tolist()) / n
    if k and psi_by_unit:
        zeros = np.zeros(k)
        psi_arr = np.vstack([np.asarray(psi_by_unit.get(u, zeros)) for u in ids])
        se = mb_variance(residuals_arr, grads_arr, psi_arr)
    else:
        se = fat_variance(residuals_arr)
    return FatEstimate(
        horizon=h, point=point, se=se, ci=_interval(point, se, level),
        level=level, n_used=n, unit_ids=tuple(ids),
        residuals=residuals_arr, dropped=tuple(dropped),
    )


def covariate_fat_heterogeneous(panel: PanelData, config: ForecastConfig,
                                h: int | None = None,
                                covariates: Sequence[str] | None = None,
                                level: float = 0.95) -> FatEstimate:
    """Forecasted effect with unit-specific covariate coefficients.

    Each unit's window regression gains the selected covariate columns, so
    both the trend and the covariate response are estimated per unit; the
    forecast plugs in the covariates observed at the target period.  Units
    whose augmented design is rank deficient on their window are dropped.
    """
    h = config.h if h is None else int(h)
    if h < 1:
        raise ConfigError("horizon h must be >= 1")
    names = panel.covariate_names if covariates is None else tuple(covariates)
    cov_idx = [panel.covariate_names.index(c) for c in names]
    if not cov_idx:
        raise ConfigError("no covariates selected")
    q = config.basis.order
    ids, residuals, dropped = [], [], []
    for u in panel.treated_units:
        if u.tau is None:
            dropped.append((u.unit_id, "no adoption date"))
            continue
        eff_tau = u.tau - config.delta
        try:
            i0, i1 = _window_indices(u.unit_id, u.times, eff_tau, q, config.R,
                                     config.shrink_window)
        except _DropUnit as d:
            dropped.append((u.unit_id, d.reason))
            continue
        target = eff_tau + h
        jt = u.index_of(target)
        if jt is None:
            dropped.append((u.unit_id, f"outcome not observed at target period {target}"))
            continue
        win = slice(i0, i1 + 1)
        R_i = i1 - i0 + 1
        if R_i < q + 1 + len(cov_idx):
            dropped.append((u.unit_id,
                            f"window of {R_i} cannot fit {q + 1 + len(cov_idx)} parameters"))
            continue
        Xc = u.covariates[win, :][:, cov_idx]
        xt = u.covariates[jt, cov_idx]
        if np.isnan(Xc).any() or np.isnan(xt).any():
            dropped.append((u.unit_id, "incomplete covariates on the window or target"))
            continue
        base, hrow = _solver_design(config.basis, u.times[win].astype(float),
                                    float(target))
        D = np.hstack([base, Xc])
        drow = np.concatenate([hrow, xt])
        try:
            Qm, Rm = _qr(D)
        except RankDeficiencyError:
            dropped.append((u.unit_id, "augmented window design is rank deficient"))
            continue
        coef = solve_triangular(Rm, Qm.T @ u.outcomes[win])
        ids.append(u.unit_id)
        residuals.append(float(u.outcomes[jt]) - float(drow @ coef))
    return _summarize(tuple(ids), np.asarray(residuals, dtype=float),
                      tuple(dropped), h, level)
