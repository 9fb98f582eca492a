"""Tests for the synthetic panel generators and the Monte Carlo driver.

Expected values are frozen from independent derivations: deterministic
component panels worked by hand, the closed-form mean recursion, and
large-sample moment checks with 3-standard-error tolerances.
"""

import json
import math

import numpy as np
import pytest

from fatpanel.basis import ForecastConfig
from fatpanel.errors import ConfigError
from fatpanel.estimators import fat
from fatpanel.simulate import (
    PRESET_NAMES,
    DgpSpec,
    GridCell,
    analytic_mean_recursion,
    preset,
    run_monte_carlo,
    simulate_dgp,
)


def outcomes_matrix(panel):
    return np.vstack([u.outcomes for u in panel.units])


# ---------------------------------------------------------------------------
# spec validation


def test_spec_rejects_bad_period_layout():
    with pytest.raises(ConfigError):
        DgpSpec(T=5, tau=5)
    with pytest.raises(ConfigError):
        DgpSpec(T=5, tau=0)


def test_spec_rejects_nonstationary_rho_with_stationary_init():
    with pytest.raises(ConfigError):
        DgpSpec(rho=1.0, init_mode="stationary")
    with pytest.raises(ConfigError):
        DgpSpec(rho=(0.0, 1.2), init_mode="stationary")
    # The fixed initial condition has no such restriction.
    DgpSpec(rho=1.0, init_mode="fixed", trend_mode="recursive")


def test_spec_rejects_malformed_laws_and_enums():
    with pytest.raises(ConfigError):
        DgpSpec(mu=(1.0, -1.0))
    with pytest.raises(ConfigError):
        DgpSpec(delta=(0.0, 1.0, 2.0))
    with pytest.raises(ConfigError):
        DgpSpec(trend_mode="multiplicative")
    with pytest.raises(ConfigError):
        DgpSpec(init_mode="zero")
    with pytest.raises(ConfigError):
        DgpSpec(trend_power=0)
    with pytest.raises(ConfigError):
        DgpSpec(n=0)


def test_spec_to_dict_converts_laws_to_lists():
    d = DgpSpec(rho=(0.0, 0.99), delta=1.0).to_dict()
    assert d["rho"] == [0.0, 0.99]
    assert d["delta"] == 1.0
    assert d["mu"] == [-1.0, 1.0]


# ---------------------------------------------------------------------------
# deterministic component panels


def test_all_components_off_gives_zero_panel():
    spec = DgpSpec(n=3, T=5, tau=3, include_ar=False, include_walk=False,
                   include_trend=False)
    Y = outcomes_matrix(simulate_dgp(spec, 0))
    assert Y.shape == (3, 5)
    np.testing.assert_array_equal(Y, 0.0)


def test_pure_unit_trend_is_the_time_grid():
    spec = DgpSpec(n=2, T=6, tau=5, include_ar=False, include_trend=True,
                   delta=1.0)
    panel = simulate_dgp(spec, 0)
    for unit in panel.units:
        np.testing.assert_array_equal(unit.times, np.arange(1, 7))
        np.testing.assert_allclose(unit.outcomes, np.arange(1.0, 7.0))


def test_trend_power_squares_the_grid():
    spec = DgpSpec(n=1, T=4, tau=3, include_ar=False, include_trend=True,
                   delta=2.0, trend_power=2)
    Y = outcomes_matrix(simulate_dgp(spec, 0))
    np.testing.assert_allclose(Y[0], 2.0 * np.arange(1.0, 5.0) ** 2)


def test_effect_and_shock_injection_on_zero_base():
    # With every stochastic component off the panel is exactly the two
    # post-adoption injections: controls get only the common shock.
    spec = DgpSpec(n=2, n_control=2, T=4, tau=2, include_ar=False,
                   true_att=0.5, common_shock=2.0)
    panel = simulate_dgp(spec, 0)
    Y = outcomes_matrix(panel)
    np.testing.assert_allclose(Y[:2], [[0, 0, 2.5, 2.5]] * 2)
    np.testing.assert_allclose(Y[2:], [[0, 0, 2.0, 2.0]] * 2)
    assert [u.unit_id for u in panel.units] == ["t0001", "t0002",
                                                "c0001", "c0002"]
    assert [u.is_control for u in panel.units] == [False, False, True, True]
    assert all(u.tau == 2 for u in panel.units)


def test_same_seed_reproduces_panel_bitwise():
    spec = DgpSpec(n=20, T=8, tau=6, include_ar=True, include_walk=True,
                   include_trend=True, delta=(0.0, 2.0))
    Y1 = outcomes_matrix(simulate_dgp(spec, 42))
    Y2 = outcomes_matrix(simulate_dgp(spec, 42))
    Y3 = outcomes_matrix(simulate_dgp(spec, 43))
    np.testing.assert_array_equal(Y1, Y2)
    assert not np.array_equal(Y1, Y3)


# ---------------------------------------------------------------------------
# large-sample moment checks (3 standard errors)


def test_stationary_ar_mean_is_constant_over_time():
    n = 20000
    spec = DgpSpec(n=n, T=6, tau=5, include_ar=True, rho=0.2)
    Y = outcomes_matrix(simulate_dgp(spec, 11))
    # mu ~ U[-1,1] has mean 0, so E[y_t] = 0 at every t under the
    # stationary initial condition.
    for t in range(6):
        se = Y[:, t].std(ddof=1) / math.sqrt(n)
        assert abs(Y[:, t].mean()) <= 3 * se


def test_random_walk_increments_have_zero_mean():
    n = 20000
    spec = DgpSpec(n=n, T=6, tau=5, include_ar=False, include_walk=True)
    Y = outcomes_matrix(simulate_dgp(spec, 12))
    steps = np.diff(np.hstack([np.zeros((n, 1)), Y]), axis=1)
    for t in range(6):
        se = steps[:, t].std(ddof=1) / math.sqrt(n)
        assert abs(steps[:, t].mean()) <= 3 * se
        # Each increment is a fresh standard normal draw.
        assert abs(steps[:, t].std(ddof=1) - 1.0) < 0.05


def test_recursive_trend_mean_path_matches_recursion():
    n = 20000
    spec = DgpSpec(n=n, T=6, tau=5, trend_mode="recursive",
                   init_mode="fixed", rho=0.2, mu=0.0, delta=1.0)
    Y = outcomes_matrix(simulate_dgp(spec, 13))
    e = analytic_mean_recursion(rho=0.2, delta=1.0, y0_mean=1.0, T=6)
    for t in range(1, 7):
        se = Y[:, t - 1].std(ddof=1) / math.sqrt(n)
        assert abs(Y[:, t - 1].mean() - e[t]) <= 3 * se


def test_fixed_initial_condition_moments():
    # y_1 = mu + rho*y_0 + u_1 with y_0 ~ N(1, 2), so with mu=0 and
    # rho=0.5 the first observed period has mean 0.5 and variance 1.5.
    n = 40000
    spec = DgpSpec(n=n, T=2, tau=1, include_ar=True, init_mode="fixed",
                   rho=0.5, mu=0.0)
    Y = outcomes_matrix(simulate_dgp(spec, 14))
    se = Y[:, 0].std(ddof=1) / math.sqrt(n)
    assert abs(Y[:, 0].mean() - 0.5) <= 3 * se
    assert abs(Y[:, 0].var(ddof=1) - 1.5) < 0.06


# ---------------------------------------------------------------------------
# analytic mean recursion


def test_recursion_oracle_matches_hand_computed_path():
    e = analytic_mean_recursion(rho=0.2, delta=1.0, y0_mean=1.0, T=6)
    np.testing.assert_allclose(
        e, [1.0, 1.2, 2.24, 3.448, 4.6896, 5.93792, 7.187584], rtol=1e-12)
    # One-step-ahead naive bias: e_6 - e_5.
    assert e[6] - e[5] == pytest.approx(1.249664, abs=1e-12)


def test_recursion_oracle_trivial_and_mu_cases():
    np.testing.assert_array_equal(
        analytic_mean_recursion(rho=0.9, delta=0.0, y0_mean=0.0, T=5),
        np.zeros(6))
    # With rho=0 and delta=0 the path is flat at mu.
    e = analytic_mean_recursion(rho=0.0, delta=0.0, y0_mean=3.0, T=4, mu=2.0)
    np.testing.assert_allclose(e, [3.0, 2.0, 2.0, 2.0, 2.0], rtol=1e-15)


def test_recursion_oracle_quadratic_power():
    e = analytic_mean_recursion(rho=0.5, delta=1.0, y0_mean=0.0, T=3,
                                trend_power=2)
    np.testing.assert_allclose(e, [0.0, 1.0, 4.5, 11.25], rtol=1e-15)


# ---------------------------------------------------------------------------
# grid cells


def test_grid_cell_names_and_labels():
    assert GridCell(estimator="pr", q=0, R=1).name == "pr_q0_R1"
    assert GridCell(estimator="pr", q=2, R=4, h=3).name == "pr_q2_R4_h3"
    assert GridCell(estimator="placebo", q=0, R=2, lag=2).label == "placebo_lag2"
    assert GridCell(estimator="mb", q=1, R=2, group="mb_missp").name == "mb_missp_q1_R2"
    with pytest.raises(ConfigError):
        GridCell(estimator="ols")


# ---------------------------------------------------------------------------
# Monte Carlo driver


def test_monte_carlo_rejects_bad_arguments():
    spec = DgpSpec(n=4, T=4, tau=3)
    cells = (GridCell(estimator="pr", q=0, R=1),)
    with pytest.raises(ConfigError):
        run_monte_carlo(spec, cells, n_reps=1, master_seed=0)
    with pytest.raises(ConfigError):
        run_monte_carlo(spec, (), n_reps=2, master_seed=0)
    with pytest.raises(ConfigError):
        run_monte_carlo(spec, cells + cells, n_reps=2, master_seed=0)


def test_monte_carlo_matches_direct_estimation():
    # The driver must equal a hand-rolled loop over child seeds split
    # from the master seed by replication index.
    spec = DgpSpec(n=12, T=6, tau=5, include_ar=True, rho=0.2)
    cell = GridCell(estimator="pr", q=1, R=3)
    n_reps = 5
    report = run_monte_carlo(spec, (cell,), n_reps=n_reps, master_seed=99)

    points = []
    hits = 0
    for r in range(n_reps):
        child = np.random.SeedSequence(entropy=99, spawn_key=(r,))
        est = fat(simulate_dgp(spec, child), ForecastConfig(q=1, R=3))
        points.append(est.point)
        if est.ci[0] <= 0.0 <= est.ci[1]:
            hits += 1
    row = report.cell("pr_q1_R3")
    assert row.bias == math.fsum(points) / n_reps
    mean = math.fsum(points) / n_reps
    var = math.fsum((p - mean) ** 2 for p in points) / (n_reps - 1)
    assert row.mc_se == pytest.approx(math.sqrt(var), rel=1e-15)
    assert row.coverage == hits / n_reps
    assert row.n_ok == n_reps and row.n_failed == 0
    assert not row.degenerate


def test_monte_carlo_truth_uses_injected_effect_but_zero_for_placebo():
    spec = DgpSpec(n=10, T=6, tau=4, include_ar=True, true_att=0.7)
    cells = (GridCell(estimator="pr", q=0, R=2),
             GridCell(estimator="placebo", q=0, R=2, lag=1))
    report = run_monte_carlo(spec, cells, n_reps=3, master_seed=5)
    assert report.cell("pr_q0_R2").truth == 0.7
    assert report.cell("placebo_lag1_q0_R2").truth == 0.0


def test_monte_carlo_marks_always_failing_cell_degenerate():
    # Horizon 2 in a panel observed only one period past adoption: the
    # forecast target is never observed, so every replication fails.
    spec = DgpSpec(n=5, T=3, tau=2, include_ar=True)
    cells = (GridCell(estimator="pr", q=0, R=1),
             GridCell(estimator="pr", q=0, R=1, h=2))
    report = run_monte_carlo(spec, cells, n_reps=4, master_seed=1)
    good, bad = report.cell("pr_q0_R1"), report.cell("pr_q0_R1_h2")
    assert good.n_ok == 4 and not good.degenerate
    assert bad.n_ok == 0 and bad.n_failed == 4 and bad.degenerate
    assert math.isnan(bad.bias)
    assert bad.to_dict()["bias"] is None
    assert bad.to_dict()["mc_se"] is None


def test_monte_carlo_report_is_reproducible_bytewise():
    spec = DgpSpec(n=8, T=6, tau=5, include_ar=True)
    cells = (GridCell(estimator="pr", q=0, R=1),
             GridCell(estimator="pr", q=0, R=2))
    a = run_monte_carlo(spec, cells, n_reps=4, master_seed=7, preset=None)
    b = run_monte_carlo(spec, cells, n_reps=4, master_seed=7, preset=None)
    assert a.to_json() == b.to_json()
    assert a.to_csv_text() == b.to_csv_text()


def test_report_json_shape():
    spec = DgpSpec(n=6, T=6, tau=5, include_ar=True)
    cells = (GridCell(estimator="pr", q=0, R=1),)
    report = run_monte_carlo(spec, cells, n_reps=2, master_seed=3,
                             preset="stationary")
    doc = json.loads(report.to_json())
    assert doc["schema"] == 1
    assert doc["kind"] == "mc_report"
    assert doc["preset"] == "stationary"
    assert doc["master_seed"] == 3
    assert doc["n_reps"] == 2
    assert doc["spec"]["rho"] == 0.2
    assert len(doc["cells"]) == 1
    assert doc["cells"][0]["name"] == "pr_q0_R1"


def test_report_csv_layout_round_trips_floats():
    spec = DgpSpec(n=6, T=6, tau=5, include_ar=True)
    cells = (GridCell(estimator="pr", q=0, R=1),
             GridCell(estimator="pr", q=0, R=2),
             GridCell(estimator="pr", q=1, R=2))
    report = run_monte_carlo(spec, cells, n_reps=3, master_seed=8)
    lines = report.to_csv_text().strip().split("\n")
    assert lines[0] == "label,q,metric,R=1,R=2"
    # One block of three metric rows per (label, q) pair.
    assert len(lines) == 1 + 2 * 3
    bias_row = lines[1].split(",")
    assert bias_row[:3] == ["pr", "0", "bias"]
    assert float(bias_row[3]) == report.cell("pr_q0_R1").bias
    # q=1 exists only at R=2; the R=1 column is blank.
    q1_bias = lines[4].split(",")
    assert q1_bias[:3] == ["pr", "1", "bias"]
    assert q1_bias[3] == ""
    assert float(q1_bias[4]) == report.cell("pr_q1_R2").bias


def test_report_cell_lookup_raises_for_unknown_name():
    spec = DgpSpec(n=4, T=6, tau=5)
    report = run_monte_carlo(spec, (GridCell(estimator="pr", q=0, R=1),),
                             n_reps=2, master_seed=0)
    with pytest.raises(KeyError):
        report.cell("pr_q9_R9")


# ---------------------------------------------------------------------------
# presets


def test_all_presets_load_and_have_distinct_cells():
    for name in PRESET_NAMES:
        spec, cells = preset(name)
        assert isinstance(spec, DgpSpec)
        names = [c.name for c in cells]
        assert len(set(names)) == len(names) and names


def test_unknown_preset_raises():
    with pytest.raises(ConfigError):
        preset("anova")


def test_tuning_grid_shape():
    spec, cells = preset("stationary")
    assert spec.include_ar and not spec.include_walk and not spec.include_trend
    assert spec.init_mode == "stationary" and spec.rho == 0.2
    assert (spec.n, spec.T, spec.tau) == (1000, 6, 5)
    # q=0 runs R=1..5, q=1 runs R=2..5, q=2 runs R=3..5.
    got = [(c.q, c.R) for c in cells]
    want = [(0, r) for r in range(1, 6)] + [(1, r) for r in range(2, 6)] \
        + [(2, r) for r in range(3, 6)]
    assert got == want


def test_component_presets_toggle_the_right_terms():
    assert preset("unit_root")[0].include_walk
    assert not preset("unit_root")[0].include_trend
    trend_spec = preset("trend")[0]
    assert trend_spec.include_trend and trend_spec.delta == 1.0
    both = preset("heterogeneous_both")[0]
    assert both.rho == (0.0, 0.99) and both.delta == (0.0, 2.0)
    assert preset("heterogeneous_trend")[0].rho == 0.2


def test_recursive_presets_differ_only_in_rho():
    spec_a, cells_a = preset("nonstationary_init")
    spec_b, cells_b = preset("nonstationary_init_rho09")
    assert spec_a.trend_mode == "recursive" and spec_a.init_mode == "fixed"
    assert spec_a.rho == 0.2 and spec_b.rho == 0.9
    assert cells_a == cells_b
    labels = {c.label for c in cells_a}
    assert labels == {"pr", "mb", "mb_missp"}
    assert all(c.R == c.q + 1 for c in cells_a)
    mb = [c for c in cells_a if c.label == "mb"]
    missp = [c for c in cells_a if c.label == "mb_missp"]
    assert all(c.instrument_lag == 3 and c.detrend for c in mb)
    assert all(c.instrument_lag == 2 and c.detrend is False for c in missp)


def test_shock_preset_has_controls_and_differenced_cell():
    spec, cells = preset("common_shock")
    assert spec.n == 500 and spec.n_control == 500
    assert spec.common_shock == 2.0 and spec.true_att == 0.0
    assert {c.estimator for c in cells} == {"pr", "dfat"}
