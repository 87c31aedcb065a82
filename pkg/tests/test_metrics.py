import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from garnn.metrics import (MetricReport, PooledMetric, evaluate, format_table, g_rmse, glucose_penalty, mae,
                           mape, pool, rmse, time_lag, write_report_csv)

SINE_T = np.arange(300)
SINE = 100 + 50 * np.sin(2 * np.pi * SINE_T / 60)


def test_rmse_example():
    assert rmse([1, 2], [1, 4]) == pytest.approx(math.sqrt(2), abs=1e-12)


def test_mape_and_mae_example():
    y, y_hat = [100, 200], [110, 180]
    assert mape(y, y_hat) == pytest.approx(10.0, abs=1e-12)
    assert mae(y, y_hat) == pytest.approx(15.0, abs=1e-12)


def test_identical_series_score_zero():
    y = np.linspace(60, 250, 20)
    assert rmse(y, y) == mae(y, y) == mape(y, y) == g_rmse(y, y) == 0.0


def test_g_rmse_equals_rmse_without_penalised_errors():
    y = np.array([100.0, 150.0, 60.0, 200.0])
    y_hat = np.array([110.0, 140.0, 50.0, 220.0])  # under in hypo, over in hyper: no penalty
    assert g_rmse(y, y_hat) == rmse(y, y_hat)


def test_g_rmse_hypo_overestimate():
    assert g_rmse([60], [70]) == pytest.approx(math.sqrt(250), abs=1e-12)


def test_g_rmse_hyper_overestimate_unpenalised():
    assert g_rmse([200], [210]) == pytest.approx(10.0, abs=1e-12)


def test_g_rmse_hyper_underestimate():
    assert g_rmse([200], [190], w_hyper=4.0) == pytest.approx(20.0, abs=1e-12)


def test_penalty_weights_below_one_rejected():
    with pytest.raises(ValueError):
        glucose_penalty([100], [100], w_hypo=0.5)
    with pytest.raises(ValueError):
        g_rmse([100], [100], w_hyper=0.9)


def test_g_rmse_never_below_rmse(rng):
    for _ in range(1000):
        y = rng.uniform(40, 400, 8)
        y_hat = y + rng.normal(0, 30, 8)
        assert g_rmse(y, y_hat) >= rmse(y, y_hat)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(40, 400), st.floats(0, 500)), min_size=1, max_size=30), st.randoms())
def test_pointwise_metrics_ignore_order(pairs, rnd):
    y, y_hat = map(np.array, zip(*pairs))
    perm = list(range(len(y)))
    rnd.shuffle(perm)
    for f in (rmse, mae, mape, g_rmse):
        assert f(y[perm], y_hat[perm]) == pytest.approx(f(y, y_hat), rel=1e-12, abs=1e-12)


def test_empty_and_mismatched_rejected():
    with pytest.raises(ValueError):
        rmse([], [])
    with pytest.raises(ValueError):
        mae([1, 2], [1])


def test_mape_needs_positive_reference():
    with pytest.raises(ValueError):
        mape([0, 100], [1, 100])


def test_time_lag_of_perfect_forecast_is_zero():
    lag = time_lag(SINE, SINE, 5.0, 6)
    assert lag.shift == 0 and lag.minutes == 0.0 and not lag.degenerate


@pytest.mark.parametrize("H", [1, 3, 6])
def test_persistence_lags_by_horizon(H):
    y = SINE[H:]
    y_hat = SINE[:-H]  # forecast for y[t] is the value H steps earlier
    lag = time_lag(y, y_hat, 5.0, 6)
    assert lag.shift == H and lag.minutes == 5.0 * H


def test_negated_series_lag_frozen():
    # every shift correlates negatively; the least negative is the largest shift tried
    lag = time_lag(SINE, -SINE, 5.0, 6)
    assert lag.shift == 6
    assert lag.correlations[0] == pytest.approx(-1.0, abs=1e-12)
    assert lag.correlations[6] == pytest.approx(-0.8156, abs=5e-4)
    assert all(c < 0 for c in lag.correlations)


def test_constant_series_lag_degenerate():
    lag = time_lag(np.full(20, 120.0), np.linspace(100, 140, 20), 5.0, 3)
    assert lag.degenerate and lag.minutes == 0.0


def test_time_lag_needs_enough_points():
    with pytest.raises(ValueError):
        time_lag([1, 2, 3], [1, 2, 3], 5.0, 2)


def test_evaluate_bundles_all_metrics():
    y, y_hat = SINE[6:], SINE[:-6]
    rep = evaluate(y, y_hat, 5.0, 6)
    assert rep.rmse == rmse(y, y_hat) and rep.g_rmse == g_rmse(y, y_hat)
    assert rep.time_lag == 30.0 and rep.n == len(y)


def report(v):
    return MetricReport(v, v, v, v, v)


def test_pool_spreads():
    results = {0: {"a": report(1.0), "b": report(3.0)},
               1: {"a": report(2.0), "b": report(4.0)}}
    p = pool(results)["rmse"]
    assert p.mean == pytest.approx(2.5)
    # seed means 2 and 3, participant means 1.5 and 3.5, sample sd
    assert p.sd_seeds == pytest.approx(math.sqrt(0.5))
    assert p.sd_participants == pytest.approx(math.sqrt(2.0))


def test_single_seed_has_zero_spread():
    p = pool({0: {"a": report(5.0)}})["mae"]
    assert (p.mean, p.sd_seeds, p.sd_participants) == (5.0, 0.0, 0.0)


def test_format_table_cells():
    assert PooledMetric(18.234, 0.51, 2.1).format() == "18.23±0.51(2.10)"
    table = format_table({"garnn": pool({0: {"a": report(1.0)}, 1: {"a": report(3.0)}})})
    header, row = table.strip().splitlines()
    assert header.split()[0] == "method" and "gRMSE" in header
    assert row.split()[0] == "garnn" and row.count("2.00±1.41(0.00)") == 5


def test_report_csv(tmp_path):
    p = tmp_path / "m.csv"
    write_report_csv({3: {"p1": MetricReport(1.5, 2.0, 3.0, 4.0, 5.0, n=7)}}, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "seed,participant,rmse,mape,mae,g_rmse,time_lag,n"
    assert lines[1] == "3,p1,1.5,2.0,3.0,4.0,5.0,7"
