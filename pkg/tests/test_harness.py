import csv
import json

import numpy as np
import pytest

from submhe.errors import ConfigurationError
from submhe.harness import (
    CHANNEL_W,
    CSV_COLUMNS,
    MetricsTable,
    RunConfig,
    emit,
    metrics_row,
    monte_carlo,
    read_records_csv,
    run_replicates,
    run_single,
    sample_box_uniform,
)
from submhe.model import BoxSet


def test_degenerate_box_sample():
    box = BoxSet(np.zeros(2), np.zeros(2))
    np.testing.assert_array_equal(sample_box_uniform(box, 1, 2, 3, 4), [0.0, 0.0])


def test_sample_mean():
    box = BoxSet.symmetric([2e-3])
    draws = np.array([sample_box_uniform(box, 42, 0, CHANNEL_W, t)[0] for t in range(100_000)])
    assert abs(draws.mean()) < 1e-4
    assert draws.min() >= -2e-3 and draws.max() <= 2e-3


def test_sample_determinism():
    box = BoxSet.symmetric([1.0, 1.0])
    a = sample_box_uniform(box, 7, 3, 1, 11)
    np.testing.assert_array_equal(a, sample_box_uniform(box, 7, 3, 1, 11))
    assert not np.array_equal(a, sample_box_uniform(box, 7, 3, 1, 12))


def test_sample_unbounded_rejected():
    with pytest.raises(ConfigurationError):
        sample_box_uniform(BoxSet.unbounded(1), 0, 0, 0, 0)


def test_exact_model_zero_error():
    rec = run_single(RunConfig(budget=0, x_bar0=(0.5, 0.05, 0.0)), 0, zero_noise=True)
    assert np.all(rec.errors() == 0.0)


def test_record_invariants():
    rec = run_single(RunConfig(budget=2), 3)
    assert len(rec) == 61
    assert np.all(rec.cost_accepted <= rec.cost_candidate)
    assert np.all((rec.x_hat >= 0) & (rec.x_hat <= 4))
    np.testing.assert_array_equal(rec.x_hat[0], [1.0, 0.5, 0.1])


def test_config_validation():
    with pytest.raises(ConfigurationError):
        RunConfig(N=3, T=3)
    with pytest.raises(ConfigurationError):
        RunConfig(budget=-1)
    with pytest.raises(ConfigurationError):
        RunConfig.from_mapping({"horizon": 3})
    assert RunConfig(T="t").T is None


def test_single_replicate_table_matches_run():
    cfg = RunConfig(budget=2, n_runs=1)
    table, recs = monte_carlo(cfg)
    rec = run_single(cfg, 0)
    assert table.rows[0].SSE == rec.sse() and table.rows[0].SNE == rec.sne()


def test_mean_is_order_invariant():
    cfg = RunConfig(budget=1, n_runs=4, sim_length=30)
    recs = run_replicates(cfg)
    a = metrics_row(cfg, recs)
    b = metrics_row(cfg, recs[::-1])
    assert a.SSE == b.SSE and a.SNE == b.SNE


def test_threaded_runs_are_bitwise_identical():
    cfg = RunConfig(budget=2, n_runs=6, sim_length=30)
    seq = run_replicates(cfg, workers=1)
    par = run_replicates(cfg, workers=4)
    for a, b in zip(seq, par):
        np.testing.assert_array_equal(a.x_hat, b.x_hat)
        np.testing.assert_array_equal(a.cost_accepted, b.cost_accepted)


def test_empty_csv_has_header(tmp_path):
    path = tmp_path / "empty.csv"
    emit([], "csv", path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows == [list(CSV_COLUMNS)]


def test_csv_round_trip(tmp_path):
    recs = [run_single(RunConfig(budget=2, sim_length=20), r) for r in range(2)]
    path = tmp_path / "runs.csv"
    emit(recs, "csv", path)
    back = read_records_csv(path)
    assert len(back) == 2
    for a, b in zip(recs, back):
        for name in ("x", "z", "x_hat", "y", "w", "v", "eps", "cost_candidate", "cost_accepted"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
        np.testing.assert_array_equal(a.iters, b.iters)


def test_json_outputs(tmp_path):
    cfg = RunConfig(budget=0, n_runs=2, sim_length=10)
    table, recs = monte_carlo(cfg)
    emit(table, "json", tmp_path / "t.json")
    emit(recs, "json", tmp_path / "r.json")
    t = json.loads((tmp_path / "t.json").read_text())
    assert {"SSE", "SNE", "tau_a"} <= set(t["rows"][0])
    r = json.loads((tmp_path / "r.json").read_text())
    assert len(r) == 2 and "x_hat" in r[0]


def test_emit_reports_path(tmp_path):
    bad = tmp_path / "missing" / "out.csv"
    with pytest.raises(OSError, match="missing"):
        emit([], "csv", bad)


def test_timing_recorded_only_on_request():
    rec = run_single(RunConfig(budget=1, sim_length=10), 0)
    assert not rec.wall_us.any()
    timed = run_single(RunConfig(budget=1, sim_length=10, record_timing=True), 0)
    assert np.all(timed.wall_us[1:] > 0)
    assert timed.tau_a(3) > 0


def test_table_find():
    table = MetricsTable()
    monte_carlo(RunConfig(budget=0, n_runs=1, sim_length=5), table=table)
    monte_carlo(RunConfig(budget=1, n_runs=1, sim_length=5), table=table)
    assert table.find(budget=1).budget == 1
