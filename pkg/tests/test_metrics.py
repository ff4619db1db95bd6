"""Statistics tests: quantile/ECDF/aggregate oracles, knee detection,
resource sampler calibration."""

import csv
import math
import random
import subprocess
import sys
import time

import pytest

from edgebench import metrics


# -- quantiles -----------------------------------------------------------------


def sort_index_oracle(values, p):
    s = sorted(values)
    rank = max(1, math.ceil(p * len(s)))
    return s[rank - 1]


def test_single_value_summary():
    s = metrics.summarize([5.0])
    assert s["min"] == s["median"] == s["max"] == 5.0
    assert s["n"] == 1


def test_four_value_hand_check():
    s = metrics.summarize([1, 2, 3, 4])
    assert (s["p25"], s["median"], s["p75"]) == (1.0, 2.0, 3.0)


def test_quantiles_match_oracle_on_random_inputs():
    rng = random.Random(11)
    for _ in range(50):
        n = rng.randint(1, 10_000)
        values = [rng.lognormvariate(3, 1) for _ in range(n)]
        s = metrics.summarize(values)
        for key, p in (("p25", 0.25), ("median", 0.5), ("p75", 0.75), ("p99", 0.99)):
            assert s[key] == sort_index_oracle(values, p)
        assert s["min"] == min(values) and s["max"] == max(values)
        assert s["mean"] == pytest.approx(sum(values) / n)


def test_summary_order_invariant():
    values = [random.Random(5).lognormvariate(2, 1) for _ in range(500)]
    shuffled = list(values)
    random.Random(6).shuffle(shuffled)
    a, b = metrics.summarize(values), metrics.summarize(shuffled)
    assert a == b


def test_kde_is_nonnegative_and_finite():
    s = metrics.summarize([10.0] * 50)  # degenerate: zero spread
    assert all(y >= 0 and math.isfinite(y) for y in s["kde"]["y"])
    s = metrics.summarize([random.Random(1).lognormvariate(4, 0.8) for _ in range(2000)])
    assert all(y >= 0 for y in s["kde"]["y"])
    assert len(s["kde"]["x"]) == metrics.KDE_GRID_POINTS


def test_empty_input_raises():
    with pytest.raises(metrics.EmptyInputError):
        metrics.summarize([])
    with pytest.raises(metrics.EmptyInputError):
        metrics.ecdf([])


# -- ECDF ------------------------------------------------------------------------


def test_ecdf_hand_check():
    curve = metrics.ecdf([3, 1, 2])
    assert curve["x"] == [1, 2, 3]
    assert curve["f"] == pytest.approx([1 / 3, 2 / 3, 1.0])
    assert metrics.ecdf_eval(curve, 0.5) == 0.0
    assert metrics.ecdf_eval(curve, 1) == pytest.approx(1 / 3)
    assert metrics.ecdf_eval(curve, 99) == 1.0


def test_ecdf_matches_counting_oracle():
    rng = random.Random(21)
    values = [rng.gauss(50, 12) for _ in range(3000)]
    curve = metrics.ecdf(values)
    for _ in range(100):
        probe = rng.uniform(0, 100)
        oracle = sum(1 for v in values if v <= probe) / len(values)
        assert metrics.ecdf_eval(curve, probe) == pytest.approx(oracle)
    assert curve["f"][-1] == 1.0
    assert all(a <= b for a, b in zip(curve["f"], curve["f"][1:]))


def test_ecdf_downsample_keeps_endpoints():
    values = list(range(10_000))
    down = metrics.ecdf_downsample(metrics.ecdf(values), max_points=512)
    assert len(down["x"]) <= 512
    assert down["f"][-1] == 1.0
    assert down["x"][0] == 0 and down["x"][-1] == 9999


# -- knee detection ----------------------------------------------------------------


def make_cell(scenario, payload, users, median):
    return {
        "scenario": scenario,
        "payload_bytes": payload,
        "users": users,
        "median_ms": median,
        "p99_ms": median * 2,
        "max_ms": median * 3,
    }


def test_knee_all_below_threshold():
    cells = [make_cell("cloud_only", 1024, u, 50) for u in (100, 200, 300)]
    report = metrics.detect_knee(cells, threshold_ms=10_000)
    assert report["sweeps"][0]["max_scalable_users"] == 300


def test_knee_first_crossing():
    cells = [
        make_cell("cloud_only", 1024, 100, 1),
        make_cell("cloud_only", 1024, 200, 2),
        make_cell("cloud_only", 1024, 300, 11_000),
    ]
    report = metrics.detect_knee(cells, threshold_ms=10_000)
    assert report["sweeps"][0]["max_scalable_users"] == 200


def test_knee_zero_when_smallest_crosses():
    cells = [make_cell("e", 1024, 100, 99_000), make_cell("e", 1024, 200, 1)]
    report = metrics.detect_knee(cells, threshold_ms=10_000)
    # first crossing at the smallest load: later dips don't resurrect it
    assert report["sweeps"][0]["max_scalable_users"] == 0


def test_knee_groups_by_scenario_and_payload():
    cells = [
        make_cell("cloud_only", 1024, 100, 10),
        make_cell("cloud_only", 10240, 100, 20_000),
        make_cell("edge_only", 1024, 100, 1),
    ]
    report = metrics.detect_knee(cells, threshold_ms=10_000)
    by_key = {(s["scenario"], s["payload_bytes"]): s["max_scalable_users"] for s in report["sweeps"]}
    assert by_key == {("cloud_only", 1024): 100, ("cloud_only", 10240): 0, ("edge_only", 1024): 100}


def test_knee_order_invariant():
    cells = [make_cell("c", 1024, u, m) for u, m in ((300, 40), (100, 10), (200, 99_000))]
    a = metrics.detect_knee(cells, 10_000)
    b = metrics.detect_knee(list(reversed(cells)), 10_000)
    assert a == b


# -- resource aggregation -------------------------------------------------------------


def rows_fixture(rng, n=100):
    rows = []
    net_in = net_out = 0
    for ts in range(1, n + 1):
        net_in += rng.randint(0, 10_000)
        net_out += rng.randint(0, 10_000)
        rows.append(
            {
                "run_id": "r", "ts_s": ts, "component": "broker",
                "cpu_pct": round(rng.uniform(0, 200), 2),
                "mem_bytes": rng.randint(10**6, 10**8),
                "net_in_cum": net_in, "net_out_cum": net_out, "dead": 0,
            }
        )
    return rows


def test_aggregate_matches_spreadsheet_oracle():
    rng = random.Random(33)
    rows = rows_fixture(rng)
    agg = metrics.aggregate_resources(rows)["broker"]
    cpus = [r["cpu_pct"] for r in rows]
    mems = [r["mem_bytes"] for r in rows]
    assert agg["cpu_pct"]["mean"] == pytest.approx(sum(cpus) / len(cpus))
    assert agg["cpu_pct"]["min"] == min(cpus) and agg["cpu_pct"]["max"] == max(cpus)
    assert agg["mem_bytes"]["min"] == min(mems) and agg["mem_bytes"]["max"] == max(mems)
    assert agg["net"]["in_total"] == rows[-1]["net_in_cum"]
    deltas_in = [b["net_in_cum"] - a["net_in_cum"] for a, b in zip(rows, rows[1:])]
    assert agg["net"]["in_peak_rate"] == max(deltas_in)


def test_aggregate_constant_series_zero_spread():
    rows = [
        {"run_id": "r", "ts_s": ts, "component": "c", "cpu_pct": 7.0,
         "mem_bytes": 42, "net_in_cum": 100, "net_out_cum": 100, "dead": 0}
        for ts in range(1, 11)
    ]
    agg = metrics.aggregate_resources(rows)["c"]
    assert agg["cpu_pct"]["mean"] == agg["cpu_pct"]["min"] == agg["cpu_pct"]["max"] == 7.0
    assert agg["net"]["in_peak_rate"] == 0


# -- resource sampler -----------------------------------------------------------------


def test_sampler_attributes_busy_and_idle_cpu(tmp_path):
    """Calibration: the sampler's cpu_pct for a busy loop must agree with a
    direct cpu_times measurement over the same window (the oracle; it equals
    ~100 on an idle host, less when the host is contended)."""
    import psutil

    busy = subprocess.Popen([sys.executable, "-c", "while True: pass"])
    idle = subprocess.Popen([sys.executable, "-c", "import time; time.sleep(60)"])
    sampler = metrics.ResourceSampler("calib", tmp_path, interval_s=0.5)
    try:
        sampler.add("busy", busy.pid)
        sampler.add("idle", idle.pid)
        sampler.start()
        oracle_proc = psutil.Process(busy.pid)
        t0, w0 = oracle_proc.cpu_times(), time.monotonic()
        time.sleep(4)
        t1, w1 = oracle_proc.cpu_times(), time.monotonic()
        oracle_pct = 100 * ((t1.user + t1.system) - (t0.user + t0.system)) / (w1 - w0)
    finally:
        sampler.stop()
        busy.kill()
        idle.kill()
        busy.wait()
        idle.wait()
    with open(tmp_path / "resources.csv") as fh:
        rows = list(csv.DictReader(fh))
    busy_cpu = [float(r["cpu_pct"]) for r in rows if r["component"] == "busy"]
    idle_cpu = [float(r["cpu_pct"]) for r in rows if r["component"] == "idle"]
    assert busy_cpu and idle_cpu
    busy_mean = sum(busy_cpu) / len(busy_cpu)
    assert busy_mean == pytest.approx(oracle_pct, abs=10)
    assert busy_mean > 50
    assert sum(idle_cpu) / len(idle_cpu) < 5
    mems = [int(r["mem_bytes"]) for r in rows if r["component"] == "busy"]
    assert all(m > 0 for m in mems)


def test_sampler_flags_dead_component(tmp_path):
    victim = subprocess.Popen([sys.executable, "-c", "import time; time.sleep(60)"])
    sampler = metrics.ResourceSampler("dead", tmp_path, interval_s=0.3)
    try:
        sampler.add("victim", victim.pid)
        sampler.start()
        time.sleep(0.8)
        victim.kill()
        victim.wait()
        time.sleep(1.0)
    finally:
        sampler.stop()
    with open(tmp_path / "resources.csv") as fh:
        rows = [r for r in csv.DictReader(fh) if r["component"] == "victim"]
    assert any(int(r["dead"]) == 1 for r in rows)
