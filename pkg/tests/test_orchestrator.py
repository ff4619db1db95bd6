"""End-to-end orchestrator tests: full run lifecycle with component
processes, conservation verdicts, determinism, failure paths, sweeps."""

import csv
import json
import socket
from pathlib import Path

import pytest

from edgebench import orchestrator
from edgebench.config import Config


def small_config(scenario, users=2, requests=5, mean_ms=40.0, payload=256):
    cfg = Config()
    cfg.broker.port = 0  # orchestrator picks free ports
    cfg.cloud.port = 0
    cfg.workload.scenario = scenario
    cfg.workload.users = users
    cfg.workload.requests_per_user = requests
    cfg.workload.interarrival_mean_ms = mean_ms
    cfg.workload.interarrival_sigma_ms = 10.0
    cfg.workload.payload_bytes = payload
    cfg.workload.grace_s = 3.0
    cfg.workload.fetch_wait_ms = 50
    cfg.agg.flush_interval_ms = 20
    cfg.cloud.wan_median_ms = 2.0
    cfg.cloud.service_ms_base = 1.0
    cfg.cloud.http_overhead_ms = 2.0
    cfg.sweep.settle_s = 0.2
    return cfg


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_once_edge_only_smoke(tmp_path):
    cfg = small_config("edge_only", users=2, requests=3)
    result = orchestrator.run_once(cfg, tmp_path)
    assert result["valid"]
    assert result["n"] == 6
    run_dir = Path(result["run_dir"])
    for artifact in ("samples.csv", "sendlog.csv", "resources.csv",
                     "summary.json", "metadata.json", "runconfig.json"):
        assert (run_dir / artifact).exists(), artifact
    meta = json.loads((run_dir / "metadata.json").read_text())
    assert meta["conservation"]["ok"]
    assert meta["versions"]["edgebench"]
    orchestrator.validate_metadata(meta)  # every knob present


def test_run_once_cloud_only_smoke(tmp_path):
    cfg = small_config("cloud_only", users=2, requests=4)
    result = orchestrator.run_once(cfg, tmp_path)
    assert result["valid"] and result["n"] == 8
    run_dir = Path(result["run_dir"])
    events = read_csv(run_dir / "cloud_events.csv")
    assert sorted(int(e["version"]) for e in events) == list(range(1, 9))
    rows = read_csv(run_dir / "resources.csv")
    comps = {r["component"] for r in rows}
    assert {"cloudsim", "workload", "combined"} <= comps
    assert "broker" not in comps  # scenario isolation: broker never started


def test_run_once_edge_cloud_smoke(tmp_path):
    cfg = small_config("edge_cloud", users=3, requests=5, mean_ms=300.0)
    result = orchestrator.run_once(cfg, tmp_path)
    assert result["valid"] and result["n"] == 15
    run_dir = Path(result["run_dir"])
    drain = json.loads((run_dir / "drain_report.json").read_text())
    assert drain["enqueued"] == drain["synced"] == 15
    assert drain["remaining"] == 0
    rows = read_csv(run_dir / "resources.csv")
    comps = {r["component"] for r in rows}
    assert {"broker", "cloudsim", "aggregator", "workload", "combined"} <= comps
    # net counters are cumulative and non-decreasing per component
    for comp in ("broker", "aggregator"):
        series = [int(r["net_in_cum"]) for r in rows if r["component"] == comp]
        assert series == sorted(series)


def test_rerun_with_identical_seeds_identical_outcomes(tmp_path):
    def once(sub):
        cfg = small_config("cloud_only", users=3, requests=6)
        result = orchestrator.run_once(cfg, tmp_path / sub)
        run_dir = Path(result["run_dir"])
        sendlog = [
            (r["user_id"], r["seq"], r["status"])
            for r in read_csv(run_dir / "sendlog.csv")
        ]
        versions = {
            r["msg_id"]: int(r["version"]) for r in read_csv(run_dir / "cloud_events.csv")
        }
        report = json.loads((run_dir / "recv_report.json").read_text())
        return sendlog, versions, report["overload_msg_ids"]

    first, second = once("a"), once("b")
    assert first[0] == second[0]  # send-log identical modulo timestamps
    assert first[1] == second[1]  # identical cloud version assignments
    assert first[2] == second[2]  # identical overload sets


def test_occupied_port_aborts_without_partial_artifacts(tmp_path):
    blocker = socket.socket()
    blocker.bind(("127.0.0.1", 0))
    blocker.listen(1)
    port = blocker.getsockname()[1]
    try:
        cfg = small_config("edge_only")
        cfg.broker.port = port
        with pytest.raises(orchestrator.RunError):
            orchestrator.run_once(cfg, tmp_path)
    finally:
        blocker.close()
    run_dir = next(tmp_path.iterdir())
    assert (run_dir / "error.json").exists()
    assert not (run_dir / "samples.csv").exists()


def test_existing_run_dir_refused(tmp_path):
    cfg = small_config("edge_only")
    (tmp_path / cfg.run_id(0)).mkdir(parents=True)
    with pytest.raises(orchestrator.RunError):
        orchestrator.run_once(cfg, tmp_path)


def test_run_matrix_and_report(tmp_path):
    cfg = small_config("edge_only", users=2, requests=4)
    cfg.sweep.scenarios = ["edge_only", "cloud_only"]
    cfg.sweep.user_counts = [2]
    cfg.sweep.payload_sizes = [256]
    cfg.sweep.repetitions = 1
    sweep = orchestrator.run_matrix(cfg, tmp_path)
    assert len(sweep["cells"]) == 2
    assert all(c["valid"] for c in sweep["cells"])
    assert (tmp_path / "comparison.json").exists()
    assert (tmp_path / "knee_report.json").exists()
    knee = json.loads((tmp_path / "knee_report.json").read_text())
    assert {s["scenario"] for s in knee["sweeps"]} == {"edge_only", "cloud_only"}
    # every sweep stays under the default 10 s threshold at this scale
    assert all(s["max_scalable_users"] == 2 for s in knee["sweeps"])

    rebuilt = orchestrator.report(tmp_path)
    assert len(rebuilt["cells"]) == 2
    assert all(c["valid"] for c in rebuilt["cells"])
    table = orchestrator.format_table(rebuilt["cells"])
    assert "edge_only-u2-b256-r0" in table


def test_empty_matrix_is_noop(tmp_path):
    cfg = small_config("edge_only")
    cfg.sweep.scenarios = []
    sweep = orchestrator.run_matrix(cfg, tmp_path)
    assert sweep["cells"] == []
