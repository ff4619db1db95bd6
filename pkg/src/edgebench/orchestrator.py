"""Run lifecycle: spawn components, enforce the reset protocol, reduce
artifacts, and execute sweep matrices.

Every component runs as its own OS process so the resource sampler can
attribute CPU/memory/network per component. A single run produces:

    runconfig.json    fully resolved configuration the components read
    samples.csv       one row per received message (workload)
    sendlog.csv       one row per issued request (workload)
    cloud_events.csv  msg_id -> cloud version (cloud scenarios)
    resources.csv     1 Hz per-component resource samples
    drain_report.json aggregator drain accounting (edge_cloud)
    summary.json      distribution summary + ECDF + resource aggregates
    metadata.json     every knob, seeds, versions, conservation verdict

Runs in a sweep execute strictly sequentially with a settle pause, and
each starts from fresh data directories plus an explicit reset + empty
probe of both services, so no state leaks between cells.
"""

from __future__ import annotations

import asyncio
import copy
import csv
import datetime
import itertools
import json
import logging
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

from . import __version__, config as config_mod, metrics
from .broker import BrokerClient
from .cloudsim import CloudClient
from .config import Config

log = logging.getLogger(__name__)

SCENARIO_COMPONENTS = {
    "cloud_only": ("cloudsim", "workload"),
    "edge_only": ("broker", "workload"),
    "edge_cloud": ("broker", "cloudsim", "aggregator", "workload"),
}
READY_TIMEOUT_S = 20.0


class RunError(Exception):
    pass


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _spawn(role: str, run_dir: Path, run_id: str) -> subprocess.Popen:
    cmd = [
        sys.executable, "-m", "edgebench.cli", f"serve-{role}",
        "--runconfig", str(run_dir / "runconfig.json"),
        "--run-dir", str(run_dir),
        "--run-id", run_id,
    ]
    out = open(run_dir / f"{role}.stdio.log", "w")
    return subprocess.Popen(cmd, stdout=out, stderr=subprocess.STDOUT)


def _wait_ready(run_dir: Path, role: str, proc: subprocess.Popen) -> None:
    deadline = time.monotonic() + READY_TIMEOUT_S
    ready = run_dir / f"{role}.ready"
    while time.monotonic() < deadline:
        if ready.exists():
            return
        if proc.poll() is not None:
            raise RunError(f"{role} exited with code {proc.returncode} before becoming ready")
        time.sleep(0.05)
    raise RunError(f"{role} not ready after {READY_TIMEOUT_S}s")


def _terminate(proc: subprocess.Popen | None, timeout: float = 20.0) -> int | None:
    if proc is None:
        return None
    if proc.poll() is None:
        proc.send_signal(signal.SIGTERM)
        try:
            proc.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
    return proc.returncode


async def _reset_and_probe(cfg: Config, scenario: str) -> None:
    """Reset both services and assert they are empty (run isolation)."""
    components = SCENARIO_COMPONENTS[scenario]
    if "broker" in components:
        bc = BrokerClient()
        await bc.connect(*cfg.broker_addr())
        await bc.reset()
        records, known = await bc.fetch(cfg.workload.topic, 0, max_records=1, wait_ms=0)
        if records or known:
            raise RunError(f"broker not empty after reset: {len(records)} records")
        await bc.close()
    if "cloudsim" in components:
        cc = CloudClient()
        await cc.connect(*cfg.cloud_addr())
        await cc.reset()
        snapshot = await cc.subscribe("probe", "runs")
        if snapshot.get("value"):
            raise RunError("cloud tree not empty after reset")
        await cc.close()


def run_once(cfg: Config, out_root: str | Path, rep: int = 0, run_id: str | None = None) -> dict:
    cfg = copy.deepcopy(cfg)
    cfg.validate()
    run_id = run_id or cfg.run_id(rep)
    run_dir = Path(out_root) / run_id
    if run_dir.exists():
        raise RunError(f"run directory already exists: {run_dir}")
    run_dir.mkdir(parents=True)
    started_at = datetime.datetime.now(datetime.timezone.utc).isoformat()

    # Resolve ports and directories so every process sees identical values.
    if cfg.broker.port == 0:
        cfg.broker.port = free_port()
    if cfg.cloud.port == 0:
        cfg.cloud.port = free_port()
    if not cfg.broker.data_dir:
        cfg.broker.data_dir = str(run_dir / "broker-data")
    if not cfg.agg.queue_dir:
        cfg.agg.queue_dir = str(run_dir / "agg-queue")
    if cfg.workload.topic not in cfg.agg.topics:
        cfg.agg.topics = [cfg.workload.topic]
    config_mod.dump(cfg, run_dir / "runconfig.json")

    scenario = cfg.workload.scenario
    components = SCENARIO_COMPONENTS[scenario]
    procs: dict[str, subprocess.Popen] = {}
    sampler = metrics.ResourceSampler(run_id, run_dir)
    error: Exception | None = None
    try:
        for role in ("broker", "cloudsim"):
            if role in components:
                procs[role] = _spawn(role, run_dir, run_id)
                _wait_ready(run_dir, role, procs[role])
        asyncio.run(_reset_and_probe(cfg, scenario))
        if "aggregator" in components:
            procs["aggregator"] = _spawn("aggregator", run_dir, run_id)
            _wait_ready(run_dir, "aggregator", procs["aggregator"])

        for role, proc in procs.items():
            sampler.add(role, proc.pid)
        sampler.start()

        procs["workload"] = _spawn("workload", run_dir, run_id)
        sampler.add("workload", procs["workload"].pid)

        _await_senders_done(cfg, run_dir, procs["workload"])

        if "aggregator" in procs:
            # The log is complete once senders finish; let the consumer reach
            # its end before freezing consumption, otherwise tail records
            # would be stranded at the broker.
            asyncio.run(_await_aggregator_caught_up(cfg, procs["aggregator"]))
            rc = _terminate(procs["aggregator"], timeout=cfg.agg.drain_timeout_ms / 1000.0 + 30)
            if rc != 0:
                log.warning("aggregator exited with code %s (drain incomplete?)", rc)

        wl_timeout = _workload_budget_s(cfg)
        try:
            rc = procs["workload"].wait(timeout=wl_timeout)
        except subprocess.TimeoutExpired:
            raise RunError(f"workload did not finish within {wl_timeout:.0f}s")
        if rc != 0:
            raise RunError(f"workload exited with code {rc}")
    except Exception as exc:
        error = exc
    finally:
        sampler.stop()
        for role in ("workload", "aggregator", "cloudsim", "broker"):
            _terminate(procs.get(role))

    if error is not None:
        (run_dir / "error.json").write_text(
            json.dumps({"run_id": run_id, "error": str(error)}, indent=2)
        )
        raise error if isinstance(error, RunError) else RunError(str(error))

    result = reduce_run(run_dir)
    metadata = {
        "run_id": run_id,
        "rep": rep,
        "started_at": started_at,
        "finished_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": cfg.to_dict(),
        "seeds": {"workload": cfg.seeds.workload, "cloud": cfg.seeds.cloud},
        "durability_mode": f"flush_every={cfg.broker.flush_every}",
        "versions": {"python": sys.version.split()[0], "edgebench": __version__},
        "conservation": result["conservation"],
        "valid": result["valid"],
    }
    validate_metadata(metadata)
    (run_dir / "metadata.json").write_text(json.dumps(metadata, indent=2, sort_keys=True))
    return result


async def _await_aggregator_caught_up(cfg: Config, proc: subprocess.Popen) -> None:
    """Poll until the aggregator's committed offset reaches the end of every
    topic (a fetch from the committed offset comes back empty)."""
    deadline = time.monotonic() + cfg.agg.drain_timeout_ms / 1000.0
    bc = BrokerClient()
    await bc.connect(*cfg.broker_addr())
    try:
        while time.monotonic() < deadline and proc.poll() is None:
            caught_up = True
            for topic in cfg.agg.topics:
                committed = await bc.committed("agg", topic)
                records, _ = await bc.fetch(topic, committed, max_records=1, wait_ms=0)
                if records:
                    caught_up = False
            if caught_up:
                return
            await asyncio.sleep(0.2)
        log.warning("aggregator did not catch up with the broker log in time")
    finally:
        await bc.close()


def _workload_budget_s(cfg: Config) -> float:
    w = cfg.workload
    send_s = w.requests_per_user * (w.interarrival_mean_ms + 4 * w.interarrival_sigma_ms) / 1000.0
    return send_s + cfg.agg.drain_timeout_ms / 1000.0 + w.grace_s + 120.0


def _await_senders_done(cfg: Config, run_dir: Path, proc: subprocess.Popen) -> None:
    deadline = time.monotonic() + _workload_budget_s(cfg)
    marker = run_dir / "senders_done"
    while time.monotonic() < deadline:
        if marker.exists() or proc.poll() is not None:
            return
        time.sleep(0.1)
    raise RunError("senders did not finish within the time budget")


# -- reduction -------------------------------------------------------------


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def reduce_run(run_dir: str | Path) -> dict:
    """Recompute summary.json and the conservation verdict from raw CSVs."""
    run_dir = Path(run_dir)
    cfg = config_mod.load(run_dir / "runconfig.json")
    recv_report = json.loads((run_dir / "recv_report.json").read_text())
    run_id = recv_report["run_id"]

    samples = _read_csv(run_dir / "samples.csv")
    if cfg.workload.warmup_discard_s > 0:
        cutoff = recv_report["t0_mono_ns"] + int(cfg.workload.warmup_discard_s * 1e9)
        samples = [s for s in samples if int(s["sent_ns"]) >= cutoff]
    latencies_ms = [int(s["latency_ns"]) / 1e6 for s in samples]

    conservation = _check_conservation(run_dir, cfg, recv_report)
    resource_rows = _read_csv(run_dir / "resources.csv")
    summary = {
        "run_id": run_id,
        "scenario": cfg.workload.scenario,
        "payload_bytes": cfg.workload.payload_bytes,
        "users": cfg.workload.users,
        "requests_per_user": cfg.workload.requests_per_user,
        "latency_ms": metrics.summarize(latencies_ms) if latencies_ms else None,
        "ecdf_ms": metrics.ecdf_downsample(metrics.ecdf(latencies_ms)) if latencies_ms else None,
        "resources": metrics.aggregate_resources(resource_rows) if resource_rows else {},
        "recv_report": recv_report,
        "conservation": conservation,
        "valid": conservation["ok"],
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    lat = summary["latency_ms"]
    return {
        "run_id": run_id,
        "run_dir": str(run_dir),
        "scenario": cfg.workload.scenario,
        "payload_bytes": cfg.workload.payload_bytes,
        "users": cfg.workload.users,
        "n": len(latencies_ms),
        "median_ms": lat["median"] if lat else float("nan"),
        "p99_ms": lat["p99"] if lat else float("nan"),
        "max_ms": lat["max"] if lat else float("nan"),
        "overloads": recv_report.get("overloads", 0),
        "conservation": conservation,
        "valid": conservation["ok"],
    }


def _check_conservation(run_dir: Path, cfg: Config, recv_report: dict) -> dict:
    expected = cfg.workload.users * cfg.workload.requests_per_user
    sendlog = _read_csv(run_dir / "sendlog.csv")
    samples = _read_csv(run_dir / "samples.csv")

    issued = {(int(r["user_id"]), int(r["seq"])) for r in sendlog}
    sampled_pairs = [(int(r["user_id"]), int(r["seq"])) for r in samples]
    sampled = set(sampled_pairs)
    msg_ids = [r["msg_id"] for r in samples]
    dispatch_errors = {
        (int(r["user_id"]), int(r["seq"])) for r in sendlog if r["status"] != "sent"
    }

    checks = {
        "issued_complete": len(sendlog) == expected and len(issued) == expected,
        "samples_unique": len(sampled) == len(sampled_pairs) and len(set(msg_ids)) == len(msg_ids),
        "samples_from_issued": sampled <= issued,
        "recv_after_send": all(int(r["latency_ns"]) >= 0 for r in samples),
        "errors_disjoint": not (sampled & dispatch_errors),
        "accounting": recv_report["samples"]
        + recv_report["send_errors"]
        + recv_report["unreceived"]
        == expected
        and recv_report["samples"] == len(sampled),
    }
    return {
        "ok": all(checks.values()),
        "checks": checks,
        "expected": expected,
        "samples": len(sampled),
        "send_errors": recv_report["send_errors"],
        "unreceived": recv_report["unreceived"],
        "duplicate_samples": len(sampled_pairs) - len(sampled),
    }


def validate_metadata(metadata: dict) -> None:
    flat = {
        f"{section}.{key}"
        for section, body in metadata["config"].items()
        for key in body
    }
    missing = config_mod.all_keys() - flat
    if missing:
        raise RunError(f"metadata missing config keys: {sorted(missing)}")


# -- sweeps ------------------------------------------------------------------


def run_matrix(cfg: Config, out_root: str | Path) -> dict:
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    sweep = cfg.sweep
    cells = list(
        itertools.product(
            sweep.scenarios, sweep.user_counts, sweep.payload_sizes, range(sweep.repetitions)
        )
    )
    results = []
    for i, (scenario, users, payload, rep) in enumerate(cells):
        cell_cfg = copy.deepcopy(cfg)
        cell_cfg.workload.scenario = scenario
        cell_cfg.workload.users = users
        cell_cfg.workload.payload_bytes = payload
        run_id = cell_cfg.run_id(rep)
        log.info("sweep cell %d/%d: %s", i + 1, len(cells), run_id)
        try:
            results.append(run_once(cell_cfg, out_root, rep=rep))
        except RunError as exc:
            log.error("cell %s failed: %s", run_id, exc)
            results.append(
                {
                    "run_id": run_id,
                    "scenario": scenario,
                    "users": users,
                    "payload_bytes": payload,
                    "valid": False,
                    "error": str(exc),
                }
            )
        if i + 1 < len(cells):
            time.sleep(sweep.settle_s)

    valid_cells = [r for r in results if r.get("valid")]
    knee = metrics.detect_knee(valid_cells, sweep.knee_threshold_ms) if valid_cells else {}
    comparison = {
        "cells": results,
        "knee_threshold_ms": sweep.knee_threshold_ms,
        "generated_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    (out_root / "comparison.json").write_text(json.dumps(comparison, indent=2))
    (out_root / "knee_report.json").write_text(json.dumps(knee, indent=2))
    return {"cells": results, "knee": knee, "out_root": str(out_root)}


def report(out_root: str | Path) -> dict:
    """Re-reduce every run under out_root and rebuild the sweep reports."""
    out_root = Path(out_root)
    results = []
    for run_dir in sorted(out_root.iterdir()):
        if not (run_dir / "runconfig.json").exists():
            continue
        try:
            results.append(reduce_run(run_dir))
        except Exception as exc:
            results.append({"run_id": run_dir.name, "valid": False, "error": str(exc)})
    valid_cells = [r for r in results if r.get("valid")]
    threshold = 10_000.0
    cfg_files = list(out_root.glob("*/runconfig.json"))
    if cfg_files:
        threshold = config_mod.load(cfg_files[0]).sweep.knee_threshold_ms
    knee = metrics.detect_knee(valid_cells, threshold) if valid_cells else {}
    (out_root / "comparison.json").write_text(
        json.dumps({"cells": results, "knee_threshold_ms": threshold}, indent=2)
    )
    (out_root / "knee_report.json").write_text(json.dumps(knee, indent=2))
    return {"cells": results, "knee": knee}


def format_table(results: list[dict]) -> str:
    header = f"{'run_id':34} {'n':>8} {'median_ms':>11} {'p99_ms':>11} {'max_ms':>11} {'valid':>6}"
    lines = [header, "-" * len(header)]
    for r in sorted(results, key=lambda r: r["run_id"]):
        if "median_ms" in r:
            lines.append(
                f"{r['run_id']:34} {r.get('n', 0):>8} {r['median_ms']:>11.2f} "
                f"{r['p99_ms']:>11.2f} {r['max_ms']:>11.2f} {str(r['valid']):>6}"
            )
        else:
            lines.append(f"{r['run_id']:34} {'-':>8} {'-':>11} {'-':>11} {'-':>11} {str(r.get('valid')):>6}")
    return "\n".join(lines)
